import pytest

from tgppo.cli import main, parse_config, parse_seeds, resolve_cutoff
from tgppo.errors import ConfigError
from tgppo.milp import read_instance
from tgppo.net import load_checkpoint

from conftest import DATA

TINY_CONFIG = """\
# small network so the pipeline runs in seconds
d_h = 8
n_layers = 1
n_heads = 2
horizon = 16
minibatch = 8
epochs = 1
seeds = 0,1
net_seed = 3
"""


def test_solve_knapsack(capsys):
    rc = main(["solve", "--instance", str(DATA / "knapsack2.mps"), "--policy", "most_fractional",
               "--cutoff", "-4"])
    assert rc == 0
    assert capsys.readouterr().out.splitlines()[0] == "status=OPTIMAL nodes=5"


def test_solve_auto_cutoff_is_cached(tmp_path, capsys):
    src = (DATA / "knapsack2.mps").read_text()
    path = tmp_path / "k.mps"
    path.write_text(src)
    assert resolve_cutoff(path, read_instance(path), "AUTO") == -4.0
    assert (tmp_path / "k.mps.opt").read_text().strip() == "-4"
    assert main(["solve", "--instance", str(path), "--policy", "most_fractional", "--cutoff", "AUTO"]) == 0
    assert capsys.readouterr().out.startswith("status=OPTIMAL nodes=5")


def test_exit_codes(tmp_path, capsys):
    assert main(["solve", "--instance", str(DATA / "knapsack2.mps"), "--policy", "bogus"]) == 1
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert main(["solve", "--instance", str(tmp_path / "missing.mps")]) == 2
    bad = tmp_path / "bad.mps"
    bad.write_text("NAME x\nRANGES\nENDATA\n")
    assert main(["solve", "--instance", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "usage error" in err and "error: " in err


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert "generate" in capsys.readouterr().out


def test_parse_seeds():
    assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds("3, 5,7") == [3, 5, 7]


def test_config_errors_name_the_line():
    assert parse_config("# only a comment\n\nclip_eps = 0.2  # trailing\n") == {"clip_eps": 0.2}
    cases = {"a = 1\n": "UNKNOWN_KEY", "gamma = 0.9\nnonsense\n": "MALFORMED_LINE",
             "gamma = 0.9\ngamma = 0.8\n": "DUPLICATE_KEY", "\n\nepochs = three\n": "BAD_VALUE"}
    lines = {"UNKNOWN_KEY": 1, "MALFORMED_LINE": 2, "DUPLICATE_KEY": 2, "BAD_VALUE": 3}
    for text, code in cases.items():
        with pytest.raises(ConfigError) as e:
            parse_config(text)
        assert e.value.code == code
        assert f"line {lines[code]}" in str(e.value)


def test_bad_config_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("d_h = 8\nlearning_rate = 1\n")
    data = tmp_path / "data"
    assert main(["generate", "--family", "SET_COVER", "--rows", "4", "--cols", "6", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--config", str(cfg), "--episodes", "0",
                 "--out", str(tmp_path / "m.pt")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_train_zero_episodes_writes_initial_checkpoint(tmp_path):
    data = tmp_path / "data"
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CONFIG)
    assert main(["generate", "--family", "set_cover", "--rows", "4", "--cols", "6", "--out", str(data)]) == 0
    out = tmp_path / "m.pt"
    assert main(["train", "--data", str(data), "--config", str(cfg), "--episodes", "0", "--out", str(out)]) == 0
    net, meta = load_checkpoint(out)
    assert net.cfg.d_h == 8 and net.cfg.seed == 3
    assert (tmp_path / "m.pt.train.csv").read_text().count("\n") == 1


def _pipeline(root):
    data, cfg = root / "data", root / "c.cfg"
    cfg.write_text(TINY_CONFIG)
    steps = [
        ["generate", "--family", "SET_COVER", "--rows", "6", "--cols", "8", "--density", "0.4", "--count", "2",
         "--seed", "5", "--out", str(data)],
        ["baseline", "--data", str(data), "--seeds", "0..1", "--out", str(root / "manifest.csv")],
        ["train", "--data", str(data), "--config", str(cfg), "--episodes", "3", "--manifest",
         str(root / "manifest.csv"), "--log", str(root / "train.csv"), "--out", str(root / "m.pt")],
        ["eval", "--data", str(data), "--checkpoint", str(root / "m.pt"), "--baselines", "random,pscost",
         "--seeds", "0..1", "--out", str(root / "results.csv")],
        ["report", "--results", str(root / "results.csv"), "--out", str(root / "report.md")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return {name: (root / name).read_bytes()
            for name in ("manifest.csv", "train.csv", "results.csv", "report.md", "m.pt")}


def test_pipeline_is_deterministic(tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    for name in first:
        assert first[name] == second[name], name
    report = first["report.md"].decode()
    assert "| baseline | % win (Nnodes) | % win (PDI) |" in report
    assert first["results.csv"].decode().count("\n") == 1 + 2 * 3 * 2
