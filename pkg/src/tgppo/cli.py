"""Command-line entry point: generate, baseline, solve, train, tune, eval, report.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import dataclasses
import math
import sys
from pathlib import Path


from .bnb import RunConfig, run
from .errors import ConfigError, LimitExceeded, TgppoError
from .milp import (Family, GeneratorParams, brute_force_solve, generate_instance, read_instance,
                   write_instance)
from .net import NetConfig
from .ppo import TrainConfig

INSTANCE_SUFFIXES = (".mps", ".inst")
BRUTE_FORCE_MAX_INT = 16
AUTO_CUTOFF_NODES = 200_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------ config file
_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_NET_KEYS = {f.name: f for f in dataclasses.fields(NetConfig) if f.name != "seed"}
_RUN_KEYS = {"node_budget": int, "decision_budget": int, "time_budget": float, "clock": str,
             "max_lp_iterations": int, "cutoff": str}
_PATH_KEYS = {"manifest", "log", "checkpoint_dir"}


def _convert(key, raw, line_no):
    try:
        if key == "seeds":
            return parse_seeds(raw)
        if key == "head_widths":
            return [int(t) for t in raw.replace(",", " ").split()]
        if key in _RUN_KEYS:
            return _RUN_KEYS[key](raw)
        if key in _PATH_KEYS:
            return raw
        if key == "net_seed":
            return int(raw)
        default = (_TRAIN_KEYS.get(key) or _NET_KEYS.get(key)).default
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {line_no}: bad value for {key}: {raw!r} ({exc})", code="BAD_VALUE") from None


def parse_config(text):
    """``key = value`` lines with ``#`` comments; returns a dict."""
    known = set(_TRAIN_KEYS) | set(_NET_KEYS) | set(_RUN_KEYS) | _PATH_KEYS | {"net_seed"}
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value", code="MALFORMED_LINE")
        key, raw = (t.strip() for t in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {no}: unknown key {key!r}", code="UNKNOWN_KEY")
        if key in out:
            raise ConfigError(f"line {no}: duplicate key {key!r}", code="DUPLICATE_KEY")
        out[key] = _convert(key, raw, no)
    return out


def format_config(values):
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = format(v, ".17g")
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def split_config(values):
    tkw = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    nkw = {k: v for k, v in values.items() if k in _NET_KEYS}
    if "net_seed" in values:
        nkw["seed"] = values["net_seed"]
    rkw = {k: v for k, v in values.items() if k in _RUN_KEYS and k != "cutoff"}
    return TrainConfig(**tkw), NetConfig(**nkw), rkw


# ------------------------------------------------------------ helpers
def parse_seeds(text):
    text = str(text).strip()
    if ".." in text:
        a, b = text.split("..", 1)
        return list(range(int(a), int(b) + 1))
    return [int(t) for t in text.replace(",", " ").split()]


def list_instances(data_dir):
    d = Path(data_dir)
    if not d.is_dir():
        raise TgppoError(f"{data_dir}: not a directory", code="NO_DATA")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in INSTANCE_SUFFIXES)
    if not files:
        raise TgppoError(f"{data_dir}: no instance files", code="NO_DATA")
    return files


def load_instances(data_dir):
    return [(p, read_instance(p)) for p in list_instances(data_dir)]


def resolve_cutoff(path, inst, spec):
    """Cutoff from ``spec``: a number, NONE, or AUTO (cached optimum)."""
    if spec is None or str(spec).upper() == "NONE":
        return None
    if str(spec).upper() != "AUTO":
        return float(spec)
    cache = Path(str(path) + ".opt") if path is not None else None
    if cache is not None and cache.exists():
        return float(cache.read_text().strip())
    value = None
    try:
        res = brute_force_solve(inst, enum_limit=1 << BRUTE_FORCE_MAX_INT)
        value = res.value if res.status == "OPTIMAL" else None
    except LimitExceeded:
        from .policies import RelpscostLikePolicy
        st = run(inst, RelpscostLikePolicy(), RunConfig(node_budget=AUTO_CUTOFF_NODES))
        value = st.primal_bound if st.status.value == "OPTIMAL" else None
    if value is None or not math.isfinite(value):
        raise TgppoError(f"{path}: no optimum available for AUTO cutoff", code="NO_OPTIMUM")
    if cache is not None:
        cache.write_text(format(float(value), ".17g") + "\n")
    return float(value)


def _run_cfg(args, extra=None):
    kw = dict(extra or {})
    if getattr(args, "budget_nodes", None) is not None:
        kw["node_budget"] = args.budget_nodes
    return RunConfig(**kw)


# ------------------------------------------------------------ commands
def cmd_generate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fam = Family(args.family.upper())
    for i in range(args.count):
        p = GeneratorParams(fam, args.rows, args.cols, args.density, (args.coef_min, args.coef_max), args.seed + i)
        name = f"{fam.value.lower()}_{args.rows}x{args.cols}_{args.seed + i:04d}"
        write_instance(generate_instance(p, name=name), out / f"{name}.mps")
    print(f"wrote {args.count} instances to {out}")
    return 0


def cmd_baseline(args):
    from .rewards import BaselineManifest, acquire_baseline
    manifest = BaselineManifest(args.out)
    count = 0
    for path, inst in load_instances(args.data):
        cutoff = resolve_cutoff(path, inst, args.cutoff)
        for s in parse_seeds(args.seeds):
            acquire_baseline(inst, s, _run_cfg(args, {"cutoff": cutoff}), manifest)
            count += 1
    print(f"baseline manifest {args.out}: {count} entries")
    return 0


def cmd_solve(args):
    inst = read_instance(args.instance)
    cutoff = resolve_cutoff(args.instance, inst, args.cutoff)
    if args.policy == "tgppo":
        from .net import load_checkpoint
        from .ppo import LearnedPolicy
        if not args.checkpoint:
            raise UsageError("solve: --policy tgppo needs --checkpoint")
        policy = LearnedPolicy(load_checkpoint(args.checkpoint)[0])
    else:
        from .policies import make_policy
        try:
            policy = make_policy(args.policy)
        except ValueError as exc:
            raise UsageError(f"solve: --policy: {exc}") from None
    cfg = _run_cfg(args, {"cutoff": cutoff, "seed": args.seed})
    log = open(args.event_log, "w", encoding="utf-8") if args.event_log else None
    try:
        st = run(inst, policy, cfg, event_log=log)
    finally:
        if log:
            log.close()
    print(f"status={st.status.value} nodes={st.nodes_explored}")
    print(f"decisions={st.decisions} pdi={st.pdi:.17g} primal={st.primal_bound:.17g} dual={st.dual_bound:.17g}")
    return 0


def _load_config(path):
    if not path:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"--config: {exc}") from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_train(args):
    from .net import init_params, save_checkpoint
    from .ppo import train
    from .rewards import BaselineManifest
    values = _load_config(args.config)
    tcfg, ncfg, rkw = split_config(values)
    if args.episodes is not None:
        tcfg.episodes = args.episodes
    if args.seed is not None:
        tcfg.seed = args.seed
    insts = load_instances(args.data)
    cut_spec = values.get("cutoff", args.cutoff)
    run_cfg = _run_cfg(args, rkw)
    cutoffs = {inst.name: resolve_cutoff(p, inst, cut_spec) for p, inst in insts}
    manifest = BaselineManifest(args.manifest or values.get("manifest"))
    log_path = args.log or values.get("log") or f"{args.out}.train.csv"
    net = init_params(ncfg)
    if tcfg.episodes > 0:
        net, _ = train([i for _, i in insts], tcfg, ncfg, run_cfg, cutoffs, manifest, log_path,
                       values.get("checkpoint_dir"), net=net)
    else:
        from .ppo import LOG_HEADER
        Path(log_path).write_text(",".join(LOG_HEADER) + "\n", encoding="utf-8")
    save_checkpoint(args.out, net, {"episodes": tcfg.episodes})
    print(f"checkpoint {args.out}; log {log_path}")
    return 0


def cmd_tune(args):
    from .evaluation import SEARCH_SPACE, nested_cv_tune
    from .net import NetConfig as NC
    from .ppo import LearnedPolicy, TrainConfig, train
    from .rewards import BaselineManifest, acquire_baseline
    insts = load_instances(args.data)
    seeds = parse_seeds(args.seeds)
    run_cfg = _run_cfg(args)
    cutoffs = {inst.name: resolve_cutoff(p, inst, args.cutoff) for p, inst in insts}
    manifest = BaselineManifest(args.manifest)
    items, diff = [], []
    for _, inst in insts:
        for s in seeds:
            cfg = RunConfig(**{**run_cfg.__dict__, "cutoff": cutoffs[inst.name], "seed": s})
            diff.append(acquire_baseline(inst, s, cfg, manifest).baseline_nodes)
            items.append((inst, s))

    def train_fn(c, pairs, step):
        net_keys = {"d_h", "n_layers", "n_heads", "dropout"}
        tc = TrainConfig(**{k: v for k, v in c.items() if k in SEARCH_SPACE and k not in net_keys},
                         episodes=args.episodes_per_trial, horizon=max(512, c["minibatch"]), seed=args.seed)
        nc = NC(**{k: c[k] for k in net_keys}, seed=args.seed)
        net, _ = train([], tc, nc, run_cfg, cutoffs, manifest, net=c.get("_model"), pairs=pairs)
        return net

    def eval_fn(net, pairs):
        nodes, pdis = [], []
        for inst, s in pairs:
            cfg = RunConfig(**{**run_cfg.__dict__, "cutoff": cutoffs[inst.name], "seed": s})
            st = run(inst, LearnedPolicy(net), cfg)
            pdis.append(st.pdi)
            if st.status.value == "OPTIMAL":
                nodes.append(st.nodes_explored)
        return nodes, pdis

    best, records, outer = nested_cv_tune(items, diff, train_fn, eval_fn, args.trials, args.outer, args.inner,
                                          seed=args.seed)
    values = dict(best)
    values["net_seed"] = args.seed
    Path(args.out).write_text(format_config(values), encoding="utf-8")
    for r in outer:
        print(f"outer fold {r['fold']}: trial {r['trial']} composite {r['score']:.6g}")
    print(f"best config written to {args.out}")
    return 0


def cmd_eval(args):
    from .evaluation import evaluate, write_results
    from .policies import BASELINES
    insts = load_instances(args.data)
    if args.baselines in ("all", ""):
        names = list(BASELINES)
    elif args.baselines == "none":
        names = []
    else:
        names = [n.strip().lower() for n in args.baselines.split(",")]
        bad = [n for n in names if n not in BASELINES]
        if bad:
            raise UsageError(f"eval: --baselines: unknown {bad}; choose from {sorted(BASELINES)}")
    if args.checkpoint:
        names = ["tgppo"] + names
    if not names:
        raise UsageError("eval: nothing to evaluate (no checkpoint and no baselines)")
    cutoffs = {inst.name: resolve_cutoff(p, inst, args.cutoff) for p, inst in insts}
    rows = evaluate([i for _, i in insts], names, parse_seeds(args.seeds), _run_cfg(args), cutoffs,
                    args.checkpoint, workers=args.workers)
    write_results(args.out, rows)
    print(f"wrote {len(rows)} result rows to {args.out}")
    return 0


def cmd_report(args):
    from .evaluation import read_results, write_report
    rows = read_results(args.results)
    text = write_report(rows, args.out, focus=args.focus)
    print(text)
    return 0


def build_parser():
    p = _Parser(prog="tgppo", description="Learning-to-branch toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write synthetic instances")
    g.add_argument("--family", required=True, choices=[f.value for f in Family] + [f.value.lower() for f in Family])
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--density", type=float, default=0.3)
    g.add_argument("--coef-min", type=int, default=1)
    g.add_argument("--coef-max", type=int, default=10)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("baseline", help="baseline statistics manifest")
    b.add_argument("--data", required=True)
    b.add_argument("--seeds", default="0..4")
    b.add_argument("--budget-nodes", type=int, default=5000)
    b.add_argument("--cutoff", default="AUTO")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("solve", help="solve one instance with one policy")
    s.add_argument("--instance", required=True)
    s.add_argument("--policy", default="relpscost")
    s.add_argument("--checkpoint")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cutoff", default="NONE")
    s.add_argument("--budget-nodes", type=int)
    s.add_argument("--event-log")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="train a policy with PPO")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--budget-nodes", type=int, default=5000)
    t.add_argument("--cutoff", default="AUTO")
    t.add_argument("--manifest")
    t.add_argument("--log")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="nested cross-validated random search")
    u.add_argument("--data", required=True)
    u.add_argument("--trials", type=int, default=10)
    u.add_argument("--outer", type=int, default=5)
    u.add_argument("--inner", type=int, default=2)
    u.add_argument("--seeds", default="0..4")
    u.add_argument("--episodes-per-trial", type=int, default=20)
    u.add_argument("--budget-nodes", type=int, default=5000)
    u.add_argument("--cutoff", default="AUTO")
    u.add_argument("--manifest")
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_tune)

    e = sub.add_parser("eval", help="evaluate policies on a data set")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--baselines", default="all")
    e.add_argument("--seeds", default="0..4")
    e.add_argument("--budget-nodes", type=int, default=5000)
    e.add_argument("--cutoff", default="AUTO")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="markdown report from a results CSV")
    r.add_argument("--results", required=True)
    r.add_argument("--focus", default="tgppo")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TgppoError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        code = "IO_ERROR" if isinstance(exc, OSError) else "BAD_VALUE"
        print(f"error: {code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
