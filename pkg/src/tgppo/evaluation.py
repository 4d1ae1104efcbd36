"""Benchmark metrics, significance tests, nested-CV tuning and reports."""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import MetricError

NODE_SHIFT = 100.0
PDI_SHIFT = 0.0
PDI_FLOOR = 1e-9
WILCOXON_MIN_PAIRS = 5
WILCOXON_EXACT_MAX = 12
RESULT_HEADER = ["instance", "seed", "policy", "nodes", "pdi", "status", "clock"]


@dataclass
class ResultRow:
    instance: str
    seed: int
    policy: str
    nodes: int
    pdi: float
    status: str
    clock: float

    @property
    def completed(self):
        return self.status == "OPTIMAL"


# ------------------------------------------------------------------ SGM
def sgm(values, shift=NODE_SHIFT, floor=None):
    """exp(mean(ln(x + shift))) - shift, with optional flooring of x + shift."""
    x = np.asarray(list(values), dtype=np.float64)
    if x.size == 0:
        raise MetricError("sgm of an empty sequence", code="EMPTY_INPUT")
    shifted = x + shift
    if floor is not None:
        shifted = np.maximum(shifted, floor)
    if np.any(shifted <= 0):
        raise MetricError("sgm needs x + shift > 0", code="NONPOSITIVE_SHIFTED")
    out = float(np.exp(np.mean(np.log(shifted))) - shift)
    # keep the result inside [min, max] despite rounding
    lo, hi = float(x.min()), float(x.max())
    if floor is not None:
        lo, hi = max(lo, floor - shift), max(hi, floor - shift)
    return min(max(out, lo), hi)


def sgm_nodes(values):
    return sgm(values, NODE_SHIFT)


def sgm_pdi(values):
    return sgm(values, PDI_SHIFT, floor=PDI_FLOOR)


def composite_score(node_values, pdi_values, pdi_shift=PDI_SHIFT):
    """0.6 SGM(nodes, 100) + 0.4 SGM(PDI); PDI-only when no run completed."""
    pdi = sgm(pdi_values, pdi_shift, floor=PDI_FLOOR if pdi_shift == 0 else None)
    node_values = list(node_values)
    if not node_values:
        return pdi
    return 0.6 * sgm_nodes(node_values) + 0.4 * pdi


# ------------------------------------------------------------- win rates
def _grid(rows):
    return {(r.instance, int(r.seed)): r for r in rows}


def per_instance_sgm(rows, metric):
    by_inst = {}
    for r in rows:
        by_inst.setdefault(r.instance, []).append(r)
    fn = sgm_nodes if metric == "nodes" else sgm_pdi
    return {k: fn([getattr(r, metric) for r in v]) for k, v in by_inst.items()}


def win_rate(rows_a, rows_b, metric="nodes"):
    """Fraction of instances where A's per-instance SGM is strictly smaller.

    ``metric`` is "nodes", "pdi" or "auto" (nodes when every run of both
    policies on the instance completed, PDI otherwise). Returns
    (fraction, table) with table rows (instance, metric, sgm_a, sgm_b, win).
    """
    ga, gb = _grid(rows_a), _grid(rows_b)
    if set(ga) != set(gb) or len(ga) != len(rows_a) or len(gb) != len(rows_b):
        raise MetricError("result grids differ between policies", code="GRID_MISMATCH")
    if not ga:
        raise MetricError("no results to compare", code="EMPTY_INPUT")
    instances = sorted({k[0] for k in ga})
    table = []
    for inst in instances:
        ra = [ga[k] for k in sorted(ga) if k[0] == inst]
        rb = [gb[k] for k in sorted(gb) if k[0] == inst]
        m = metric
        if m == "auto":
            m = "nodes" if all(r.completed for r in ra + rb) else "pdi"
        fn = sgm_nodes if m == "nodes" else sgm_pdi
        sa, sb = fn([getattr(r, m) for r in ra]), fn([getattr(r, m) for r in rb])
        table.append((inst, m, sa, sb, sa < sb))
    return sum(t[4] for t in table) / len(table), table


# ----------------------------------------------------------------- tests
def average_ranks(values):
    """Within-row ranks (1 = smallest), ties averaged; values n x k."""
    return stats.rankdata(np.asarray(values, dtype=np.float64), axis=1)


def friedman(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.ndim != 2 or ranks.shape[0] < 2 or ranks.shape[1] < 2:
        raise MetricError("Friedman test needs at least 2 instances and 2 policies", code="DEGENERATE")
    n, k = ranks.shape
    R = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * float(np.sum(R ** 2)) - 3.0 * n * (k + 1)
    chi2 = max(chi2, 0.0)
    df = k - 1
    p = float(special.gammaincc(df / 2.0, chi2 / 2.0))
    return {"chi2": chi2, "df": df, "p": p, "mean_ranks": (R / n).tolist()}


def format_p(p):
    """Compact scientific notation, e.g. 1.82e-4."""
    if p == 0:
        return "0"
    mant, exp = f"{p:.2e}".split("e")
    return f"{mant}e{int(exp)}"


def format_friedman(res):
    return f"{res['chi2']:.3f} ({res['df']}), {format_p(res['p'])}"


def _signed_rank_distribution(doubled_ranks):
    """Counts of 2*W+ over all sign patterns (ranks doubled to stay integral)."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(diffs, alternative="less", exact=None):
    """One-sided signed-rank test on paired differences (zeros dropped).

    ``alternative="less"`` tests whether differences tend to be negative.
    Exact enumeration is used for n <= 12 unless ``exact`` says otherwise;
    larger samples use the normal approximation with continuity correction.
    """
    d = np.asarray(list(diffs), dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n < WILCOXON_MIN_PAIRS:
        raise MetricError(f"{n} non-zero pairs, need {WILCOXON_MIN_PAIRS}", code="TOO_FEW_PAIRS")
    alternative = alternative.lower()
    if alternative not in ("less", "greater"):
        raise ValueError("alternative must be 'less' or 'greater'")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    use_exact = n <= WILCOXON_EXACT_MAX if exact is None else exact
    if use_exact:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _signed_rank_distribution(doubled)
        w2 = int(round(2 * w_plus))
        tail = counts[:w2 + 1].sum() if alternative == "less" else counts[w2:].sum()
        p = float(tail) / float(2 ** n)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, t = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(t ** 3 - t)) / 48.0
        if alternative == "less":
            z = (w_plus - mean + 0.5) / math.sqrt(var)
            p = float(stats.norm.cdf(z))
        else:
            z = (w_plus - mean - 0.5) / math.sqrt(var)
            p = float(stats.norm.sf(z))
        method = "normal"
    return {"W": w_plus, "p": min(1.0, p), "n": n, "method": method}


# ---------------------------------------------------------------- tuning
SEARCH_SPACE = {
    "d_h": [64, 128, 256, 384],
    "n_layers": [2, 3, 4, 5, 6],
    "n_heads": [2, 4, 8],
    "dropout": (0.0, 0.3),
    "actor_lr": (1e-6, 3e-4, "log"),
    "critic_lr": (1e-6, 3e-4, "log"),
    "clip_eps": (0.05, 0.3),
    "entropy_coef": (1e-5, 1e-2, "log"),
    "gamma": (0.92, 0.999),
    "gae_lambda": (0.8, 0.99),
    "minibatch": [32, 64, 128, 256, 512],
    "epochs": [1, 2, 3, 4, 5, 6],
    "reward_signal": ["H1", "H2", "H3"],
}


def sample_config(rng, space=SEARCH_SPACE):
    """Uniform draw (log-uniform where marked) from the search space."""
    cfg = {}
    for key, spec in space.items():
        if isinstance(spec, list):
            cfg[key] = spec[int(rng.integers(len(spec)))]
        elif len(spec) == 3 and spec[2] == "log":
            cfg[key] = float(math.exp(rng.uniform(math.log(spec[0]), math.log(spec[1]))))
        else:
            cfg[key] = float(rng.uniform(spec[0], spec[1]))
    return cfg


def in_space(cfg, space=SEARCH_SPACE):
    for key, spec in space.items():
        v = cfg[key]
        if isinstance(spec, list):
            if v not in spec:
                return False
        elif not spec[0] <= v <= spec[1]:
            return False
    return True


class MedianPruner:
    """Stops a trial whose running score is worse than the median of earlier
    trials at the same step for ``patience`` consecutive steps."""

    def __init__(self, patience=3, min_trials=1):
        self.patience = patience
        self.min_trials = min_trials
        self.history = {}   # trial -> {step: value}
        self.fails = {}

    def report(self, trial, step, value):
        """Record a running score; returns True when the trial should stop."""
        others = [h[step] for t, h in self.history.items() if t != trial and step in h]
        self.history.setdefault(trial, {})[step] = value
        if len(others) < self.min_trials:
            self.fails[trial] = 0
            return False
        if value > float(np.median(others)):
            self.fails[trial] = self.fails.get(trial, 0) + 1
        else:
            self.fails[trial] = 0
        return self.fails[trial] >= self.patience


def difficulty_quartiles(difficulty):
    """Quartile bin 0..3 of each item by rank of its baseline node count."""
    d = np.asarray(difficulty, dtype=np.float64)
    order = np.argsort(d, kind="stable")
    bins = np.empty(d.size, dtype=np.int64)
    bins[order] = (4 * np.arange(d.size)) // max(d.size, 1)
    return bins


def stratified_folds(difficulty, k, seed=0):
    """Split item indices into ``k`` folds with matching quartile mixes."""
    n = len(difficulty)
    if n < k:
        raise MetricError(f"{n} items cannot fill {k} folds", code="INSUFFICIENT_DATA")
    rng = np.random.default_rng(seed)
    bins = difficulty_quartiles(difficulty)
    folds = [[] for _ in range(k)]
    slot = 0
    for b in range(4):
        members = np.flatnonzero(bins == b)
        for i in rng.permutation(members):
            folds[slot % k].append(int(i))
            slot += 1
    return [sorted(f) for f in folds]


@dataclass
class TrialRecord:
    trial: int
    config: dict
    inner_scores: list = field(default_factory=list)
    pruned: bool = False
    outer_fold: int = 0

    @property
    def score(self):
        return float(np.mean(self.inner_scores)) if self.inner_scores else math.inf


def nested_cv_tune(items, difficulty, train_fn, eval_fn, budget, outer=5, inner=2, seed=0,
                   steps_per_fold=1, space=SEARCH_SPACE):
    """Random-search hyper-parameter selection with nested cross-validation.

    ``train_fn(config, train_items, step)`` returns a model trained for one
    more chunk (``step`` counts chunks within an inner fold, starting at 0,
    and the previous model is passed back through ``config["_model"]``);
    ``eval_fn(model, items)`` returns (completed node counts, all PDIs).

    Returns (best config, trial records, outer scores per fold).
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    n = len(items)
    if n < outer * inner:
        raise MetricError(f"{n} items too few for {outer}x{inner} folds", code="INSUFFICIENT_DATA")
    rng = np.random.default_rng(seed)
    configs = [sample_config(rng, space) for _ in range(budget)]
    diff = np.asarray(difficulty, dtype=np.float64)
    outer_folds = stratified_folds(diff, outer, seed)
    records, outer_results = [], []

    def fit_score(cfg, train_idx, val_idx, pruner=None, trial=None, step0=0, prior=()):
        model = None
        for s in range(steps_per_fold):
            model = train_fn({**cfg, "_model": model}, [items[i] for i in train_idx], s)
            nodes, pdis = eval_fn(model, [items[i] for i in val_idx])
            score = composite_score(nodes, pdis)
            running = float(np.mean(list(prior) + [score]))
            if pruner is not None and pruner.report(trial, step0 + s, running):
                return score, True
        return score, False

    for o, test_idx in enumerate(outer_folds):
        train_idx = [i for f, fold in enumerate(outer_folds) if f != o for i in fold]
        inner_folds = stratified_folds(diff[train_idx], inner, seed + o + 1)
        pruner = MedianPruner()
        best = None
        for t, cfg in enumerate(configs):
            rec = TrialRecord(t, cfg, outer_fold=o)
            for j, val_local in enumerate(inner_folds):
                tr_local = [i for f, fold in enumerate(inner_folds) if f != j for i in fold]
                score, pruned = fit_score(cfg, [train_idx[i] for i in tr_local],
                                          [train_idx[i] for i in val_local], pruner, t, j * steps_per_fold,
                                          rec.inner_scores)
                rec.inner_scores.append(score)
                if pruned:
                    rec.pruned = True
                    break
            records.append(rec)
            if not rec.pruned and (best is None or rec.score < best.score):
                best = rec
        if best is None:
            best = min((r for r in records if r.outer_fold == o), key=lambda r: r.score)
        outer_score, _ = fit_score(best.config, train_idx, test_idx)
        outer_results.append({"fold": o, "trial": best.trial, "score": outer_score})
    winner = min(outer_results, key=lambda r: (r["score"], r["trial"]))
    return configs[winner["trial"]], records, outer_results


# ----------------------------------------------------------- evaluation
def _fmt(x):
    return format(float(x), ".17g")


def write_results(path, rows):
    rows = sorted(rows, key=lambda r: (r.instance, r.seed, r.policy))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for r in rows:
            w.writerow([r.instance, r.seed, r.policy, r.nodes, _fmt(r.pdi), r.status, _fmt(r.clock)])


def read_results(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_HEADER:
            raise MetricError(f"{path}: unexpected header {reader.fieldnames}", code="BAD_RESULTS")
        return [ResultRow(r["instance"], int(r["seed"]), r["policy"], int(r["nodes"]), float(r["pdi"]),
                          r["status"], float(r["clock"])) for r in reader]


def run_one(inst, policy, seed, run_cfg):
    from .bnb import RunConfig, run
    cfg = RunConfig(**{**run_cfg.__dict__, "seed": int(seed)})
    st = run(inst, policy, cfg)
    return ResultRow(inst.name, int(seed), policy.name, st.nodes_explored, st.pdi, st.status.value, st.clock)


def _worker(args):
    inst, policy_name, checkpoint, seed, run_cfg = args
    return run_one(inst, make_eval_policy(policy_name, checkpoint), seed, run_cfg)


def make_eval_policy(name, checkpoint=None):
    if name == "tgppo":
        from .net import load_checkpoint
        from .ppo import LearnedPolicy
        net, _ = load_checkpoint(checkpoint)
        return LearnedPolicy(net)
    from .policies import make_policy
    return make_policy(name)


def evaluate(instances, policy_names, seeds, run_cfg, cutoffs=None, checkpoint=None, workers=1):
    """Run every (instance, policy, seed); rows come back sorted."""
    cutoffs = cutoffs or {}
    jobs = []
    for inst in instances:
        cfg = type(run_cfg)(**{**run_cfg.__dict__, "cutoff": cutoffs.get(inst.name, run_cfg.cutoff)})
        for name in policy_names:
            for s in seeds:
                jobs.append((inst, name, checkpoint, s, cfg))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_worker, jobs))
    else:
        rows = [_worker(j) for j in jobs]
    return sorted(rows, key=lambda r: (r.instance, r.seed, r.policy))


# --------------------------------------------------------------- report
def build_report(rows, focus="tgppo"):
    """Markdown report plus CSV twins (dict name -> list of rows)."""
    by_policy = {}
    for r in rows:
        by_policy.setdefault(r.policy, []).append(r)
    if focus not in by_policy:
        raise MetricError(f"no rows for policy {focus!r}", code="EMPTY_INPUT")
    others = sorted(p for p in by_policy if p != focus)
    lines = [f"# Branching evaluation: {focus}", ""]

    lines += ["## Overall shifted geometric means", "",
              "| policy | SGM Nnodes (S=100) | SGM PDI (S=0) | runs | completed |", "|---|---|---|---|---|"]
    overall = []
    for p in [focus] + others:
        rs = by_policy[p]
        sn, sp = sgm_nodes([r.nodes for r in rs]), sgm_pdi([r.pdi for r in rs])
        done = sum(r.completed for r in rs)
        overall.append([p, _fmt(sn), _fmt(sp), len(rs), done])
        lines.append(f"| {p} | {sn:.2f} | {sp:.4g} | {len(rs)} | {done} |")

    lines += ["", f"## Per-instance dominance of {focus}", "",
              "| baseline | % win (Nnodes) | % win (PDI) |", "|---|---|---|"]
    wins = []
    for p in others:
        wn, _ = win_rate(by_policy[focus], by_policy[p], "nodes")
        wp, _ = win_rate(by_policy[focus], by_policy[p], "pdi")
        wins.append([p, _fmt(100 * wn), _fmt(100 * wp)])
        lines.append(f"| {p} | {100 * wn:.1f} | {100 * wp:.1f} |")

    statrows = []
    names = [focus] + others
    insts = sorted({r.instance for r in rows})
    if len(names) >= 2 and len(insts) >= 2:
        per = {p: per_instance_sgm(by_policy[p], "nodes") for p in names}
        mat = np.array([[per[p][i] for p in names] for i in insts])
        fr = friedman(average_ranks(mat))
        lines += ["", "## Friedman test on within-instance ranks (Nnodes)", "",
                  "| chi2 (df), p |", "|---|", f"| {format_friedman(fr)} |", "",
                  "| policy | mean rank |", "|---|---|"]
        for p, mr in zip(names, fr["mean_ranks"]):
            lines.append(f"| {p} | {mr:.3f} |")
        statrows.append(["friedman", "all", _fmt(fr["chi2"]), fr["df"], _fmt(fr["p"])])
        lines += ["", f"## One-sided paired Wilcoxon ({focus} < baseline, per-instance SGM Nnodes)", "",
                  "| baseline | W+ | n | p | method |", "|---|---|---|---|---|"]
        for j, p in enumerate(others, 1):
            diffs = mat[:, 0] - mat[:, j]
            try:
                wr = wilcoxon_signed_rank(diffs, "less")
            except MetricError:
                lines.append(f"| {p} | - | {int(np.count_nonzero(diffs))} | - | too few pairs |")
                continue
            lines.append(f"| {p} | {wr['W']:.1f} | {wr['n']} | {format_p(wr['p'])} | {wr['method']} |")
            statrows.append(["wilcoxon", p, _fmt(wr["W"]), wr["n"], _fmt(wr["p"])])
    twins = {
        "overall": [["policy", "sgm_nodes", "sgm_pdi", "runs", "completed"]] + overall,
        "winrates": [["baseline", "win_nodes_pct", "win_pdi_pct"]] + wins,
        "stats": [["test", "against", "statistic", "df_or_n", "p"]] + statrows,
    }
    return "\n".join(lines) + "\n", twins


def write_report(rows, out_path, focus="tgppo"):
    text, twins = build_report(rows, focus)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    stem = os.path.splitext(out_path)[0]
    for name, table in twins.items():
        with open(f"{stem}_{name}.csv", "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(table)
    return text
