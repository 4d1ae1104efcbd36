"""Feature extraction from a live branch-and-bound solver.

Three blocks are produced at every branching decision:

* candidate matrix, one 25-wide row per fractional candidate,
* node vector (8) for the node awaiting a decision,
* tree vector (53) summarising the search so far, in groups
  A bounds/gap (6), B tree shape (10), C frontier bounds (8),
  D pseudocosts (12), E branching history (9), F LP stats (5), G progress (3).

Every non-finite intermediate is mapped to 0 and all outputs are clamped to
[-5, 5]. ``CANDIDATE_SCHEMA``, ``NODE_SCHEMA`` and ``TREE_SCHEMA`` give the
name and formula of each entry; ``SCHEMA_VERSION`` is written into
checkpoints.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import FeatureError

SCHEMA_VERSION = 1
N_CAND = 25
N_NODE = 8
N_TREE = 53
CLAMP = 5.0
TREE_GROUPS = {"A": 6, "B": 10, "C": 8, "D": 12, "E": 9, "F": 5, "G": 3}

_LOG_MILLION = math.log1p(1e6)
_EPS = 1e-10

CANDIDATE_SCHEMA = [
    ("frac_distance", "min(f, 1-f)"),
    ("frac", "f = x - floor(x)"),
    ("one_minus_frac", "1 - f"),
    ("obj_scaled", "c_j / max|c| (0 if c = 0)"),
    ("obj_sign", "sign(c_j)"),
    ("pc_up_ratio", "psi_up_j / mean psi_up, capped at 5"),
    ("pc_down_ratio", "psi_down_j / mean psi_down, capped at 5"),
    ("product_score", "(psi_down f)(psi_up (1-f)) / max over candidates"),
    ("up_count", "min(up count, 10) / 10"),
    ("down_count", "min(down count, 10) / 10"),
    ("col_density", "nnz(column) / rows"),
    ("range", "min(u - l, 100) / 100 (1 if infinite)"),
    ("slack_lower", "(x - l) / (u - l) clipped, 0.5 if infinite range"),
    ("slack_upper", "(u - x) / (u - l) clipped, 0.5 if infinite range"),
    ("floor_at_lower", "[floor(x) = l]"),
    ("ceil_at_upper", "[ceil(x) = u]"),
    ("coef_ratio_mean", "mean over column rows of |a_ij| / max_k |a_ik|"),
    ("coef_ratio_max", "max over column rows of |a_ij| / max_k |a_ik|"),
    ("path_branch_rate", "times branched on path / (depth + 1)"),
    ("int_distance", "|x - round(x)|"),
    ("up_score", "psi_up (1-f) / max over candidates"),
    ("down_score", "psi_down f / max over candidates"),
    ("is_binary", "[integer with bounds 0..1]"),
    ("is_basic", "[LP basis status is BASIC]"),
    ("frac_rank", "rank by min(f,1-f), most fractional first, / (|C| - 1)"),
]

NODE_SCHEMA = [
    ("depth", "depth / (1 + max depth)"),
    ("bound_position", "(node bound - dual) / (primal - dual + 1e-10), in [0,1]"),
    ("candidate_share", "|C| / |I|"),
    ("bound_vs_root", "tanh((node bound - root bound) / (|root bound| + 1))"),
    ("child_side", "LEFT 0, RIGHT 1, ROOT 0.5"),
    ("plunge", "plunge depth / (depth + 1)"),
    ("fixed_share", "integer vars with l = u / |I|"),
    ("mean_frac_distance", "mean min(f, 1-f) over candidates"),
]

TREE_SCHEMA = [
    ("A.gap", "relative gap"),
    ("A.primal", "tanh(primal / (1 + |primal|))"),
    ("A.dual", "tanh(dual / (1 + |dual|))"),
    ("A.gap_change", "gap now - gap at previous decision (0 at first)"),
    ("A.best_depth", "depth of best-bound node / max depth"),
    ("A.tau", "budget fraction"),
    ("B.explored", "ln(1 + explored) / ln(1 + 1e6), capped at 1"),
    ("B.open_share", "open / (open + explored)"),
    ("B.max_depth", "min(max depth / 64, 1)"),
    ("B.open_depth_mean", "mean open depth / max depth"),
    ("B.open_depth_std", "std open depth / max depth"),
    ("B.pruned_bound", "pruned by bound / explored"),
    ("B.pruned_infeasible", "infeasible / explored"),
    ("B.fathomed_integral", "integral / explored"),
    ("B.near_dual", "open nodes with bound - dual <= 0.01 max(1,|dual|), share"),
    ("B.current_depth", "current depth / max depth"),
    ("C.min", "min normalised open bound"),
    ("C.mean", "mean normalised open bound"),
    ("C.max", "max normalised open bound"),
    ("C.std", "std normalised open bound"),
    ("C.q25", "0.25 quantile"),
    ("C.q75", "0.75 quantile"),
    ("C.last_selected", "last selected node bound, normalised"),
    ("C.open_log", "ln(1 + open) / ln(1 + 1e6)"),
    ("D.up_mean", "mean psi_up over initialised vars"),
    ("D.up_std", "std psi_up"),
    ("D.up_max", "max psi_up"),
    ("D.down_mean", "mean psi_down over initialised vars"),
    ("D.down_std", "std psi_down"),
    ("D.down_max", "max psi_down"),
    ("D.reliable_up", "integer vars with up count >= 8, share"),
    ("D.reliable_down", "integer vars with down count >= 8, share"),
    ("D.reliability", "mean min(up, down, 10) / 10 over integer vars"),
    ("D.uninitialised", "integer vars without any observation, share"),
    ("D.score_mean", "mean product score over candidates"),
    ("D.score_max", "max product score over candidates"),
    ("E.depth_0_5", "decisions at depth [0,5) / decisions"),
    ("E.depth_5_15", "decisions at depth [5,15) / decisions"),
    ("E.depth_15", "decisions at depth >= 15 / decisions"),
    ("E.gain_mean", "tanh(mean realised child gain)"),
    ("E.gain_std", "tanh(std realised child gain)"),
    ("E.both_fathomed", "decisions with both children closed, share"),
    ("E.path_repeat", "(path branchings - distinct path vars) / path branchings"),
    ("E.var_entropy", "entropy of branched-variable histogram / ln |I|"),
    ("E.last_log_ratio", "tanh(ln((down gain + 1e-6) / (up gain + 1e-6)))"),
    ("F.iters_mean", "simplex iterations per node / 1000"),
    ("F.iters_last", "current node iterations / 1000"),
    ("F.child_infeasible", "infeasible child LPs / child LPs"),
    ("F.child_change", "tanh(mean parent-to-child bound change)"),
    ("F.limit_hits", "LPs hitting the iteration guard / LPs"),
    ("G.decisions", "decisions / decision budget"),
    ("G.pdi", "tanh(PDI / (baseline PDI + 1e-10))"),
    ("G.primal_finite", "[primal bound finite]"),
]

assert len(CANDIDATE_SCHEMA) == N_CAND and len(NODE_SCHEMA) == N_NODE
assert len(TREE_SCHEMA) == N_TREE == sum(TREE_GROUPS.values())


def schema_document():
    """Plain-text reference table: block, index, name, formula."""
    lines = [f"feature schema version {SCHEMA_VERSION}"]
    for block, rows in (("candidate", CANDIDATE_SCHEMA), ("node", NODE_SCHEMA), ("tree", TREE_SCHEMA)):
        for i, (name, formula) in enumerate(rows, 1):
            lines.append(f"{block}\t{i}\t{name}\t{formula}")
    return "\n".join(lines) + "\n"


@dataclass
class StateFeatures:
    candidates: np.ndarray   # (L, 25), rows past the real candidates are zero
    node: np.ndarray         # (8,)
    tree: np.ndarray         # (53,)
    pad_mask: np.ndarray     # (L,) True on padded slots
    candidate_var_ids: list

    @property
    def num_candidates(self):
        return int((~self.pad_mask).sum())


def sanitize(x):
    x = np.nan_to_num(np.asarray(x, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    return np.clip(x, -CLAMP, CLAMP)


def _ratio(num, den):
    return num / den if den else 0.0


def _normalise(bounds, primal, dual):
    with np.errstate(invalid="ignore", divide="ignore"):
        v = (np.asarray(bounds, dtype=np.float64) - dual) / (primal - dual + _EPS)
    return np.clip(np.nan_to_num(v, nan=0.0, posinf=1.0, neginf=0.0), 0.0, 1.0)


def _column_stats(ctx):
    """Per-column density and coefficient ratios; cached on the solver."""
    cached = getattr(ctx, "_feature_column_stats", None)
    if cached is not None:
        return cached
    A = np.abs(ctx.A)
    m = A.shape[0]
    nz = A > 0
    density = nz.sum(axis=0) / m if m else np.zeros(A.shape[1])
    row_max = A.max(axis=1, keepdims=True) if A.shape[1] else np.zeros((m, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(nz, A / np.where(row_max > 0, row_max, 1.0), 0.0)
    cnt = nz.sum(axis=0)
    mean = np.where(cnt > 0, ratio.sum(axis=0) / np.maximum(cnt, 1), 0.0)
    mx = ratio.max(axis=0) if m else np.zeros(A.shape[1])
    c = ctx.c
    cmax = np.abs(c).max() if c.size else 0.0
    obj = c / cmax if cmax > 0 else np.zeros_like(c)
    inst = ctx.inst
    binary = inst.is_integer & (inst.lower == 0) & (inst.upper == 1)
    out = (density, mean, mx, obj, binary)
    ctx._feature_column_stats = out
    return out


def candidate_features(ctx):
    node = ctx.current
    cands = np.asarray(ctx.candidates, dtype=np.int64)
    if node is None or cands.size == 0:
        raise FeatureError("branching requested with no fractional candidate", code="EMPTY_CANDIDATES")
    k = cands.size
    x = node.lp_solution[cands]
    f = x - np.floor(x)
    dist = np.minimum(f, 1 - f)
    lo, up = node.lower[cands], node.upper[cands]
    density, coef_mean, coef_max, obj, binary = _column_stats(ctx)
    pc = ctx.pseudocosts
    psi_up, psi_down = pc.up_means()[cands], pc.down_means()[cands]
    g_up, g_down = pc.global_up_mean(), pc.global_down_mean()
    up_ratio = np.minimum(psi_up / g_up, 5.0) if g_up > 0 else np.zeros(k)
    down_ratio = np.minimum(psi_down / g_down, 5.0) if g_down > 0 else np.zeros(k)
    prod = pc.product_scores(cands, f)
    up_score = psi_up * (1 - f)
    down_score = psi_down * f
    rng = up - lo
    finite = np.isfinite(rng)
    with np.errstate(invalid="ignore", divide="ignore"):
        to_lo = np.where(finite, np.clip((x - lo) / rng, 0, 1), 0.5)
        to_up = np.where(finite, np.clip((up - x) / rng, 0, 1), 0.5)
    path = ctx.path_branch_counts(node)
    on_path = np.array([path.get(int(v), 0) for v in cands], dtype=np.float64)
    basic = np.array([node.basis is not None and node.basis[v].value == "BASIC" for v in cands], dtype=np.float64)
    order = np.argsort(-dist, kind="stable")
    rank = np.empty(k)
    rank[order] = np.arange(k)

    def by_max(v):
        m = v.max()
        return v / m if m > 0 else np.zeros(k)

    cols = [
        dist, f, 1 - f, obj[cands], np.sign(ctx.c[cands]), up_ratio, down_ratio, by_max(prod),
        np.minimum(pc.up_count[cands], 10) / 10, np.minimum(pc.down_count[cands], 10) / 10,
        density[cands], np.where(finite, np.minimum(rng, 100) / 100, 1.0), to_lo, to_up,
        (np.floor(x) == lo).astype(float), (np.ceil(x) == up).astype(float),
        coef_mean[cands], coef_max[cands], on_path / (node.depth + 1), np.abs(x - np.round(x)),
        by_max(up_score), by_max(down_score), binary[cands].astype(float), basic,
        rank / (k - 1) if k > 1 else np.zeros(k),
    ]
    return sanitize(np.column_stack(cols))


def node_features(ctx):
    node = ctx.current
    cands = np.asarray(ctx.candidates, dtype=np.int64)
    n_int = len(ctx.int_vars)
    primal, dual = ctx.primal_bound, ctx.dual_bound()
    x = node.lp_solution[cands] if cands.size else np.zeros(0)
    f = x - np.floor(x)
    side = {"LEFT": 0.0, "RIGHT": 1.0, "ROOT": 0.5}[node.child_side.value]
    fixed = np.sum(node.lower[ctx.int_vars] == node.upper[ctx.int_vars])
    root = ctx.root_bound
    v = [
        node.depth / (1 + ctx.stats.max_depth),
        float(_normalise([node.lp_bound], primal, dual)[0]),
        _ratio(cands.size, n_int),
        math.tanh((node.lp_bound - root) / (abs(root) + 1)) if math.isfinite(root) else 0.0,
        side,
        ctx.plunge_depth / (node.depth + 1),
        _ratio(fixed, n_int),
        float(np.mean(np.minimum(f, 1 - f))) if cands.size else 0.0,
    ]
    return sanitize(v)


def _safe_tanh_scaled(v):
    return math.tanh(v / (1 + abs(v))) if math.isfinite(v) else 0.0


def tree_features(ctx):
    st = ctx.stats
    primal, dual = ctx.primal_bound, ctx.dual_bound()
    front = ctx.frontier()
    n_open = len(front)
    explored = st.nodes_explored
    max_depth = st.max_depth
    depths = np.array([nd.depth for nd in front], dtype=np.float64)
    bounds = np.array([nd.lp_bound for nd in front], dtype=np.float64)
    cur = ctx.current
    tl = st.gap_timeline

    # A
    best = front[int(np.argmin(bounds))] if n_open else None
    A = [
        ctx.gap(),
        _safe_tanh_scaled(primal),
        _safe_tanh_scaled(dual),
        tl[-1][1] - tl[-2][1] if len(tl) >= 2 else 0.0,
        _ratio(best.depth, max_depth) if best is not None else 0.0,
        ctx.budget_fraction(),
    ]

    # B
    near = 0.01 * max(1.0, abs(dual)) if math.isfinite(dual) else 0.0
    B = [
        min(1.0, math.log1p(explored) / _LOG_MILLION),
        _ratio(n_open, n_open + explored),
        min(max_depth / 64, 1.0),
        _ratio(depths.mean(), max_depth) if n_open else 0.0,
        _ratio(depths.std(), max_depth) if n_open else 0.0,
        _ratio(ctx.count_pruned_bound, explored),
        _ratio(ctx.count_infeasible, explored),
        _ratio(ctx.count_integral, explored),
        float(np.mean(bounds - dual <= near)) if n_open else 0.0,
        _ratio(cur.depth, max_depth) if cur is not None else 0.0,
    ]

    # C
    if n_open:
        nb = _normalise(bounds, primal, dual)
        last = ctx.last_selected_bound
        C = [nb.min(), nb.mean(), nb.max(), nb.std(),
             np.quantile(nb, 0.25), np.quantile(nb, 0.75),
             float(_normalise([last], primal, dual)[0]) if last is not None else 0.5,
             math.log1p(n_open) / _LOG_MILLION]
    else:
        C = [0.5] * 8

    # D
    pc = ctx.pseudocosts
    iv = ctx.int_vars
    up_init = pc.up_count > 0
    dn_init = pc.down_count > 0
    ups = pc.up_sum[up_init] / pc.up_count[up_init]
    dns = pc.down_sum[dn_init] / pc.down_count[dn_init]

    def agg(v):
        return [v.mean(), v.std(), v.max()] if v.size else [0.0, 0.0, 0.0]

    cands = np.asarray(ctx.candidates, dtype=np.int64)
    if cands.size and cur is not None:
        x = cur.lp_solution[cands]
        ps = pc.product_scores(cands, x - np.floor(x))
        score = [ps.mean(), ps.max()]
    else:
        score = [0.0, 0.0]
    reliab = np.minimum(np.minimum(pc.up_count[iv], pc.down_count[iv]), 10) / 10
    D = agg(ups) + agg(dns) + [
        float(np.mean(pc.up_count[iv] >= 8)) if iv.size else 0.0,
        float(np.mean(pc.down_count[iv] >= 8)) if iv.size else 0.0,
        float(reliab.mean()) if iv.size else 0.0,
        float(np.mean((pc.up_count[iv] == 0) & (pc.down_count[iv] == 0))) if iv.size else 0.0,
    ] + score

    # E
    hist = ctx.branch_history
    nd = len(hist)
    if nd:
        dd = np.array([h.depth for h in hist])
        buckets = [np.sum(dd < 5) / nd, np.sum((dd >= 5) & (dd < 15)) / nd, np.sum(dd >= 15) / nd]
        gains = np.asarray(ctx.realized_gains, dtype=np.float64)
        g_mean = math.tanh(gains.mean()) if gains.size else 0.0
        g_std = math.tanh(gains.std()) if gains.size else 0.0
        both = sum(h.both_fathomed for h in hist) / nd
        counts = ctx.branch_var_counts[ctx.branch_var_counts > 0].astype(np.float64)
        p = counts / counts.sum()
        ent = float(-(p * np.log(p)).sum())
        ent = ent / math.log(len(iv)) if len(iv) > 1 else 0.0
        last = hist[-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            lr = float(np.tanh(np.log((last.down_gain + 1e-6) / (last.up_gain + 1e-6))))
    else:
        buckets, g_mean, g_std, both, ent, lr = [0.0, 0.0, 0.0], 0.0, 0.0, 0.0, 0.0, 0.0
    if cur is not None:
        path = ctx.path_branch_counts(cur)
        total = sum(path.values())
        repeat = _ratio(total - len(path), total)
    else:
        repeat = 0.0
    E = buckets + [g_mean, g_std, both, repeat, ent, lr]

    # F
    feasible_children = ctx.child_lps - ctx.child_infeasible
    F = [
        _ratio(st.lp_iterations, ctx.node_lps) / 1000,
        (cur.lp_iterations / 1000) if cur is not None else 0.0,
        _ratio(ctx.child_infeasible, ctx.child_lps),
        math.tanh(_ratio(ctx.child_bound_change_sum, feasible_children)),
        _ratio(ctx.lp_limit_hits, ctx.node_lps + ctx.strong_lps),
    ]

    # G
    cfg = ctx.cfg
    G = [
        st.decisions / cfg.effective_decision_budget(),
        math.tanh(st.pdi / (cfg.pdi_reference + _EPS)),
        1.0 if math.isfinite(primal) else 0.0,
    ]
    out = A + B + C + D + E + F + G
    assert len(out) == N_TREE
    return sanitize(np.array(out, dtype=np.float64))


def extract_state(ctx, pad_to=None) -> StateFeatures:
    """Features for the decision pending at ``ctx.current``."""
    cand = candidate_features(ctx)
    k = cand.shape[0]
    width = k if pad_to is None else int(pad_to)
    if width < k:
        raise ValueError(f"pad width {width} below candidate count {k}")
    padded = np.zeros((width, N_CAND))
    padded[:k] = cand
    mask = np.ones(width, dtype=bool)
    mask[:k] = False
    return StateFeatures(padded, node_features(ctx), tree_features(ctx), mask, list(ctx.candidates))


def collate(states, width=None):
    """Stack states into batch arrays padded to a common candidate width.

    Returns (candidates (B,L,25), node (B,8), tree (B,53), pad_mask (B,L)).
    """
    width = width or max(s.num_candidates for s in states)
    B = len(states)
    cand = np.zeros((B, width, N_CAND))
    mask = np.ones((B, width), dtype=bool)
    for i, s in enumerate(states):
        k = s.num_candidates
        if k > width:
            raise ValueError("state wider than batch width")
        cand[i, :k] = s.candidates[:k]
        mask[i, :k] = False
    node = np.stack([s.node for s in states])
    tree = np.stack([s.tree for s in states])
    return cand, node, tree, mask
