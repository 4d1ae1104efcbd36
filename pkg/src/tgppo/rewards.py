"""Instance-normalised reward signals and baseline statistics.

Three reward families are provided. Each has a per-decision step reward and
a terminal reward that depends on the final solver status:

* ``h1``: tanh penalty on nodes added per step, relative to the baseline;
* ``h2``: log-scaled node efficiency plus pace, gap and PDI shaping;
* ``h3``: the h2 components blended with weights that depend on baseline
  difficulty, plus a frontier-shrinkage progress term.

Every quantity is normalised by a baseline run of the reliability
pseudocost rule on the same instance and cutoff (``acquire_baseline``).
"""

import csv
import math
import os
from dataclasses import dataclass

from .bnb import RunConfig, RunStatus, run
from .errors import TgppoError
from .policies import RelpscostLikePolicy

SAFE_EPS = 1e-12
# tanh rounds to 1.0 for arguments above ~19; keep the h1 step inside (-1, 0]
H1_FLOOR = math.nextafter(-1.0, 0.0)
H2_BETA = 1.5
H2_RHO = 0.7
MANIFEST_HEADER = ["instance", "seed", "baseline_nodes", "gap0", "pdi0", "status"]


def tanh_s(x, s=1.0):
    return math.tanh(s * x)


def ratio_c(a, b, c):
    """min(a / max(b, 1e-12), c)"""
    return min(a / max(b, SAFE_EPS), c)


def _safe_div(a, b):
    return a / max(b, SAFE_EPS)


@dataclass
class BaselineStats:
    instance: str
    seed: int
    baseline_nodes: int
    gap0: float
    pdi0: float
    status: str = "OPTIMAL"

    def __post_init__(self):
        if self.baseline_nodes < 1 or self.pdi0 < 0 or not 0.0 <= self.gap0 <= 1.0:
            raise ValueError(f"invalid baseline stats {self}")


@dataclass
class RewardState:
    """Solver quantities before (``*_prev``) and after one decision."""

    t: int                 # decisions taken before this one (0 at the first)
    n: int                 # cumulative nodes after the decision
    dn: int                # nodes added by the decision
    gap_prev: float
    gap: float
    gap0: float            # gap at the start of the episode
    pdi_prev: float
    pdi: float
    tau: float
    open_prev: int
    open_now: int


def snapshot(solver):
    """(nodes, gap, pdi, open frontier size) of a live solver."""
    st = solver.stats
    gap = st.gap_timeline[-1][1] if st.gap_timeline else solver.gap()
    return st.nodes_explored, gap, st.pdi, len(solver.frontier())


def reward_state(t, before, after, gap0, tau):
    n0, g0, p0, o0 = before
    n1, g1, p1, o1 = after
    return RewardState(t, n1, n1 - n0, g0, g1, gap0, p0, p1, tau, o0, o1)


# ------------------------------------------------------------------ shared
def _efficiency(n, B):
    return tanh_s(1.0 - math.log1p(n) / math.log1p(B), H2_BETA) if B > 0 else 0.0


def _pace(n, tau, B):
    target = B * max(tau, 0.0) ** H2_RHO
    return tanh_s((target - n) / (target + 1.0), H2_BETA)


def _gap_step(rs):
    if rs.t == 0:
        return 0.0
    return tanh_s((rs.gap_prev - rs.gap) / (abs(rs.gap_prev) + 1e-9))


def _pdi_step(rs, bs):
    return tanh_s(_safe_div(rs.pdi_prev - rs.pdi, bs.pdi0))


def _progress(rs):
    return tanh_s((rs.open_prev - rs.open_now) / (rs.open_prev + 1.0))


def _terminal_parts(n_T, rs, bs):
    s = ratio_c(bs.baseline_nodes, n_T, 3.0)
    g_T = tanh_s(rs.gap0 - rs.gap)
    d_T = tanh_s(_safe_div(bs.pdi0 - rs.pdi, bs.pdi0))
    return s, g_T, d_T


def _status(status):
    return status.value if isinstance(status, RunStatus) else str(status)


def _clip(x):
    return max(-1.0, min(1.0, x))


# ---------------------------------------------------------------------- h1
def h1_step(rs: RewardState, bs: BaselineStats) -> float:
    return max(-tanh_s(rs.dn / (0.02 * bs.baseline_nodes + 1.0)), H1_FLOOR)


def h1_terminal(status, n_T, rs: RewardState, bs: BaselineStats) -> float:
    s, g_T, d_T = _terminal_parts(n_T, rs, bs)
    st = _status(status)
    if st == "OPTIMAL":
        return 1.0 + 2.0 * s
    if st in ("INFEASIBLE", "UNBOUNDED"):
        return 0.5 + 1.5 * s
    if st == "TIMELIMIT":
        return 0.2 * s + 0.6 * g_T + 0.2 * d_T
    return 0.2 * s


# ---------------------------------------------------------------------- h2
def h2_step(rs: RewardState, bs: BaselineStats) -> float:
    B = bs.baseline_nodes
    e = _efficiency(rs.n, B)
    p = _pace(rs.n, rs.tau, B)
    return _clip(0.5 * e + 0.2 * p + 0.2 * _gap_step(rs) + 0.1 * _pdi_step(rs, bs))


def h2_terminal(status, n_T, rs: RewardState, bs: BaselineStats) -> float:
    s, g_T, d_T = _terminal_parts(n_T, rs, bs)
    st = _status(status)
    if st == "OPTIMAL":
        return 1.0 + 2.5 * s
    if st in ("INFEASIBLE", "UNBOUNDED"):
        return 0.7 + 2.0 * s
    if st == "TIMELIMIT":
        return 0.4 * s + 0.4 * g_T + 0.2 * d_T
    return 0.3 * s


# ---------------------------------------------------------------------- h3
def h3_weights(B):
    if B < 1:
        raise ValueError("baseline node count must be >= 1")
    d = 1.0 / (1.0 + math.exp(-(math.log1p(B) - math.log(2)) / (math.log1p(1e6) - math.log(2))))
    w_nodes = 0.55 * (1 - d) + 0.25 * d
    w_gap = 0.10 * (1 - d) + 0.30 * d
    w_pdi = 0.05 * (1 - d) + 0.20 * d
    # equals 0.15 (1 - d) + 0.10 d; taken as the complement so the four
    # blended weights sum to 0.85 exactly (the subtraction is exact because
    # the partial sum lies in [0.7, 0.75])
    w_pace = 0.85 - (w_nodes + w_gap + w_pdi)
    return {"d": d, "w_nodes": w_nodes, "w_gap": w_gap, "w_pdi": w_pdi, "w_pace": w_pace, "w_prog": 0.15}


def h3_step(rs: RewardState, bs: BaselineStats, w=None) -> float:
    B = bs.baseline_nodes
    w = w or h3_weights(B)
    gap_term = tanh_s(rs.gap / (rs.gap0 + 1e-9), 0.5)
    return _clip(w["w_nodes"] * _efficiency(rs.n, B) + w["w_pace"] * _pace(rs.n, rs.tau, B)
                 - w["w_gap"] * gap_term + w["w_pdi"] * _pdi_step(rs, bs) + w["w_prog"] * _progress(rs))


def h3_terminal(status, n_T, rs: RewardState, bs: BaselineStats) -> float:
    s, g_T, d_T = _terminal_parts(n_T, rs, bs)
    st = _status(status)
    if st == "OPTIMAL":
        return 1.0 + 3.0 * s
    if st in ("INFEASIBLE", "UNBOUNDED"):
        return 0.8 + 2.0 * s
    if st == "TIMELIMIT":
        return 0.5 * s + 0.3 * g_T + 0.2 * d_T
    return 0.3 * s


REWARDS = {
    "H1": (h1_step, h1_terminal),
    "H2": (h2_step, h2_terminal),
    "H3": (h3_step, h3_terminal),
}


def reward_functions(name):
    try:
        return REWARDS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown reward {name!r}; choose from {sorted(REWARDS)}") from None


# --------------------------------------------------------------- baselines
def _fmt(x):
    return format(float(x), ".17g")


class BaselineManifest:
    """CSV cache of baseline runs keyed by (instance, seed)."""

    def __init__(self, path):
        self.path = path
        self.rows = {}
        if path and os.path.exists(path):
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != MANIFEST_HEADER:
                    raise TgppoError(f"{path}: unexpected manifest header {reader.fieldnames}",
                                     code="BAD_MANIFEST")
                for row in reader:
                    try:
                        bs = BaselineStats(row["instance"], int(row["seed"]), int(row["baseline_nodes"]),
                                           float(row["gap0"]), float(row["pdi0"]), row["status"])
                    except (TypeError, ValueError) as exc:
                        raise TgppoError(f"{path}: bad manifest row {row}: {exc}", code="BAD_MANIFEST") from exc
                    self.rows[(bs.instance, bs.seed)] = bs

    def get(self, instance, seed):
        return self.rows.get((instance, int(seed)))

    def put(self, bs: BaselineStats):
        self.rows[(bs.instance, bs.seed)] = bs
        if not self.path:
            return
        new = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(MANIFEST_HEADER)
            w.writerow([bs.instance, bs.seed, bs.baseline_nodes, _fmt(bs.gap0), _fmt(bs.pdi0), bs.status])


def acquire_baseline(inst, seed=0, cfg: RunConfig | None = None, manifest: BaselineManifest | None = None,
                     policy=None):
    """Baseline statistics for ``inst`` under ``cfg``, cached in ``manifest``.

    A budget-truncated baseline is returned with status ``BASELINE_TIMEOUT``.
    """
    if manifest is not None:
        hit = manifest.get(inst.name, seed)
        if hit is not None:
            return hit
    cfg = RunConfig(**{**(cfg or RunConfig()).__dict__, "seed": seed})
    stats = run(inst, policy or RelpscostLikePolicy(), cfg)
    status = "BASELINE_TIMEOUT" if stats.status == RunStatus.TIMELIMIT else stats.status.value
    gap0 = stats.gap_timeline[0][1] if stats.gap_timeline else 1.0
    bs = BaselineStats(inst.name, int(seed), max(1, stats.nodes_explored), gap0, stats.pdi, status)
    if manifest is not None:
        manifest.put(bs)
    return bs
