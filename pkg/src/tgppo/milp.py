"""MILP instances: representation, MPS / native text formats, generators and
a brute-force enumeration oracle.

Instances are minimisation problems ``min c.x`` over sparse rows with senses
``L`` (<=), ``G`` (>=) or ``E`` (=), box bounds and an integrality mask.
Infinite bounds are IEEE infinities in memory and ``-inf``/``+inf`` in the
native text format.
"""

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import GeneratorError, InvalidInstanceError, LimitExceeded, MpsError

NATIVE_MAGIC = "tgppo-instance 1"


@dataclass(frozen=True, eq=False)
class MilpInstance:
    name: str
    objective: np.ndarray
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    senses: tuple
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    is_integer: np.ndarray

    @classmethod
    def build(cls, name, objective, entries, senses, rhs, lower, upper, is_integer):
        """Build from ``entries`` = iterable of (row, col, value) triples."""
        entries = sorted(entries, key=lambda e: (e[0], e[1]))
        r = np.array([e[0] for e in entries], dtype=np.int64)
        c = np.array([e[1] for e in entries], dtype=np.int64)
        v = np.array([e[2] for e in entries], dtype=np.float64)
        return cls(
            name=name,
            objective=np.asarray(objective, dtype=np.float64),
            row_idx=r, col_idx=c, values=v,
            senses=tuple(senses),
            rhs=np.asarray(rhs, dtype=np.float64),
            lower=np.asarray(lower, dtype=np.float64),
            upper=np.asarray(upper, dtype=np.float64),
            is_integer=np.asarray(is_integer, dtype=bool),
        )

    @classmethod
    def from_dense(cls, name, objective, A, senses, rhs, lower, upper, is_integer):
        A = np.asarray(A, dtype=np.float64).reshape(len(senses), len(objective))
        entries = [(i, j, A[i, j]) for i, j in zip(*np.nonzero(A))]
        return cls.build(name, objective, entries, senses, rhs, lower, upper, is_integer)

    @property
    def num_vars(self):
        return int(self.objective.shape[0])

    @property
    def num_cons(self):
        return len(self.senses)

    @cached_property
    def dense(self):
        A = np.zeros((self.num_cons, self.num_vars))
        A[self.row_idx, self.col_idx] = self.values
        return A

    def serialize(self):
        return dumps(self)


def _fmt(x):
    x = float(x)
    if math.isinf(x):
        return "+inf" if x > 0 else "-inf"
    return "%.17g" % x


def _num(tok):
    return float(tok)


# ---------------------------------------------------------------- validation

def validate_instance(inst: MilpInstance) -> MilpInstance:
    """Check ``inst`` and return an equivalent instance with only ``<=`` rows.

    GE rows are negated and EQ rows split into a ``<=`` / ``>=`` pair.
    Problems are reported, never repaired: raises InvalidInstanceError with a
    list of ``(code, index)`` pairs.
    """
    n, m = inst.num_vars, inst.num_cons
    errors = []
    for arr, what in ((inst.lower, "lower"), (inst.upper, "upper"), (inst.is_integer, "is_integer")):
        if arr.shape != (n,):
            errors.append(("SHAPE_MISMATCH", what))
    if inst.rhs.shape != (m,):
        errors.append(("SHAPE_MISMATCH", "rhs"))
    if errors:
        raise InvalidInstanceError(errors)
    for k, (i, j) in enumerate(zip(inst.row_idx, inst.col_idx)):
        if not (0 <= i < m and 0 <= j < n):
            errors.append(("INDEX_OUT_OF_RANGE", k))
    pairs = set()
    for i, j in zip(inst.row_idx.tolist(), inst.col_idx.tolist()):
        if (i, j) in pairs:
            errors.append(("DUPLICATE_ENTRY", (i, j)))
        pairs.add((i, j))
    for s_i, s in enumerate(inst.senses):
        if s not in ("L", "G", "E"):
            errors.append(("BAD_SENSE", s_i))
    for j in range(n):
        if inst.lower[j] > inst.upper[j] or np.isnan(inst.lower[j]) or np.isnan(inst.upper[j]):
            errors.append(("CROSSING_BOUNDS", j))
        if not np.isfinite(inst.objective[j]):
            errors.append(("INFINITE_OBJECTIVE", j))
    for i in np.flatnonzero(~np.isfinite(inst.rhs)):
        errors.append(("NONFINITE_RHS", int(i)))
    if not np.all(np.isfinite(inst.values)):
        errors.append(("NONFINITE_COEFFICIENT", None))
    used = np.zeros(n, dtype=bool)
    used[inst.col_idx[(inst.col_idx >= 0) & (inst.col_idx < n)]] = True
    for j in np.flatnonzero(~used):
        errors.append(("EMPTY_COLUMN", int(j)))
    if errors:
        raise InvalidInstanceError(errors)

    if all(s == "L" for s in inst.senses):
        return inst
    by_row = [[] for _ in range(m)]
    for i, j, v in zip(inst.row_idx.tolist(), inst.col_idx.tolist(), inst.values.tolist()):
        by_row[i].append((j, v))
    entries, rhs = [], []
    for i, s in enumerate(inst.senses):
        signs = {"L": (1.0,), "G": (-1.0,), "E": (1.0, -1.0)}[s]
        for sg in signs:
            r = len(rhs)
            entries.extend((r, j, sg * v) for j, v in by_row[i])
            rhs.append(sg * inst.rhs[i])
    return MilpInstance.build(inst.name, inst.objective, entries, ["L"] * len(rhs), rhs,
                              inst.lower, inst.upper, inst.is_integer)


def permute_columns(inst: MilpInstance, seed: int) -> MilpInstance:
    """Reorder variables by a seeded permutation (seed 0 is the identity).

    Used as solver-level data augmentation: the combinatorial structure is
    unchanged, only index-based tie-breaking differs.
    """
    if seed == 0:
        return inst
    perm = np.random.default_rng(seed).permutation(inst.num_vars)
    inv = np.argsort(perm)
    entries = [(i, int(inv[j]), v) for i, j, v in
               zip(inst.row_idx.tolist(), inst.col_idx.tolist(), inst.values.tolist())]
    return MilpInstance.build(inst.name, inst.objective[perm], entries, inst.senses, inst.rhs,
                              inst.lower[perm], inst.upper[perm], inst.is_integer[perm])


# ------------------------------------------------------------- native format

def dumps(inst: MilpInstance) -> str:
    """Native line-oriented serialization.

    Field order: magic, ``name``, ``size n m nnz``, ``objective``, ``lower``,
    ``upper``, ``integer`` (0/1 flags), ``senses``, ``rhs``, one
    ``entry row col value`` line per nonzero, ``end``.
    """
    lines = [
        NATIVE_MAGIC,
        f"name {inst.name}",
        f"size {inst.num_vars} {inst.num_cons} {len(inst.values)}",
        "objective " + " ".join(map(_fmt, inst.objective)),
        "lower " + " ".join(map(_fmt, inst.lower)),
        "upper " + " ".join(map(_fmt, inst.upper)),
        "integer " + " ".join("1" if b else "0" for b in inst.is_integer),
        "senses " + " ".join(inst.senses),
        "rhs " + " ".join(map(_fmt, inst.rhs)),
    ]
    lines += [f"entry {i} {j} {_fmt(v)}" for i, j, v in
              zip(inst.row_idx.tolist(), inst.col_idx.tolist(), inst.values.tolist())]
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str) -> MilpInstance:
    lines = text.splitlines()
    if not lines or lines[0].strip() != NATIVE_MAGIC:
        raise MpsError("missing native header", code="MALFORMED_LINE")
    fields = {}
    entries = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        key, rest = parts[0], parts[1:]
        if key == "entry":
            if len(rest) != 3:
                raise MpsError(f"line {ln}", code="MALFORMED_LINE")
            entries.append((int(rest[0]), int(rest[1]), _num(rest[2])))
        elif key == "end":
            break
        elif key in fields:
            raise MpsError(f"line {ln}: repeated field {key}", code="DUPLICATE_ENTRY")
        else:
            fields[key] = rest
    try:
        n, m, nnz = map(int, fields["size"])
        name = fields["name"][0] if fields["name"] else ""
        vec = lambda k: [_num(t) for t in fields[k]]  # noqa: E731
        inst = MilpInstance.build(
            name, vec("objective"), entries, fields["senses"], vec("rhs"),
            vec("lower"), vec("upper"), [t == "1" for t in fields["integer"]])
    except (KeyError, ValueError) as exc:
        raise MpsError(f"bad native instance: {exc}", code="MALFORMED_LINE") from exc
    if inst.num_vars != n or inst.num_cons != m or len(entries) != nnz:
        raise MpsError("size line disagrees with content", code="MALFORMED_LINE")
    return inst


# ---------------------------------------------------------------- MPS format

_SECTIONS = {"NAME", "ROWS", "COLUMNS", "RHS", "BOUNDS", "ENDATA"}


def parse_mps(text: str) -> MilpInstance:
    """Read the free-format MPS subset (NAME/ROWS/COLUMNS/RHS/BOUNDS/ENDATA).

    Integer columns declared between INTORG/INTEND markers default to [0, 1]
    unless a BOUNDS entry mentions them, in which case unspecified sides take
    the continuous defaults (lower 0, upper +inf).
    """
    name = ""
    section = None
    obj_row = None
    row_names, row_sense = [], {}
    free_rows = set()
    col_index, col_int = {}, []
    coeffs = {}
    obj = {}
    rhs = {}
    bounds = {}
    in_int = False

    def bad(ln, msg):
        return MpsError(f"line {ln}: {msg}", code="MALFORMED_LINE")

    def num(tok, ln):
        try:
            return float(tok)
        except ValueError:
            raise bad(ln, f"not a number: {tok!r}") from None

    for ln, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("*"):
            continue
        toks = raw.split()
        if not raw[0].isspace():
            head = toks[0].upper()
            if head not in _SECTIONS:
                raise MpsError(head, code="UNSUPPORTED_SECTION")
            section = head
            if head == "NAME":
                name = toks[1] if len(toks) > 1 else ""
            elif head == "ENDATA":
                break
            continue
        if section == "ROWS":
            if len(toks) != 2:
                raise bad(ln, "ROWS entry needs sense and name")
            sense, rname = toks[0].upper(), toks[1]
            if rname in row_sense or rname == obj_row or rname in free_rows:
                raise MpsError(f"line {ln}: row {rname}", code="DUPLICATE_ENTRY")
            if sense == "N":
                if obj_row is None:
                    obj_row = rname
                else:
                    free_rows.add(rname)
            elif sense in ("L", "G", "E"):
                row_sense[rname] = sense
                row_names.append(rname)
            else:
                raise bad(ln, f"unknown row sense {sense}")
        elif section == "COLUMNS":
            if len(toks) >= 3 and toks[1].strip("'\"").upper() == "MARKER":
                mark = toks[2].strip("'\"").upper()
                if mark == "INTORG":
                    in_int = True
                elif mark == "INTEND":
                    in_int = False
                else:
                    raise bad(ln, f"unknown marker {mark}")
                continue
            if len(toks) not in (3, 5):
                raise bad(ln, "COLUMNS entry needs 1 or 2 (row, value) pairs")
            cname = toks[0]
            if cname not in col_index:
                col_index[cname] = len(col_int)
                col_int.append(in_int)
            j = col_index[cname]
            for rname, val in zip(toks[1::2], toks[2::2]):
                v = num(val, ln)
                if rname == obj_row:
                    if j in obj:
                        raise MpsError(f"line {ln}: objective of {cname}", code="DUPLICATE_ENTRY")
                    obj[j] = v
                elif rname in free_rows:
                    continue
                elif rname in row_sense:
                    key = (rname, j)
                    if key in coeffs:
                        raise MpsError(f"line {ln}: ({rname}, {cname})", code="DUPLICATE_ENTRY")
                    coeffs[key] = v
                else:
                    raise bad(ln, f"unknown row {rname}")
        elif section == "RHS":
            if len(toks) % 2 == 1:
                toks = toks[1:]
            if len(toks) not in (2, 4):
                raise bad(ln, "RHS entry needs 1 or 2 (row, value) pairs")
            for rname, val in zip(toks[0::2], toks[1::2]):
                if rname == obj_row:
                    raise bad(ln, "objective constants are not supported")
                if rname not in row_sense:
                    raise bad(ln, f"unknown row {rname}")
                if rname in rhs:
                    raise MpsError(f"line {ln}: rhs of {rname}", code="DUPLICATE_ENTRY")
                rhs[rname] = num(val, ln)
        elif section == "BOUNDS":
            kind = toks[0].upper()
            if kind in ("MI", "PL", "BV", "FR"):
                if len(toks) not in (2, 3, 4):
                    raise bad(ln, "bad bound entry")
                cname = toks[2] if len(toks) >= 3 else toks[1]
                val = None
            elif kind in ("LO", "UP", "FX"):
                if len(toks) == 4:
                    cname, val = toks[2], num(toks[3], ln)
                elif len(toks) == 3:
                    cname, val = toks[1], num(toks[2], ln)
                else:
                    raise bad(ln, "bad bound entry")
            else:
                raise bad(ln, f"unknown bound type {kind}")
            if cname not in col_index:
                raise bad(ln, f"unknown column {cname}")
            j = col_index[cname]
            b = bounds.setdefault(j, {})
            sides = {"LO": ("lo",), "MI": ("lo",), "UP": ("up",), "PL": ("up",),
                     "FX": ("lo", "up"), "BV": ("lo", "up"), "FR": ("lo", "up")}[kind]
            for side in sides:
                if side in b:
                    raise MpsError(f"line {ln}: {side} bound of {cname}", code="DUPLICATE_ENTRY")
            if kind == "LO":
                b["lo"] = val
            elif kind == "MI":
                b["lo"] = -np.inf
            elif kind == "UP":
                b["up"] = val
            elif kind == "PL":
                b["up"] = np.inf
            elif kind == "FX":
                b["lo"] = b["up"] = val
            elif kind == "FR":
                b["lo"], b["up"] = -np.inf, np.inf
            elif kind == "BV":
                b["lo"], b["up"] = 0.0, 1.0
                col_int[j] = True
        else:
            raise bad(ln, "data line outside a section")

    if obj_row is None:
        raise MpsError("no objective (N) row", code="MALFORMED_LINE")
    n = len(col_int)
    row_of = {r: i for i, r in enumerate(row_names)}
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    for j in range(n):
        b = bounds.get(j)
        if b is None:
            if col_int[j]:
                upper[j] = 1.0
            continue
        lower[j] = b.get("lo", 0.0)
        upper[j] = b.get("up", np.inf)
    entries = [(row_of[r], j, v) for (r, j), v in coeffs.items()]
    return MilpInstance.build(
        name, [obj.get(j, 0.0) for j in range(n)], entries,
        [row_sense[r] for r in row_names], [rhs.get(r, 0.0) for r in row_names],
        lower, upper, col_int)


def write_mps(inst: MilpInstance) -> str:
    """Free-format MPS text that ``parse_mps`` reads back to an identical instance."""
    n, m = inst.num_vars, inst.num_cons
    out = [f"NAME {inst.name}", "ROWS", " N obj"]
    out += [f" {s} R{i}" for i, s in enumerate(inst.senses)]
    out.append("COLUMNS")
    by_col = [[] for _ in range(n)]
    for i, j, v in zip(inst.row_idx.tolist(), inst.col_idx.tolist(), inst.values.tolist()):
        by_col[j].append((i, v))
    in_int = False
    for j in range(n):
        if inst.is_integer[j] != in_int:
            in_int = bool(inst.is_integer[j])
            out.append(f" M{j} 'MARKER' '{'INTORG' if in_int else 'INTEND'}'")
        if inst.objective[j] != 0 or not by_col[j]:
            out.append(f" x{j} obj {_fmt(inst.objective[j])}")
        out += [f" x{j} R{i} {_fmt(v)}" for i, v in by_col[j]]
    if in_int:
        out.append(f" M{n} 'MARKER' 'INTEND'")
    out.append("RHS")
    out += [f" rhs R{i} {_fmt(v)}" for i, v in enumerate(inst.rhs) if v != 0]
    out.append("BOUNDS")
    for j in range(n):
        lo, up = inst.lower[j], inst.upper[j]
        if inst.is_integer[j] or lo != 0:
            out.append(f" MI bnd x{j}" if np.isneginf(lo) else f" LO bnd x{j} {_fmt(lo)}")
        if inst.is_integer[j] or np.isfinite(up):
            out.append(f" PL bnd x{j}" if np.isposinf(up) else f" UP bnd x{j} {_fmt(up)}")
    out.append("ENDATA")
    return "\n".join(out) + "\n"


def read_instance(path) -> MilpInstance:
    text = Path(path).read_text(encoding="utf-8")
    if text.startswith(NATIVE_MAGIC):
        return loads(text)
    return parse_mps(text)


def write_instance(inst: MilpInstance, path) -> None:
    path = Path(path)
    text = write_mps(inst) if path.suffix.lower() == ".mps" else dumps(inst)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- generation

class Family(str, Enum):
    SET_COVER = "SET_COVER"
    MULTI_KNAPSACK = "MULTI_KNAPSACK"
    MIXED_RANDOM = "MIXED_RANDOM"


@dataclass(frozen=True)
class GeneratorParams:
    family: Family
    rows: int
    cols: int
    density: float = 0.3
    coefficient_range: tuple = (1, 10)
    seed: int = 0


def generate_instance(p: GeneratorParams, name: str | None = None) -> MilpInstance:
    family = Family(p.family)
    if p.rows < 1 or p.cols < 1 or not (0 < p.density <= 1):
        raise GeneratorError(f"bad sizes/density {p}")
    lo_c, hi_c = p.coefficient_range
    if lo_c > hi_c:
        raise GeneratorError("empty coefficient range")
    rng = np.random.default_rng(p.seed)
    name = name or f"{family.value.lower()}_{p.rows}x{p.cols}_s{p.seed}"
    m, n = p.rows, p.cols

    if family is Family.SET_COVER:
        if p.density * n < 1:
            raise GeneratorError("density too low: fewer than one expected cover per row")
        cover = rng.random((m, n)) < p.density
        for j in np.flatnonzero(~cover.any(axis=0)):
            cover[rng.integers(m), j] = True
        for i in np.flatnonzero(~cover.any(axis=1)):
            cover[i, rng.integers(n)] = True
        cost = rng.integers(lo_c, hi_c + 1, size=n).astype(float)
        return MilpInstance.from_dense(name, cost, cover.astype(float), ["G"] * m, np.ones(m),
                                       np.zeros(n), np.ones(n), np.ones(n, dtype=bool))

    if family is Family.MULTI_KNAPSACK:
        values = rng.integers(lo_c, hi_c + 1, size=n).astype(float)
        weights = rng.integers(lo_c, hi_c + 1, size=(m, n)).astype(float)
        weights[rng.random((m, n)) >= p.density] = 0.0
        for j in np.flatnonzero(~weights.any(axis=0)):
            weights[rng.integers(m), j] = float(rng.integers(lo_c, hi_c + 1))
        cap = np.maximum(np.floor(0.5 * weights.sum(axis=1)), weights.max(axis=1))
        return MilpInstance.from_dense(name, -values, weights, ["L"] * m, cap,
                                       np.zeros(n), np.ones(n), np.ones(n, dtype=bool))

    # MIXED_RANDOM: roughly half integer in [0, 2], the rest continuous in [0, 5]
    is_int = np.zeros(n, dtype=bool)
    n_int = max(1, n // 2) if n > 1 else 1
    is_int[:n_int] = True
    if n > 1:
        is_int[-1] = False
    rng.shuffle(is_int)
    if n == 1:
        is_int[0] = True
    upper = np.where(is_int, 2.0, 5.0)
    A = rng.integers(lo_c, hi_c + 1, size=(m, n)).astype(float)
    A[rng.random((m, n)) >= p.density] = 0.0
    for j in np.flatnonzero(~A.any(axis=0)):
        A[rng.integers(m), j] = float(rng.integers(lo_c, hi_c + 1)) or 1.0
    b = np.floor(0.4 * np.abs(A) @ upper) + 0.5
    c = -rng.integers(lo_c, hi_c + 1, size=n).astype(float)
    return MilpInstance.from_dense(name, c, A, ["L"] * m, b, np.zeros(n), upper, is_int)


# ----------------------------------------------------------------- the oracle

@dataclass
class BruteForceResult:
    status: str  # "OPTIMAL" | "INFEASIBLE"
    value: float = math.inf
    solution: np.ndarray | None = field(default=None)


def brute_force_solve(inst: MilpInstance, enum_limit: int = 1 << 16) -> BruteForceResult:
    """Enumerate every integer assignment; solve the continuous rest by LP.

    Pure-integer instances are checked directly (no LP needed). Raises
    LimitExceeded when an integer bound is infinite or the number of
    assignments exceeds ``enum_limit``.
    """
    from .simplex import LpProblem, LpStatus, solve_lp

    inst = validate_instance(inst)
    A, b, c = inst.dense, inst.rhs, inst.objective
    ints = np.flatnonzero(inst.is_integer)
    conts = np.flatnonzero(~inst.is_integer)
    lo = np.ceil(inst.lower[ints] - 1e-9)
    up = np.floor(inst.upper[ints] + 1e-9)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(up))):
        raise LimitExceeded("integer variable with infinite bound")
    sizes = np.maximum(up - lo + 1, 0).astype(np.int64)
    total = int(np.prod(sizes.astype(object))) if len(sizes) else 1
    if total > enum_limit:
        raise LimitExceeded(f"{total} assignments > {enum_limit}")
    if total == 0:
        return BruteForceResult("INFEASIBLE")

    best = BruteForceResult("INFEASIBLE")
    if len(conts) == 0:
        grids = [np.arange(l_, u_ + 1) for l_, u_ in zip(lo, up)]
        chunk = 1 << 14
        it = itertools.product(*grids)
        while True:
            block = list(itertools.islice(it, chunk))
            if not block:
                break
            X = np.array(block, dtype=np.float64).reshape(len(block), len(ints))
            feas = np.all(X @ A[:, ints].T <= b + 1e-9, axis=1) if len(b) else np.ones(len(X), bool)
            if not feas.any():
                continue
            vals = X[feas] @ c[ints]
            k = int(np.argmin(vals))
            if vals[k] < best.value:
                x = np.zeros(inst.num_vars)
                x[ints] = X[feas][k]
                best = BruteForceResult("OPTIMAL", float(vals[k]), x)
        return best

    A_c = A[:, conts]
    for assign in itertools.product(*[np.arange(l_, u_ + 1) for l_, u_ in zip(lo, up)]):
        xi = np.array(assign, dtype=np.float64)
        rhs = b - A[:, ints] @ xi
        out = solve_lp(LpProblem(c[conts], A_c, rhs, inst.lower[conts], inst.upper[conts]))
        if out.status == LpStatus.UNBOUNDED:
            return BruteForceResult("UNBOUNDED", -math.inf)
        if out.status != LpStatus.OPTIMAL:
            continue
        val = float(c[ints] @ xi) + out.objective_value
        if val < best.value:
            x = np.zeros(inst.num_vars)
            x[ints] = xi
            x[conts] = out.solution
            best = BruteForceResult("OPTIMAL", val, x)
    return best
