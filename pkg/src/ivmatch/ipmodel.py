"""The 0-1 nonbipartite matching program for one stratum.

Variable ``a[(l, m)]`` (l < m) is 1 when units l and m are paired.  The
first L rows keep each unit in at most one pair; the remaining rows come
from the ``add_*`` builders below.

Rows that compare the two sides of the match (fine balance, mean balance,
separation, near-fine balance) need to know which unit of a pair is on the
long side.  A pair is oriented by the instrument: the unit with the larger
instrument value is long, with ties going to the lower index.  Without an
instrument every pair is oriented l -> long, m -> short.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .distance import DistanceMatrix

LE, EQ, GE = "<=", "=", ">="
SENSES = (LE, EQ, GE)
TAGS = ("degree", "fine_balance", "cap", "mean_balance", "separation", "near_fine", "cardinality")
ROW_TOL = 1e-6


class ProgramError(ValueError):
    pass


class PairVarIndex:
    """Bijection between variable positions and unordered unit pairs."""

    def __init__(self, n_units: int, candidates: Iterable[tuple[int, int]] | np.ndarray | None = None):
        self.n_units = n_units
        if candidates is None:
            pairs = [(l, m) for l in range(n_units) for m in range(l + 1, n_units)]
        elif isinstance(candidates, np.ndarray) and candidates.ndim == 2:
            mask = np.asarray(candidates, dtype=bool)
            pairs = [(l, m) for l in range(n_units) for m in range(l + 1, n_units)
                     if mask[l, m] or mask[m, l]]
        else:
            pairs = sorted({(min(p), max(p)) for p in candidates})
            for l, m in pairs:
                if l == m or not (0 <= l < n_units and 0 <= m < n_units):
                    raise ProgramError(f"invalid pair ({l}, {m}) for {n_units} units")
        self.pairs: list[tuple[int, int]] = pairs
        self._pos = {p: i for i, p in enumerate(pairs)}
        self.first = np.array([p[0] for p in pairs], dtype=int)
        self.second = np.array([p[1] for p in pairs], dtype=int)

    def __len__(self) -> int:
        return len(self.pairs)

    def position(self, l: int, m: int) -> int:
        return self._pos[(min(l, m), max(l, m))]

    def __contains__(self, pair) -> bool:
        l, m = pair
        return (min(l, m), max(l, m)) in self._pos

    def name(self, i: int) -> str:
        l, m = self.pairs[i]
        return f"p_{l}_{m}"


@dataclass
class Row:
    idx: np.ndarray
    val: np.ndarray
    sense: str
    rhs: float
    tag: str
    name: str

    def activity(self, a: np.ndarray) -> float:
        return float(np.dot(self.val, a[self.idx])) if self.idx.size else 0.0

    def violation(self, a: np.ndarray) -> float:
        lhs = self.activity(a)
        if self.sense == LE:
            return max(0.0, lhs - self.rhs)
        if self.sense == GE:
            return max(0.0, self.rhs - lhs)
        return abs(lhs - self.rhs)


@dataclass
class BinaryMatchProgram:
    n_units: int
    index: PairVarIndex
    objective: np.ndarray
    rows: list[Row] = field(default_factory=list)
    instrument: np.ndarray | None = None
    name: str = "ivmatch"
    lam: float = 0.0
    _counters: dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def n_vars(self) -> int:
        return len(self.index)

    @property
    def orientation(self) -> np.ndarray:
        """+1 where the lower-indexed unit of a pair is the long side, else -1."""
        if self.instrument is None:
            return np.ones(self.n_vars)
        v = self.instrument
        return np.where(v[self.index.first] >= v[self.index.second], 1.0, -1.0)

    def side_difference(self, values: Sequence[float]) -> np.ndarray:
        """value(long) - value(short) for every pair variable."""
        x = np.asarray(values, dtype=float)
        if x.shape != (self.n_units,):
            raise ProgramError(f"expected {self.n_units} unit values, got shape {x.shape}")
        return self.orientation * (x[self.index.first] - x[self.index.second])

    def oriented(self, i: int) -> tuple[int, int]:
        l, m = self.index.pairs[i]
        return (l, m) if self.orientation[i] > 0 else (m, l)

    def add_row(self, coefs: np.ndarray, sense: str, rhs: float, tag: str) -> Row:
        if sense not in SENSES:
            raise ProgramError(f"unknown relation {sense!r}")
        if tag not in TAGS:
            raise ProgramError(f"unknown row tag {tag!r}")
        coefs = np.asarray(coefs, dtype=float)
        if coefs.shape != (self.n_vars,):
            raise ProgramError(f"row has {coefs.shape} coefficients for {self.n_vars} variables")
        if not (np.all(np.isfinite(coefs)) and math.isfinite(rhs)):
            raise ProgramError("row coefficients and right-hand side must be finite")
        idx = np.flatnonzero(coefs)
        k = self._counters.get(tag, 0)
        self._counters[tag] = k + 1
        row = Row(idx=idx, val=coefs[idx], sense=sense, rhs=float(rhs), tag=tag, name=f"{tag}_{k}")
        self.rows.append(row)
        return row

    def rows_tagged(self, tag: str) -> list[Row]:
        return [r for r in self.rows if r.tag == tag]

    # -- evaluation ---------------------------------------------------------

    def assignment(self, pairs: Iterable[tuple[int, int]]) -> np.ndarray:
        a = np.zeros(self.n_vars)
        for l, m in pairs:
            a[self.index.position(l, m)] = 1.0
        return a

    def value(self, a: np.ndarray) -> float:
        return float(self.objective @ a)

    def violations(self, a: np.ndarray, tol: float = ROW_TOL) -> list[tuple[str, float]]:
        out = []
        for row in self.rows:
            scale = 1.0 + float(np.abs(row.val).sum()) if row.idx.size else 1.0
            v = row.violation(a)
            if v > tol * scale:
                out.append((row.name, v))
        return out

    def is_feasible(self, a: np.ndarray, tol: float = ROW_TOL) -> bool:
        return not self.violations(a, tol)

    def dense(self) -> tuple[np.ndarray, list[str], np.ndarray]:
        A = np.zeros((len(self.rows), self.n_vars))
        for i, row in enumerate(self.rows):
            A[i, row.idx] = row.val
        return A, [r.sense for r in self.rows], np.array([r.rhs for r in self.rows])

    def to_dict(self) -> dict:
        names = [self.index.name(i) for i in range(self.n_vars)]
        return {
            "name": self.name,
            "n_units": self.n_units,
            "variables": [{"name": n, "eta": float(c)} for n, c in zip(names, self.objective)],
            "rows": [
                {"name": r.name, "tag": r.tag, "sense": r.sense, "rhs": r.rhs,
                 "coefficients": {names[j]: float(v) for j, v in zip(r.idx, r.val)}}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def new_program(n_units: int, distances: DistanceMatrix | np.ndarray, lam: float,
                instrument: Sequence[float] | None = None,
                candidates=None, name: str = "ivmatch") -> BinaryMatchProgram:
    """Program with objective omega - lambda and one degree row per unit."""
    if n_units < 2:
        raise ProgramError(f"a match needs at least 2 units, got {n_units}")
    if lam < 0:
        raise ProgramError(f"lambda must be nonnegative, got {lam}")
    omega = distances.values if isinstance(distances, DistanceMatrix) else np.asarray(distances, float)
    if omega.shape != (n_units, n_units):
        raise ProgramError(f"distance matrix shape {omega.shape} does not match {n_units} units")
    index = PairVarIndex(n_units, candidates)
    eta = omega[index.first, index.second] - lam
    v = None if instrument is None else np.asarray(instrument, dtype=float)
    if v is not None and v.shape != (n_units,):
        raise ProgramError("instrument must have one value per unit")
    prog = BinaryMatchProgram(n_units=n_units, index=index, objective=eta, instrument=v, name=name,
                              lam=float(lam))
    for unit in range(n_units):
        coefs = ((index.first == unit) | (index.second == unit)).astype(float)
        prog.add_row(coefs, LE, 1.0, "degree")
    return prog


def _as_binary(w: Sequence[float], n: int, what: str) -> np.ndarray:
    x = np.asarray(w, dtype=float)
    if x.shape != (n,):
        raise ProgramError(f"{what} must have one value per unit")
    if not np.all((x == 0) | (x == 1)):
        raise ProgramError(f"{what} must be 0/1")
    return x


def add_fine_balance(program: BinaryMatchProgram, w: Sequence[float]) -> Row:
    """Equal counts of w == 1 on the long and short sides."""
    x = _as_binary(w, program.n_units, "fine balance indicator")
    return program.add_row(program.side_difference(x), EQ, 0.0, "fine_balance")


def pair_flags(program: BinaryMatchProgram,
               h: np.ndarray | Callable[[int, int], bool] | Sequence[float]) -> np.ndarray:
    """Per-variable 0/1 flags from a callable, an L x L array or a flat vector."""
    if callable(h):
        return np.array([1.0 if h(l, m) else 0.0 for l, m in program.index.pairs])
    arr = np.asarray(h, dtype=float)
    if arr.shape == (program.n_units, program.n_units):
        flags = arr[program.index.first, program.index.second]
    elif arr.shape == (program.n_vars,):
        flags = arr
    else:
        raise ProgramError(f"pair flags of shape {arr.shape} fit neither the units nor the variables")
    if not np.all((flags == 0) | (flags == 1)):
        raise ProgramError("pair flags must be 0/1")
    return flags


def add_cap(program: BinaryMatchProgram, h, H: int) -> Row:
    """At most H selected pairs carry the flag h."""
    if H < 0:
        raise ProgramError(f"cap must be nonnegative, got {H}")
    return program.add_row(pair_flags(program, h), LE, float(H), "cap")


def add_mean_balance(program: BinaryMatchProgram, v: Sequence[float], epsilon: float) -> tuple[Row, Row]:
    """Side means of v differ by at most epsilon."""
    if not epsilon > 0:
        raise ProgramError(f"epsilon must be positive, got {epsilon}")
    diff = program.side_difference(v)
    return (program.add_row(diff - epsilon, LE, 0.0, "mean_balance"),
            program.add_row(-diff - epsilon, LE, 0.0, "mean_balance"))


def add_separation(program: BinaryMatchProgram, v: Sequence[float], phi: float) -> Row:
    """Mean long-minus-short gap in v of at least phi."""
    if phi < 0:
        raise ProgramError(f"phi must be nonnegative, got {phi}")
    x = np.asarray(v, dtype=float)
    if program.instrument is None:
        gap = np.abs(x[program.index.first] - x[program.index.second])
    else:
        gap = program.side_difference(x)
    return program.add_row(gap - phi, GE, 0.0, "separation")


def add_near_fine_balance(program: BinaryMatchProgram, w: Sequence[float], epsilon: int) -> tuple[Row, Row]:
    """Counts of w == 1 on the two sides differ by at most epsilon."""
    if epsilon < 0:
        raise ProgramError(f"epsilon must be nonnegative, got {epsilon}")
    diff = program.side_difference(_as_binary(w, program.n_units, "near-fine indicator"))
    return (program.add_row(diff, LE, float(epsilon), "near_fine"),
            program.add_row(-diff, LE, float(epsilon), "near_fine"))


def add_cardinality(program: BinaryMatchProgram, count: float, sense: str = EQ) -> Row:
    """Fix (or bound) the number of pairs, e.g. L/2 for a complete match."""
    return program.add_row(np.ones(program.n_vars), sense, float(count), "cardinality")


# -- MPS -------------------------------------------------------------------

_MPS_SENSE = {LE: "L", EQ: "E", GE: "G"}
_SENSE_MPS = {v: k for k, v in _MPS_SENSE.items()}


def _num(x: float) -> str:
    return repr(float(x))


def export_mps(program: BinaryMatchProgram) -> str:
    """MPS text for the program (minimize).  Columns are named p_<l>_<m>."""
    lines = [f"NAME          {program.name}", "ROWS", " N  COST"]
    lines += [f" {_MPS_SENSE[r.sense]}  {r.name}" for r in program.rows]
    lines.append("COLUMNS")
    lines.append("    MARKER                 'MARKER'                 'INTORG'")
    by_col: list[list[tuple[str, float]]] = [[] for _ in range(program.n_vars)]
    for r in program.rows:
        for j, v in zip(r.idx, r.val):
            by_col[j].append((r.name, v))
    for j in range(program.n_vars):
        name = program.index.name(j)
        lines.append(f"    {name:<8}  {'COST':<8}  {_num(program.objective[j]):>12}")
        for rname, v in by_col[j]:
            lines.append(f"    {name:<8}  {rname:<8}  {_num(v):>12}")
    lines.append("    MARKER                 'MARKER'                 'INTEND'")
    lines.append("RHS")
    for r in program.rows:
        if r.rhs != 0.0:
            lines.append(f"    {'RHS':<8}  {r.name:<8}  {_num(r.rhs):>12}")
    lines.append("BOUNDS")
    for j in range(program.n_vars):
        lines.append(f" BV {'BND':<8}  {program.index.name(j)}")
    lines.append("ENDATA")
    return "\n".join(lines) + "\n"


@dataclass
class MpsModel:
    name: str
    columns: list[str]
    objective: dict[str, float]
    rows: list[dict]
    binaries: set[str]
    integer_columns: set[str]


def parse_mps(text: str) -> MpsModel:
    """Read back the subset of MPS written by :func:`export_mps`."""
    name = ""
    section = None
    objective_row = None
    rows: dict[str, dict] = {}
    order: list[str] = []
    columns: list[str] = []
    seen: set[str] = set()
    objective: dict[str, float] = {}
    binaries: set[str] = set()
    integer_cols: set[str] = set()
    in_int = False
    for raw in text.splitlines():
        if not raw.strip() or raw.startswith("*"):
            continue
        if not raw[0].isspace():
            head = raw.split()
            section = head[0]
            if section == "NAME":
                name = head[1] if len(head) > 1 else ""
            continue
        tok = raw.split()
        if section == "ROWS":
            kind, rname = tok
            if kind == "N":
                objective_row = rname
            else:
                rows[rname] = {"name": rname, "sense": _SENSE_MPS[kind], "rhs": 0.0, "coefficients": {}}
                order.append(rname)
        elif section == "COLUMNS":
            if len(tok) >= 3 and tok[1] == "'MARKER'":
                in_int = tok[2] == "'INTORG'"
                continue
            col = tok[0]
            if col not in seen:
                seen.add(col)
                columns.append(col)
            if in_int:
                integer_cols.add(col)
            for rname, val in zip(tok[1::2], tok[2::2]):
                if rname == objective_row:
                    objective[col] = float(val)
                else:
                    rows[rname]["coefficients"][col] = float(val)
        elif section == "RHS":
            for rname, val in zip(tok[1::2], tok[2::2]):
                rows[rname]["rhs"] = float(val)
        elif section == "BOUNDS":
            if tok[0] == "BV":
                binaries.add(tok[2])
    return MpsModel(name=name, columns=columns, objective=objective,
                    rows=[rows[r] for r in order], binaries=binaries, integer_columns=integer_cols)


def read_solution(text: str, program: BinaryMatchProgram) -> np.ndarray:
    """Assignment vector from ``name value`` lines written by an external solver.

    Unknown names are an error; unlisted variables are 0.
    """
    names = {program.index.name(i): i for i in range(program.n_vars)}
    a = np.zeros(program.n_vars)
    for line in text.splitlines():
        tok = line.replace("=", " ").replace(",", " ").split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] not in names:
            raise ProgramError(f"solution names unknown variable {tok[0]!r}")
        value = float(tok[1])
        a[names[tok[0]]] = round(value)
    return a
