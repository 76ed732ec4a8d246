"""Exact branch-and-bound for the 0-1 matching program.

Each node solves the linear relaxation with some variables pinned to 0 or
1.  Nodes are explored best-bound first; the branching variable is the
most fractional one, ties going to the smallest index.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .ipmodel import LE, BinaryMatchProgram
from .simplex import Basis, BoundedLP

log = logging.getLogger(__name__)

INT_TOL = 1e-6
OBJ_TOL = 1e-6

OPTIMAL = "optimal"
FEASIBLE_GAP = "feasible_gap"
INFEASIBLE = "infeasible"
UNKNOWN_LIMIT = "unknown_limit"


class InternalSolverError(RuntimeError):
    """A returned solution failed re-verification against the program."""


@dataclass
class SolverLimits:
    node_limit: int | None = 200_000
    time_limit: float | None = None


@dataclass
class MatchSolution:
    pairs: list[tuple[int, int]]
    objective: float
    bound: float
    status: str
    nodes: int = 0
    wall_time: float = 0.0
    assignment: np.ndarray | None = field(default=None, repr=False)

    @property
    def gap(self) -> float:
        return self.objective - self.bound


@dataclass
class _Relaxation:
    value: float
    x: np.ndarray
    basis: Basis | None = field(default=None, repr=False)


class _Context:
    """Relaxation data shared by every node of one solve."""

    def __init__(self, program: BinaryMatchProgram):
        self.program = program
        A, senses, b = program.dense()
        self.lp = BoundedLP(program.objective, A, senses, b)


def lp_bound(program: BinaryMatchProgram, fixed: dict[int, int] | None = None,
             _ctx: _Context | None = None, _start: Basis | None = None) -> _Relaxation | None:
    """Relaxation optimum with ``fixed`` variables pinned, or None if infeasible."""
    ctx = _ctx or _Context(program)
    n = program.n_vars
    lo = np.zeros(n)
    hi = np.ones(n)
    for j, v in (fixed or {}).items():
        lo[j] = hi[j] = float(v)
    if _start is None:
        res, basis = ctx.lp.solve(lo, hi)
    else:
        res, basis = ctx.lp.resolve(_start, lo, hi)
    if res.status != "optimal":
        return None
    return _Relaxation(res.value, res.x, basis)


def incumbent_heuristic(program: BinaryMatchProgram) -> np.ndarray | None:
    """Greedy start: cheapest negative-cost pairs first, then repair.

    Pairs are added in order of increasing cost while no unit is reused
    and no cap row is exceeded.  Any violated balance or separation rows
    are then repaired by dropping pairs, cheapest loss first, as long as
    each drop shrinks the total violation.  Returns None when repair
    stalls.
    """
    n = program.n_vars
    a = np.zeros(n)
    used = np.zeros(program.n_units, dtype=bool)
    caps = [r for r in program.rows if r.tag == "cap" and r.sense == LE]
    cap_load = [0.0] * len(caps)
    cap_coef = [dict(zip(r.idx.tolist(), r.val.tolist())) for r in caps]
    first, second = program.index.first, program.index.second
    for j in np.argsort(program.objective, kind="stable"):
        if program.objective[j] >= 0:
            break
        l, m = first[j], second[j]
        if used[l] or used[m]:
            continue
        loads = [cap_load[k] + cap_coef[k].get(int(j), 0.0) for k in range(len(caps))]
        if any(load > caps[k].rhs + 1e-9 for k, load in enumerate(loads)):
            continue
        a[j] = 1.0
        used[l] = used[m] = True
        cap_load = loads

    def total_violation(vec):
        return sum(r.violation(vec) for r in program.rows)

    current = total_violation(a)
    while current > 1e-9:
        best = None
        for j in np.flatnonzero(a):
            a[j] = 0.0
            v = total_violation(a)
            a[j] = 1.0
            if v < current - 1e-12:
                key = (-program.objective[j], j)
                if best is None or key < best[0]:
                    best = (key, j, v)
        if best is None:
            return None
        a[best[1]] = 0.0
        current = best[2]
    return a if program.is_feasible(a) else None


def _branch_variable(x: np.ndarray) -> int | None:
    frac = np.minimum(x - np.floor(x), np.ceil(x) - x)
    if frac.max(initial=0.0) <= INT_TOL:
        return None
    # argmax returns the first maximum, i.e. the smallest index on ties.
    return int(np.argmax(np.round(frac, 12)))


def solve(program: BinaryMatchProgram, limits: SolverLimits | None = None) -> MatchSolution:
    limits = limits or SolverLimits()
    start = time.perf_counter()
    ctx = _Context(program)
    n = program.n_vars

    best_a: np.ndarray | None = None
    best_val = np.inf

    def offer(a: np.ndarray) -> None:
        nonlocal best_a, best_val
        val = program.value(a)
        if val < best_val - OBJ_TOL and program.is_feasible(a):
            best_a, best_val = a.copy(), val

    empty = np.zeros(n)
    if program.is_feasible(empty):
        offer(empty)
    greedy = incumbent_heuristic(program)
    if greedy is not None:
        offer(greedy)

    counter = itertools.count()
    heap: list = []
    nodes = 0
    hit_limit = False

    def evaluate(fixed: dict[int, int], start: Basis | None) -> None:
        nonlocal nodes
        nodes += 1
        relax = lp_bound(program, fixed, ctx, start)
        if relax is None or relax.value >= best_val - OBJ_TOL:
            return
        j = _branch_variable(relax.x)
        if j is None:
            a = np.round(relax.x)
            if program.is_feasible(a):
                offer(a)
                return
            # Rounding broke a row; keep splitting on the least-integral variable.
            frac = np.abs(relax.x - a)
            frac[list(fixed)] = -1.0
            if frac.max() < 0:
                return
            j = int(np.argmax(frac))
        heapq.heappush(heap, (relax.value, next(counter), fixed, j, relax.basis))

    evaluate({}, None)
    root_bound = heap[0][0] if heap else best_val
    while heap:
        if limits.node_limit is not None and nodes >= limits.node_limit:
            hit_limit = True
            break
        if limits.time_limit is not None and time.perf_counter() - start > limits.time_limit:
            hit_limit = True
            break
        bound, _, fixed, j, basis = heapq.heappop(heap)
        if bound >= best_val - OBJ_TOL:
            continue
        # Up branch first so pairing-heavy incumbents surface early.
        evaluate({**fixed, j: 1}, basis)
        evaluate({**fixed, j: 0}, basis)

    open_bound = min((h[0] for h in heap if h[0] < best_val - OBJ_TOL), default=np.inf)
    bound = min(open_bound, best_val)
    if not np.isfinite(bound):
        bound = root_bound
    elapsed = time.perf_counter() - start

    if best_a is None:
        status = UNKNOWN_LIMIT if hit_limit else INFEASIBLE
        return MatchSolution([], float("nan"), float(bound), status, nodes, elapsed)

    violations = program.violations(best_a)
    if violations:
        raise InternalSolverError(f"solution violates rows {violations[:5]}")
    if np.isfinite(open_bound) and best_val - open_bound > OBJ_TOL:
        status = FEASIBLE_GAP
    else:
        status = OPTIMAL
        bound = best_val
    pairs = [program.oriented(int(j)) for j in np.flatnonzero(best_a > 0.5)]
    return MatchSolution(pairs=pairs, objective=float(best_val), bound=float(bound), status=status,
                         nodes=nodes, wall_time=elapsed, assignment=best_a)
