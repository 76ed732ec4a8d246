"""Dense bounded-variable simplex.

Solves ``min c.x  s.t.  A x (<=, =, >=) b,  lo <= x <= hi`` with finite
``lo``.  Nonbasic variables sit at one of their bounds, so 0-1 relaxations
need no explicit ``x <= 1`` rows.  Pricing is Dantzig's rule; after a run
of degenerate pivots it switches to Bland's rule until progress resumes.

:class:`BoundedLP` keeps the constraint system fixed and lets callers
re-solve under new variable bounds from a previous optimal basis, which
is what branch-and-bound needs: the old basis stays dual feasible, so a
dual simplex pass restores primal feasibility in a few pivots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

FEAS_TOL = 1e-9
PIVOT_TOL = 1e-9
DEGENERATE_RUN = 50
REFACTOR_AGE = 100


class LPError(RuntimeError):
    pass


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None
    value: float
    iterations: int


@dataclass
class Basis:
    """Warm-start state: basic column per row and nonbasic-at-upper flags.

    ``binv`` is the basis inverse when known and ``age`` counts pivots
    since it was last computed from scratch.
    """

    basis: np.ndarray
    at_upper: np.ndarray
    binv: np.ndarray | None = None
    age: int = 0


class _Tableau:
    def __init__(self, T, x, basis, lo, hi):
        self.T = T
        self.x = x
        self.basis = basis
        self.lo = lo
        self.hi = hi
        m, n = T.shape
        self.is_basic = np.zeros(n, dtype=bool)
        self.is_basic[basis] = True
        self.at_upper = np.zeros(n, dtype=bool)
        self.iterations = 0

    def _pivot(self, r: int, j: int, d: np.ndarray) -> None:
        T = self.T
        leaving = self.basis[r]
        self.is_basic[leaving] = False
        self.is_basic[j] = True
        self.at_upper[j] = False
        self.basis[r] = j
        pivot_row = T[r] / T[r, j]
        col = T[:, j].copy()
        T -= np.outer(col, pivot_row)
        T[r] = pivot_row
        d -= d[j] * pivot_row

    def run(self, cost: np.ndarray, max_iter: int) -> None:
        """Primal simplex from a primal feasible basis."""
        T, x, lo, hi = self.T, self.x, self.lo, self.hi
        d = cost - cost[self.basis] @ T
        bland = False
        degenerate = 0
        movable = hi > lo
        while True:
            if self.iterations >= max_iter:
                raise LPError(f"simplex did not converge in {max_iter} iterations")
            nb = ~self.is_basic & movable
            inc = nb & ~self.at_upper & (d < -FEAS_TOL)
            dec = nb & self.at_upper & (d > FEAS_TOL)
            eligible = inc | dec
            if not eligible.any():
                return
            if bland:
                j = int(np.flatnonzero(eligible)[0])
            else:
                j = int(np.argmax(np.where(eligible, np.abs(d), -1.0)))
            direction = 1.0 if inc[j] else -1.0
            delta = -direction * T[:, j]
            xb = x[self.basis]
            lob, hib = lo[self.basis], hi[self.basis]
            ratios = np.full(delta.shape, np.inf)
            down = delta < -PIVOT_TOL
            up = delta > PIVOT_TOL
            ratios[down] = np.maximum(xb[down] - lob[down], 0.0) / -delta[down]
            with np.errstate(invalid="ignore"):
                ratios[up] = np.maximum(hib[up] - xb[up], 0.0) / delta[up]
            t_flip = hi[j] - lo[j]
            t_row = ratios.min() if ratios.size else np.inf
            if not np.isfinite(t_row) and not np.isfinite(t_flip):
                raise LPError("relaxation is unbounded")
            self.iterations += 1
            if t_flip <= t_row:
                x[self.basis] += delta * t_flip
                x[j] = hi[j] if direction > 0 else lo[j]
                self.at_upper[j] = direction > 0
                degenerate = 0
                bland = False
                continue
            ties = np.flatnonzero(ratios <= t_row + 1e-12)
            if bland:
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                r = int(ties[np.argmax(np.abs(delta[ties]))])
            t = t_row
            x[self.basis] += delta * t
            x[j] += direction * t
            leaving = self.basis[r]
            hit_upper = delta[r] > 0
            x[leaving] = hi[leaving] if hit_upper else lo[leaving]
            self._pivot(r, j, d)
            self.at_upper[leaving] = hit_upper

            if t < 1e-12:
                degenerate += 1
                if degenerate >= DEGENERATE_RUN:
                    bland = True
            else:
                degenerate = 0
                bland = False

    def refresh(self, A: np.ndarray, b: np.ndarray) -> None:
        """Recompute basic values from the original system to shed drift."""
        nonbasic = ~self.is_basic
        rhs = b - A[:, nonbasic] @ self.x[nonbasic]
        try:
            self.x[self.basis] = np.linalg.solve(A[:, self.basis], rhs)
        except np.linalg.LinAlgError:
            pass


class BoundedLP:
    """A fixed constraint system ``A x (senses) b`` re-solvable under new bounds."""

    def __init__(self, c, A, senses, b):
        self.c = np.asarray(c, dtype=float)
        n = self.c.size
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[1] != n:
            raise ValueError(f"A has {A.shape[1]} columns for {n} costs")
        self.A = A
        self.b = np.asarray(b, dtype=float)
        m = A.shape[0]
        self.senses = list(senses)
        sign = np.array([{"<=": 1.0, ">=": -1.0, "=": 0.0}[s] for s in self.senses])
        self.slack_sign = sign
        slack_rows = np.flatnonzero(sign)
        self.n, self.m, self.n_slack = n, m, slack_rows.size
        S = np.zeros((m, self.n_slack))
        S[slack_rows, np.arange(self.n_slack)] = sign[slack_rows]
        self.slack_of_row = np.full(m, -1)
        self.slack_of_row[slack_rows] = n + np.arange(self.n_slack)
        # One artificial per row; unused ones stay pinned at zero.
        self.A0 = np.hstack([A, S, np.eye(m)])
        self.N = self.A0.shape[1]
        self._AT = sparse.csr_matrix(self.A0.T)
        self.cost = np.concatenate([self.c, np.zeros(self.n_slack + m)])
        self.scale = 1.0 + float(np.abs(self.b).max(initial=0.0))

    def _bounds(self, lo, hi, art_hi):
        lo_all = np.concatenate([lo, np.zeros(self.n_slack + self.m)])
        hi_all = np.concatenate([hi, np.full(self.n_slack, np.inf), art_hi])
        return lo_all, hi_all

    def _limit(self, max_iter):
        return max_iter or 50 * (self.m + self.N) + 1000

    def _result(self, tab: _Tableau, lo, hi) -> tuple[LPResult, Basis]:
        xs = np.clip(tab.x[: self.n], lo, hi)
        state = Basis(tab.basis.copy(), tab.at_upper.copy())
        return LPResult("optimal", xs, float(self.c @ xs), tab.iterations), state

    def solve(self, lo, hi, max_iter: int | None = None) -> tuple[LPResult, Basis | None]:
        """Two-phase primal simplex from a slack/artificial basis."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(lo > hi + FEAS_TOL):
            return LPResult("infeasible", None, np.inf, 0), None
        m, n = self.m, self.n
        resid = self.b - self.A @ lo
        sign = self.slack_sign
        basis = np.empty(m, dtype=int)
        values = np.empty(m)
        flip = np.ones(m)
        art_hi = np.zeros(m)
        art_base = n + self.n_slack
        for i in range(m):
            s = sign[i]
            if s != 0 and resid[i] * s >= 0:
                basis[i] = self.slack_of_row[i]
                values[i] = resid[i] * s
                flip[i] = s
            else:
                flip[i] = 1.0 if resid[i] >= 0 else -1.0
                basis[i] = art_base + i
                values[i] = abs(resid[i])
                art_hi[i] = np.inf
        # Rows are sign-flipped so the starting basis is the identity.
        A0 = self.A0 * flip[:, None]
        A0[:, art_base:] = np.eye(m)
        b0 = self.b * flip
        lo_all, hi_all = self._bounds(lo, hi, art_hi)
        x = np.concatenate([lo, np.zeros(self.n_slack + m)])
        x[basis] = values
        tab = _Tableau(A0.copy(), x, basis, lo_all, hi_all)
        limit = self._limit(max_iter)
        n_art = int(np.isinf(art_hi).sum())
        if n_art:
            cost1 = np.zeros(self.N)
            cost1[art_base:] = np.isinf(art_hi).astype(float)
            tab.run(cost1, limit)
            tab.refresh(A0, b0)
            if tab.x[art_base:].sum() > 1e-7 * self.scale:
                return LPResult("infeasible", None, np.inf, tab.iterations), None
            # Artificials are pinned at zero from here on.
            tab.hi[art_base:] = 0.0
            tab.x[art_base:] = 0.0
        tab.run(self.cost, limit)
        tab.refresh(A0, b0)
        return self._result(tab, lo, hi)

    def resolve(self, start: Basis, lo, hi, max_iter: int | None = None
                ) -> tuple[LPResult, Basis | None]:
        """Re-solve under new bounds from ``start`` by revised dual simplex.

        Only the basis inverse is updated per pivot.  Falls back to a cold
        solve on a singular basis or an iteration limit.
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(lo > hi + FEAS_TOL):
            return LPResult("infeasible", None, np.inf, 0), None
        basis = start.basis.copy()
        binv, age = start.binv, start.age
        if binv is None or age > REFACTOR_AGE:
            try:
                binv = np.linalg.inv(self.A0[:, basis])
            except np.linalg.LinAlgError:
                return self.solve(lo, hi, max_iter)
            age = 0
        else:
            binv = binv.copy()
        lo_all, hi_all = self._bounds(lo, hi, np.zeros(self.m))
        finite_hi = np.isfinite(hi_all)
        is_basic = np.zeros(self.N, dtype=bool)
        is_basic[basis] = True
        movable = (hi_all > lo_all) & ~is_basic
        d = self.cost - self._AT @ (self.cost[basis] @ binv)
        at_upper = start.at_upper & ~is_basic & finite_hi
        # Finite-bound columns with the wrong reduced-cost sign flip to the other bound.
        at_upper |= movable & (d < -FEAS_TOL) & finite_hi
        at_upper &= ~(movable & (d > FEAS_TOL))
        if np.any(movable & ~at_upper & (d < -FEAS_TOL)):
            return self.solve(lo, hi, max_iter)
        x = np.where(at_upper, hi_all, lo_all)
        x[basis] = 0.0
        x[basis] = binv @ (self.b - self.A0 @ x)

        tol = FEAS_TOL * self.scale
        limit = self._limit(max_iter)
        iterations = 0
        while self.m:
            xb = x[basis]
            below = lo_all[basis] - xb
            above = xb - hi_all[basis]
            worst = np.maximum(below, above)
            r = int(np.argmax(worst))
            if worst[r] <= tol:
                break
            if iterations >= limit:
                return self.solve(lo, hi, max_iter)
            row = self._AT @ binv[r]
            raise_it = below[r] > 0
            sgn = -1.0 if raise_it else 1.0
            # Entering columns must move x_r toward its violated bound.
            eligible = movable & np.where(at_upper, sgn * row < -PIVOT_TOL, sgn * row > PIVOT_TOL)
            cand = np.flatnonzero(eligible)
            if cand.size == 0:
                return LPResult("infeasible", None, np.inf, iterations), None
            ratios = np.abs(d[cand]) / np.abs(row[cand])
            ties = cand[ratios <= ratios.min() + 1e-12]
            j = int(ties[np.argmax(np.abs(row[ties]))])
            col = binv @ self.A0[:, j]
            piv = col[r]
            leaving = basis[r]
            target = lo_all[leaving] if raise_it else hi_all[leaving]
            step = (xb[r] - target) / piv
            x[basis] -= col * step
            x[j] += step
            x[leaving] = target
            pivot_row = binv[r] / piv
            binv -= np.outer(col, pivot_row)
            binv[r] = pivot_row
            d -= d[j] * (row / piv)
            d[j] = 0.0
            basis[r] = j
            is_basic[j], is_basic[leaving] = True, False
            movable[j] = False
            movable[leaving] = hi_all[leaving] > lo_all[leaving]
            at_upper[j] = False
            at_upper[leaving] = not raise_it
            iterations += 1

        d = self.cost - self._AT @ (self.cost[basis] @ binv)
        nb = movable
        if np.any(nb & ~at_upper & (d < -FEAS_TOL)) or np.any(nb & at_upper & (d > FEAS_TOL)):
            # Drift left the basis slightly suboptimal: finish with primal pivots.
            tab = _Tableau(binv @ self.A0, x, basis, lo_all, hi_all)
            tab.at_upper = at_upper
            tab.iterations = iterations
            try:
                tab.run(self.cost, limit)
            except LPError:
                return self.solve(lo, hi, max_iter)
            basis, at_upper, iterations = tab.basis, tab.at_upper, tab.iterations
            binv = tab.T[:, self.n + self.n_slack:].copy()
            is_basic = tab.is_basic
        nonbasic = ~is_basic
        x[basis] = binv @ (self.b - self.A0[:, nonbasic] @ x[nonbasic])
        xs = np.clip(x[: self.n], lo, hi)
        state = Basis(basis.copy(), at_upper.copy(), binv, age + iterations)
        return LPResult("optimal", xs, float(self.c @ xs), iterations), state


def solve_lp(c, A, senses, b, lo=None, hi=None, max_iter: int | None = None) -> LPResult:
    """Solve a bounded LP; status is ``optimal`` or ``infeasible``."""
    c = np.asarray(c, dtype=float)
    n = c.size
    lo = np.zeros(n) if lo is None else np.asarray(lo, dtype=float)
    hi = np.full(n, np.inf) if hi is None else np.asarray(hi, dtype=float)
    return BoundedLP(c, A, senses, b).solve(lo, hi, max_iter)[0]
