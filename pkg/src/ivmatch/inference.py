"""Randomization inference for matched pairs with a binary outcome.

The short-HOB unit of each pair is the treated unit and the long-HOB unit
is the control.  All P-values come from exact binomial tails evaluated in
log space, so values far below the double-precision underflow of a naive
sum (e.g. 1e-45) are still reported accurately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

TREATED_CAUSES = "treated_causes"
CONTROL_CAUSES = "control_causes"
DIRECTIONS = (TREATED_CAUSES, CONTROL_CAUSES)


class IncompatibleHypothesisError(ValueError):
    """The hypothesized attributable effect cannot have produced the data."""


# --------------------------------------------------------------------------
# exact binomial tails


def _log1mexp(x: float) -> float:
    """log(1 - exp(x)) for x <= 0."""
    if x >= 0.0:
        return -math.inf
    if x > -math.log(2.0):
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def _log_pmf(ks: np.ndarray, n: int, p: float) -> np.ndarray:
    ks = np.asarray(ks, dtype=float)
    return (gammaln(n + 1.0) - gammaln(ks + 1.0) - gammaln(n - ks + 1.0)
            + ks * math.log(p) + (n - ks) * math.log1p(-p))


def _log_tail_sum(start: int, stop: int, step: int, n: int, p: float) -> float:
    # Terms shrink monotonically moving away from the mode, so summation
    # can stop once a chunk no longer changes the total in double precision.
    total = -math.inf
    chunk = 256
    k = start
    while (step < 0 and k >= stop) or (step > 0 and k <= stop):
        end = max(k - chunk + 1, stop) if step < 0 else min(k + chunk - 1, stop)
        ks = np.arange(k, end + step, step)
        terms = _log_pmf(ks, n, p)
        chunk_sum = float(logsumexp(terms))
        total = float(np.logaddexp(total, chunk_sum))
        if terms[-1] < total - 45.0:
            break
        k = end + step
        chunk *= 2
    return total


def binom_logcdf(k: int, n: int, p: float) -> float:
    """log P(X <= k) for X ~ Binomial(n, p)."""
    if k < 0:
        return -math.inf
    if k >= n:
        return 0.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return -math.inf
    mode = math.floor((n + 1) * p)
    if k < mode:
        return _log_tail_sum(k, 0, -1, n, p)
    return _log1mexp(binom_logsf(k, n, p))


def binom_logsf(k: int, n: int, p: float) -> float:
    """log P(X > k) for X ~ Binomial(n, p)."""
    if k < 0:
        return 0.0
    if k >= n:
        return -math.inf
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return 0.0
    mode = math.floor((n + 1) * p)
    if k + 1 > mode:
        return _log_tail_sum(k + 1, n, 1, n, p)
    return _log1mexp(binom_logcdf(k, n, p))


def binom_cdf(k: int, n: int, p: float) -> float:
    return math.exp(binom_logcdf(k, n, p))


def binom_sf(k: int, n: int, p: float) -> float:
    """P(X >= k + 1)."""
    return math.exp(binom_logsf(k, n, p))


# --------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class PairedOutcomeTable:
    """Pair counts by outcome; treated is the short-HOB side.

    ``d_t`` counts discordant pairs in which only the treated unit had the
    event, ``d_c`` those in which only the control unit had it.
    """

    n11: int
    d_t: int
    d_c: int
    n00: int

    def __post_init__(self):
        for name in ("n11", "d_t", "d_c", "n00"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {value!r}")

    @property
    def pairs(self) -> int:
        return self.n11 + self.d_t + self.d_c + self.n00

    @property
    def discordant(self) -> int:
        return self.d_t + self.d_c

    @property
    def treated_events(self) -> int:
        return self.n11 + self.d_t

    @property
    def control_events(self) -> int:
        return self.n11 + self.d_c

    def as_grid(self) -> list[list[int]]:
        """Rows: control (long) not/readmitted; columns: treated (short)."""
        return [[self.n00, self.d_t], [self.d_c, self.n11]]


@dataclass(frozen=True)
class AttributableHypothesis:
    delta0: int
    direction: str = TREATED_CAUSES

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if int(self.delta0) != self.delta0 or self.delta0 < 0:
            raise ValueError(f"delta0 must be a nonnegative integer, got {self.delta0!r}")

    def compatible_with(self, table: PairedOutcomeTable) -> bool:
        events = table.treated_events if self.direction == TREATED_CAUSES else table.control_events
        return self.delta0 <= events


@dataclass(frozen=True)
class SensitivityResult:
    gamma: float
    p_upper: float
    p_lower: float
    log10_p_upper: float = float("nan")
    log10_p_lower: float = float("nan")


def tabulate(study, outcome_field: str = "outcome") -> PairedOutcomeTable:
    """Cross-tabulate a binary outcome over the oriented pairs of ``study``.

    ``study.pairs`` must yield objects with ``long`` and ``short`` units.
    """
    n11 = d_t = d_c = n00 = 0
    for pair in study.pairs:
        r_short = _outcome_of(pair.short, outcome_field)
        r_long = _outcome_of(pair.long, outcome_field)
        if r_short is None or r_long is None:
            raise ValueError(
                f"missing outcome in pair ({pair.long.id}, {pair.short.id})")
        if r_short and r_long:
            n11 += 1
        elif r_short:
            d_t += 1
        elif r_long:
            d_c += 1
        else:
            n00 += 1
    return PairedOutcomeTable(n11=n11, d_t=d_t, d_c=d_c, n00=n00)


def _outcome_of(unit, outcome_field: str):
    if outcome_field == "outcome":
        value = unit.outcome
    else:
        value = unit.attributes.get(outcome_field)
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    if value not in (0, 1):
        raise ValueError(f"outcome of unit {unit.id} is not binary: {value!r}")
    return int(value)


# --------------------------------------------------------------------------
# tests


@dataclass(frozen=True)
class McNemarResult:
    p_value: float
    lower: float
    upper: float
    degenerate: bool = False


def mcnemar_test(table: PairedOutcomeTable, sided: str = "two") -> float:
    """Exact McNemar test of no effect.

    One-sided is the lower tail P(Bin(n10, 1/2) <= d_t); two-sided doubles
    the smaller tail and caps at 1.  Returns 1.0 when there are no
    discordant pairs (see :func:`mcnemar_details` for the flag).
    """
    res = mcnemar_details(table)
    if sided == "two":
        return res.p_value
    if sided in ("one", "lower"):
        return res.lower
    if sided == "upper":
        return res.upper
    raise ValueError(f"sided must be 'one', 'upper' or 'two', got {sided!r}")


def mcnemar_details(table: PairedOutcomeTable, gamma: float = 1.0) -> McNemarResult:
    n10 = table.discordant
    if n10 == 0:
        return McNemarResult(1.0, 1.0, 1.0, degenerate=True)
    # Upper bounds on each one-sided tail under bias at most gamma.
    lower = binom_cdf(table.d_t, n10, 1.0 / (1.0 + gamma))
    upper = math.exp(binom_logsf(table.d_t - 1, n10, gamma / (1.0 + gamma)))
    return McNemarResult(min(1.0, 2.0 * min(lower, upper)), lower, upper)


def mcnemar_bounds(table: PairedOutcomeTable, gamma: float = 1.0) -> tuple[float, float]:
    """Upper and lower bounds on the two-sided McNemar P-value under bias gamma."""
    hi = mcnemar_details(table, gamma).p_value
    n10 = table.discordant
    if n10 == 0:
        return hi, hi
    lower = binom_cdf(table.d_t, n10, gamma / (1.0 + gamma))
    upper = math.exp(binom_logsf(table.d_t - 1, n10, 1.0 / (1.0 + gamma)))
    return hi, min(1.0, 2.0 * min(lower, upper))


def mcnemar_normal_approx(table: PairedOutcomeTable) -> float:
    """Two-sided normal approximation, only as a cross-check diagnostic."""
    from scipy.stats import norm

    n10 = table.discordant
    if n10 == 0:
        return 1.0
    z = (table.d_t - n10 / 2.0) / math.sqrt(n10 / 4.0)
    return float(min(1.0, 2.0 * norm.sf(abs(z))))


def adjust_table(table: PairedOutcomeTable, hyp: AttributableHypothesis,
                 gamma: float = 1.0) -> PairedOutcomeTable:
    """Table of responses under control for the least-rejectable hypothesis.

    Each attributed event comes either from a pair where both units had the
    event, which turns that pair discordant the other way, or from a pair
    where only the causing side had it, which turns that pair concordant at
    zero.  The upper P-value bound at ``gamma`` depends only on how many
    come from the first kind, and is largest at one of the two extremes, so
    both are evaluated.  Ties keep the table that uses as many
    both-event pairs as possible.
    """
    if not hyp.compatible_with(table):
        raise IncompatibleHypothesisError(
            f"delta0={hyp.delta0} exceeds the {hyp.direction} events in the table")
    own = table.d_t if hyp.direction == TREATED_CAUSES else table.d_c
    k_hi = min(hyp.delta0, table.n11)
    k_lo = max(0, hyp.delta0 - own)
    best = _adjusted(table, hyp, k_hi)
    if k_lo < k_hi:
        other = _adjusted(table, hyp, k_lo)
        if _log_upper(other, hyp.direction, gamma) > _log_upper(best, hyp.direction, gamma) + 1e-12:
            best = other
    return best


def _adjusted(table: PairedOutcomeTable, hyp: AttributableHypothesis, k: int) -> PairedOutcomeTable:
    rest = hyp.delta0 - k
    if hyp.direction == TREATED_CAUSES:
        return PairedOutcomeTable(n11=table.n11 - k, d_t=table.d_t - rest,
                                  d_c=table.d_c + k, n00=table.n00 + rest)
    return PairedOutcomeTable(n11=table.n11 - k, d_t=table.d_t + k,
                              d_c=table.d_c - rest, n00=table.n00 + rest)


def _log_upper(adjusted: PairedOutcomeTable, direction: str, gamma: float) -> float:
    k = causing_side_events(adjusted, direction) - adjusted.n11
    return binom_logcdf(k, adjusted.discordant, 1.0 / (1.0 + gamma))


def causing_side_events(table: PairedOutcomeTable, direction: str) -> int:
    """Events on the causing side; equals T - delta0 after adjustment."""
    return table.treated_events if direction == TREATED_CAUSES else table.control_events


def attributable_test(table: PairedOutcomeTable, hyp: AttributableHypothesis,
                      gamma: float = 1.0) -> SensitivityResult:
    """Bounds on the one-sided P-value for ``hyp`` under bias at most gamma."""
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    adjusted = adjust_table(table, hyp, gamma)
    t_c = causing_side_events(adjusted, hyp.direction)
    k = t_c - adjusted.n11
    n10 = adjusted.discordant
    log_hi = binom_logcdf(k, n10, 1.0 / (1.0 + gamma))
    log_lo = binom_logcdf(k, n10, gamma / (1.0 + gamma))
    return SensitivityResult(gamma=gamma, p_upper=math.exp(log_hi), p_lower=math.exp(log_lo),
                             log10_p_upper=log_hi / math.log(10.0),
                             log10_p_lower=log_lo / math.log(10.0))


@dataclass
class PartResult:
    name: str
    gamma: float
    p_value: float
    rejected: bool
    incompatible: bool = False
    log10_p: float = float("nan")


@dataclass
class ThreePartResult:
    delta0: int
    alpha: float
    parts: list[PartResult] = field(default_factory=list)

    def at(self, gamma: float) -> dict[str, PartResult]:
        return {p.name: p for p in self.parts if p.gamma == gamma}

    def verdict(self, gamma: float = 1.0) -> str:
        parts = self.at(gamma)
        bits = []
        no_effect = parts["no_effect"]
        bits.append("no effect rejected" if no_effect.rejected else "no effect plausible")
        harm = parts[TREATED_CAUSES].rejected
        benefit = parts[CONTROL_CAUSES].rejected
        if harm and benefit:
            bits.append(f"effects >= {self.delta0} in either direction implausible")
        elif harm:
            bits.append(f"treated-caused effect >= {self.delta0} implausible")
        elif benefit:
            bits.append(f"control-caused effect >= {self.delta0} implausible")
        else:
            bits.append(f"effects >= {self.delta0} not ruled out")
        return "; ".join(bits)


def three_part_test(table: PairedOutcomeTable, delta0: int, alpha: float = 0.05,
                    gammas: Sequence[float] = (1.0,)) -> ThreePartResult:
    """No effect, treated causes >= delta0, control causes >= delta0.

    The three nulls are mutually incompatible, so each is tested at level
    alpha with no multiplicity correction.  Incompatible parts are rejected
    with P = 0.
    """
    if delta0 <= 0:
        raise ValueError("delta0 must be positive for the three part test")
    result = ThreePartResult(delta0=int(delta0), alpha=alpha)
    for gamma in gammas:
        p0 = mcnemar_details(table, gamma).p_value
        result.parts.append(PartResult("no_effect", gamma, p0, p0 <= alpha,
                                       log10_p=_log10(p0)))
        for direction in DIRECTIONS:
            hyp = AttributableHypothesis(int(delta0), direction)
            if not hyp.compatible_with(table):
                result.parts.append(PartResult(direction, gamma, 0.0, True,
                                               incompatible=True, log10_p=-math.inf))
                continue
            sens = attributable_test(table, hyp, gamma)
            result.parts.append(PartResult(direction, gamma, sens.p_upper,
                                           sens.p_upper <= alpha,
                                           log10_p=sens.log10_p_upper))
    return result


def _log10(p: float) -> float:
    return math.log10(p) if p > 0 else -math.inf


def sensitivity_curve(table: PairedOutcomeTable, hyp: AttributableHypothesis,
                      gammas: Iterable[float]) -> list[SensitivityResult]:
    return [attributable_test(table, hyp, g) for g in gammas]


def tipping_gamma(curve: Sequence[SensitivityResult], alpha: float) -> float | None:
    """Smallest grid gamma whose upper P-value bound exceeds alpha."""
    for res in sorted(curve, key=lambda r: r.gamma):
        if res.p_upper > alpha:
            return res.gamma
    return None


def amplify(lam: float, delta: float) -> float:
    """Gamma equivalent to a confounder with treatment odds ratio ``lam``
    and outcome odds ratio ``delta``."""
    if lam <= 1 or delta <= 1:
        raise ValueError(f"both parameters must exceed 1, got ({lam}, {delta})")
    return (lam * delta + 1.0) / (lam + delta)


def resolve_delta0(pairs: int, count: int | None = None, fraction: float | None = None) -> int:
    """Attributable effect as a count, from an explicit count or a fraction of pairs."""
    if count is not None and fraction is not None:
        raise ValueError("give delta0 as a count or as a fraction, not both")
    if count is not None:
        return int(count)
    if fraction is not None:
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"delta0 fraction must lie in [0, 1], got {fraction}")
        return int(math.floor(fraction * pairs + 0.5))
    return 0
