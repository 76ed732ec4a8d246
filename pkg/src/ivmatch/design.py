"""Build and solve one matching program per stratum; re-verify stored matches."""

from __future__ import annotations

import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import Cohort, Unit, stratify
from .config import CapRule, ConfigError, RunConfig
from .diagnostics import MatchedPair, MatchedStudy, StratumResult
from .distance import robust_mahalanobis
from .ipmodel import (BinaryMatchProgram, add_cap, add_fine_balance, add_mean_balance,
                      add_near_fine_balance, add_separation, new_program)
from .solver import OPTIMAL, SolverLimits, solve

log = logging.getLogger(__name__)

CHECK_TOL = 1e-6


@dataclass
class DesignStats:
    """Cohort-wide, pre-match quantities shared by all strata."""

    mean_balance_eps: dict[str, float]
    distance_covariates: list[str]


@dataclass
class StratumJob:
    key: tuple[str, ...]
    units: list[Unit]


def design_stats(cohort: Cohort | Sequence[Unit], config: RunConfig) -> DesignStats:
    units = list(cohort)
    names = cohort.covariate_names if isinstance(cohort, Cohort) else (
        list(units[0].covariates) if units else [])
    eps = {}
    for name, value in config.match.mean_balance.items():
        if value is not None:
            eps[name] = value
            continue
        xs = [_numeric(u, name) for u in units]
        sd = statistics.stdev(xs) if len(xs) > 1 else 0.0
        eps[name] = config.match.mean_balance_sd_fraction * sd
    return DesignStats(mean_balance_eps=eps, distance_covariates=config.distance_covariates(names))


def _numeric(unit: Unit, name: str) -> float:
    value = unit.value(name)
    if value is None:
        raise ConfigError(f"unit {unit.id} has no value for {name!r}")
    return float(value)


def _candidate_mask(v: np.ndarray, hard: float) -> np.ndarray:
    return np.abs(v[:, None] - v[None, :]) >= hard


def partition(cohort: Cohort | Sequence[Unit], config: RunConfig) -> list[StratumJob]:
    """Exact-match strata, split by ``split_key`` where a stratum is too large."""
    jobs = []
    for stratum in stratify(cohort):
        units = stratum.units
        v = np.array([u.instrument_value for u in units], dtype=float)
        n_vars = int(np.triu(_candidate_mask(v, config.match.hard_separation), 1).sum())
        if n_vars <= config.match.max_variables:
            jobs.append(StratumJob(stratum.key, units))
            continue
        if not config.match.split_key:
            raise ConfigError(f"stratum {stratum.key} has {n_vars} candidate pairs, over the "
                              f"{config.match.max_variables} cap, and no split_key is set")
        log.warning("stratum %s has %d candidate pairs; splitting by %s",
                    stratum.key, n_vars, config.match.split_key)
        groups: dict[str, list[Unit]] = {}
        for u in units:
            groups.setdefault(str(u.value(config.match.split_key)), []).append(u)
        for value in sorted(groups):
            jobs.append(StratumJob(stratum.key + (value,), groups[value]))
    return jobs


def _indicator_rows(units: Sequence[Unit], name: str) -> dict[str, np.ndarray]:
    marks = [u.nominal_marks[name] for u in units]
    return {c: np.array([1.0 if x == c else 0.0 for x in marks]) for c in sorted(set(marks))}


def _cap_flags(units: Sequence[Unit], rule: CapRule) -> np.ndarray:
    if rule.kind == "mismatch":
        marks = np.array([u.nominal_marks[rule.field] for u in units], dtype=object)
        return (marks[:, None] != marks[None, :]).astype(float)
    x = np.array([_numeric(u, rule.field) for u in units])
    return (np.abs(x[:, None] - x[None, :]) < rule.below).astype(float)


def build_program(job: StratumJob, config: RunConfig, stats: DesignStats,
                  hard_separation: float | None = None) -> BinaryMatchProgram:
    units = job.units
    L = len(units)
    hard = config.match.hard_separation if hard_separation is None else hard_separation
    X = np.array([[u.covariates[c] for c in stats.distance_covariates] for u in units], dtype=float)
    dist = robust_mahalanobis(X, key=job.key, ids=[u.id for u in units])
    lam = dist.median() if config.match.lambda_rule == "median" else float(config.match.lambda_rule)
    v = np.array([u.instrument_value for u in units], dtype=float)
    prog = new_program(L, dist, lam, instrument=v, candidates=_candidate_mask(v, hard),
                       name="S_" + "_".join(job.key))
    for name in config.match.fine_balance:
        indicators = _indicator_rows(units, name)
        # C - 1 indicators suffice: both sides always hold the same number of units.
        for cat in list(indicators)[:-1]:
            add_fine_balance(prog, indicators[cat])
    for name, eps in config.match.near_fine_balance.items():
        for w in _indicator_rows(units, name).values():
            add_near_fine_balance(prog, w, eps)
    for rule in config.match.caps:
        add_cap(prog, _cap_flags(units, rule), rule.limit(L))
    for name, eps in stats.mean_balance_eps.items():
        if eps > 0:
            add_mean_balance(prog, [_numeric(u, name) for u in units], eps)
    if config.match.mean_separation is not None:
        add_separation(prog, v, config.match.mean_separation)
    return prog


def _solve_job(args) -> tuple[StratumResult, list[tuple[int, int]]]:
    job, config, stats, hard = args
    L = len(job.units)
    if L < 2:
        return StratumResult(job.key, L, 0, OPTIMAL, 0.0, 0.0, 0, 0, float("nan")), []
    prog = build_program(job, config, stats, hard)
    sol = solve(prog, SolverLimits(config.solver.node_limit, config.solver.time_limit))
    result = StratumResult(key=job.key, n_units=L, n_vars=prog.n_vars, status=sol.status,
                           objective=sol.objective, bound=sol.bound, nodes=sol.nodes,
                           n_pairs=len(sol.pairs), lam=prog.lam)
    return result, sol.pairs


def match_cohort(cohort: Cohort | Sequence[Unit], config: RunConfig,
                 hard_separation: float | None = None) -> MatchedStudy:
    """Solve every stratum and collect oriented pairs (long, short)."""
    units = list(cohort)
    stats = design_stats(cohort, config)
    jobs = partition(units, config)
    args = [(job, config, stats, hard_separation) for job in jobs]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(pool.map(_solve_job, args))
    else:
        outputs = [_solve_job(a) for a in args]

    pairs: list[MatchedPair] = []
    strata: list[StratumResult] = []
    for job, (result, local_pairs) in zip(jobs, outputs):
        strata.append(result)
        for long_i, short_i in sorted(local_pairs):
            pairs.append(MatchedPair(pair_id=len(pairs) + 1, long=job.units[long_i],
                                     short=job.units[short_i], stratum=job.key))
    return MatchedStudy(pairs=pairs, units=units, strata=strata,
                        covariate_names=list(cohort.covariate_names) if isinstance(cohort, Cohort)
                        else [])


def check_study(study: MatchedStudy, config: RunConfig,
                cohort: Cohort | Sequence[Unit] | None = None) -> list[str]:
    """Every constraint of the design, re-verified on the stored pairs.

    Returns human-readable violation messages; an empty list is a pass.
    """
    units = list(cohort) if cohort is not None else study.units
    stats = design_stats(cohort if cohort is not None else units, config)
    problems: list[str] = []
    seen: dict[str, int] = {}
    for p in study.pairs:
        for u in (p.long, p.short):
            if u.id in seen:
                problems.append(f"unit {u.id} appears in pairs {seen[u.id]} and {p.pair_id}")
            seen[u.id] = p.pair_id
        if tuple(p.long.exact_keys) != tuple(p.short.exact_keys):
            problems.append(f"pair {p.pair_id} crosses exact-match strata")
        gap = p.long.instrument_value - p.short.instrument_value
        if gap < config.match.hard_separation - CHECK_TOL:
            problems.append(f"pair {p.pair_id}: instrument gap {gap:g} below "
                            f"{config.match.hard_separation:g}")

    by_key: dict[tuple, list[MatchedPair]] = {}
    for p in study.pairs:
        by_key.setdefault(tuple(p.stratum), []).append(p)
    for job in partition(units, config):
        pairs = by_key.pop(tuple(job.key), [])
        problems += _check_stratum(job, pairs, config, stats)
    for key in by_key:
        problems.append(f"pairs reference unknown stratum {key}")
    return problems


def _check_stratum(job: StratumJob, pairs: list[MatchedPair], config: RunConfig,
                   stats: DesignStats) -> list[str]:
    out = []
    label = "|".join(job.key)
    members = {u.id for u in job.units}
    for p in pairs:
        if p.long.id not in members or p.short.id not in members:
            out.append(f"[{label}] pair {p.pair_id} uses units outside the stratum")
    if not pairs:
        return out
    longs = [p.long for p in pairs]
    shorts = [p.short for p in pairs]
    for name in config.match.fine_balance:
        for cat in sorted({u.nominal_marks[name] for u in job.units}):
            a = sum(u.nominal_marks[name] == cat for u in longs)
            b = sum(u.nominal_marks[name] == cat for u in shorts)
            if a != b:
                out.append(f"[{label}] fine balance {name}={cat}: long {a} vs short {b}")
    for name, eps in config.match.near_fine_balance.items():
        for cat in sorted({u.nominal_marks[name] for u in job.units}):
            a = sum(u.nominal_marks[name] == cat for u in longs)
            b = sum(u.nominal_marks[name] == cat for u in shorts)
            if abs(a - b) > eps:
                out.append(f"[{label}] near-fine balance {name}={cat}: |{a} - {b}| > {eps}")
    for rule in config.match.caps:
        flagged = 0
        for p in pairs:
            if rule.kind == "mismatch":
                flagged += p.long.nominal_marks[rule.field] != p.short.nominal_marks[rule.field]
            else:
                flagged += abs(_numeric(p.long, rule.field) - _numeric(p.short, rule.field)) < rule.below
        limit = rule.limit(len(job.units))
        if flagged > limit:
            out.append(f"[{label}] cap on {rule.field}: {flagged} flagged pairs > {limit}")
    n = len(pairs)
    for name, eps in stats.mean_balance_eps.items():
        if eps <= 0:
            continue
        diff = sum(_numeric(p.long, name) - _numeric(p.short, name) for p in pairs) / n
        if abs(diff) > eps * (1 + CHECK_TOL) + CHECK_TOL:
            out.append(f"[{label}] mean of {name} differs by {diff:.6g} > {eps:.6g}")
    if config.match.mean_separation is not None:
        sep = sum(p.long.instrument_value - p.short.instrument_value for p in pairs) / n
        if sep < config.match.mean_separation - CHECK_TOL:
            out.append(f"[{label}] mean instrument separation {sep:.6g} < "
                       f"{config.match.mean_separation:g}")
    return out
