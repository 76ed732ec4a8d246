"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a PASS/FAIL line that is printed in the pytest summary.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np

from acceptance_log import record
from instances import random_program
from ivmatch.cli import load_cohort
from ivmatch.config import load_config, parse_config
from ivmatch.design import check_study, match_cohort
from ivmatch.diagnostics import separation_sweep
from ivmatch.inference import (CONTROL_CAUSES, TREATED_CAUSES, AttributableHypothesis,
                               PairedOutcomeTable, adjust_table, amplify, attributable_test,
                               causing_side_events, mcnemar_test)
from ivmatch.ipmodel import new_program
from ivmatch.solver import INFEASIBLE, OPTIMAL, solve
from ivmatch.synthetic import SCHEMA, cohort_csv
from oracles import brute_force, matchings, permutation_lower_tail

REFERENCE = PairedOutcomeTable(n11=29, d_t=1032, d_c=1108, n00=78431)
HARM = AttributableHypothesis(500, TREATED_CAUSES)
BENEFIT = AttributableHypothesis(500, CONTROL_CAUSES)


def check(number, name, ok, detail):
    record(number, name, bool(ok), detail)
    assert ok, detail


def test_01_mcnemar_reproduction():
    start = time.perf_counter()
    p = mcnemar_test(REFERENCE)
    elapsed = time.perf_counter() - start
    check(1, "McNemar two-sided P on the reference table",
          abs(p - 0.105) <= 0.003 and elapsed < 1.0, f"P={p:.4f}, {elapsed * 1000:.1f} ms")


def test_02_adjusted_table():
    adj = adjust_table(REFERENCE, HARM)
    cells = (adj.n00, adj.d_t, adj.d_c, adj.n11)
    check(2, "adjusted table for 500 treated-caused events", cells == (78902, 561, 1137, 0),
          f"(n00, dT, dC, n11)={cells}")


def test_03_attributable_p_values():
    harm = attributable_test(REFERENCE, HARM, 1.0).log10_p_upper
    benefit = attributable_test(REFERENCE, BENEFIT, 1.0).log10_p_upper
    ok = abs(harm - math.log10(2.1e-45)) <= 1 and abs(benefit - math.log10(2.9e-25)) <= 1
    check(3, "attributable-effect P-values at Gamma=1", ok,
          f"treated 10^{harm:.3f}, control 10^{benefit:.3f}")


def test_04_sensitivity_bounds():
    got = {
        ("treated", 1.85): (attributable_test(REFERENCE, HARM, 1.85).p_upper, 0.040, 0.005),
        ("treated", 1.9): (attributable_test(REFERENCE, HARM, 1.9).p_upper, 0.110, 0.010),
        ("control", 1.5): (attributable_test(REFERENCE, BENEFIT, 1.5).p_upper, 0.0192, 0.005),
        ("control", 1.55): (attributable_test(REFERENCE, BENEFIT, 1.55).p_upper, 0.079, 0.010),
    }
    ok = all(abs(v - target) <= tol for v, target, tol in got.values())
    detail = ", ".join(f"{d}@{g}={v:.4f}" for (d, g), (v, _, _) in got.items())
    check(4, "sensitivity upper bounds", ok, detail)


def test_05_amplification():
    a, b = amplify(2, 2), amplify(2, 4)
    check(5, "amplification", a == 1.25 and b == 1.5, f"amplify(2,2)={a}, amplify(2,4)={b}")


def test_06_solver_exactness():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    mismatches, infeasible, n = [], 0, 1000
    for k in range(n):
        prog = random_program(rng, int(rng.integers(2, 9)))
        ref, _ = brute_force(prog)
        sol = solve(prog)
        if ref is None:
            infeasible += 1
            if sol.status != INFEASIBLE:
                mismatches.append((k, "feasibility"))
        elif sol.status != OPTIMAL or abs(sol.objective - ref) > 1e-6:
            mismatches.append((k, sol.status, sol.objective, ref))
    elapsed = time.perf_counter() - start
    check(6, "solver matches brute force on random L<=8 programs",
          not mismatches and elapsed < 120,
          f"{n} instances, {infeasible} infeasible, {len(mismatches)} discrepancies, {elapsed:.1f} s")


FULL_MATCH = {"hard_separation": 12, "mean_separation": 13, "lambda": "median",
              "fine_balance": ["race"], "near_fine_balance": {"lbw": 1},
              "caps": [{"kind": "mismatch", "field": "lbw", "fraction": 0.2}],
              "mean_balance": {"weight": None}}


def test_07_constraint_semantics(tmp_path):
    start = time.perf_counter()
    notes, ok = [], True
    for n_units, n_strata, seed in [(200, 3, 11), (400, 8, 12), (600, 10, 13)]:
        path = tmp_path / f"c{n_units}.csv"
        path.write_text(cohort_csv(n_units, n_strata, seed))
        config = parse_config({"input": {"path": path.name, "schema": SCHEMA},
                               "match": FULL_MATCH}, tmp_path)
        cohort = load_cohort(config, read_outcome=False)
        study = match_cohort(cohort, config)
        statuses = {s.status for s in study.strata}
        problems = check_study(study, config, cohort)
        gaps = [p.long.instrument_value - p.short.instrument_value for p in study.pairs]
        ok &= statuses == {OPTIMAL} and not problems and min(gaps, default=12) >= 12
        notes.append(f"{n_units}/{n_strata}: {len(study.pairs)} pairs, {len(problems)} problems")
    elapsed = time.perf_counter() - start
    check(7, "solved synthetic studies pass check", ok and elapsed < 60,
          "; ".join(notes) + f"; {elapsed:.1f} s")


def test_08_optimal_subsetting_crossover():
    # (0,1) costs 2 and (2,3) costs 10; every other pair costs 7.
    omega = np.full((4, 4), 7.0)
    np.fill_diagonal(omega, 0.0)
    omega[0, 1] = omega[1, 0] = 2.0
    omega[2, 3] = omega[3, 2] = 10.0
    chosen = {}
    for lam in (9.0, 11.0):
        prog = new_program(4, omega, lam)
        sol = solve(prog)
        best = min(matchings(prog.index.pairs), key=lambda m: prog.value(prog.assignment(m)))
        assert sorted(sol.pairs) == sorted(best)
        chosen[lam] = sorted(tuple(sorted(p)) for p in sol.pairs)
    ok = chosen[9.0] == [(0, 1)] and chosen[11.0] == [(0, 1), (2, 3)]
    check(8, "optimal subsetting flips across lambda = 10", ok,
          f"lambda 9 -> {chosen[9.0]}, lambda 11 -> {chosen[11.0]}")


def test_09_sweep_monotone(tmp_path):
    from importlib import resources
    data = resources.files("ivmatch") / "data"
    for name in ("example.yaml", "synthetic_60.csv"):
        (tmp_path / name).write_bytes((data / name).read_bytes())
    config = load_config(tmp_path / "example.yaml")
    cohort = load_cohort(config, read_outcome=False)
    _, cols = separation_sweep(cohort, config, [0, 9, 12, 15])
    counts = [c.pairs for c in cols]
    ok = None not in counts and all(a >= b for a, b in zip(counts, counts[1:]))
    check(9, "sweep pair counts non-increasing over 0/9/12/15", ok, f"pairs {counts}")


def _unit_level_max(table, delta0, direction):
    pairs = ([(1, 1)] * table.n11 + [(1, 0)] * table.d_t + [(0, 1)] * table.d_c
             + [(0, 0)] * table.n00)
    side = 0 if direction == TREATED_CAUSES else 1
    carriers = [i for i, p in enumerate(pairs) if p[side] == 1]
    best = Fraction(-1)
    for chosen in itertools.combinations(carriers, delta0):
        adjusted = [list(p) for p in pairs]
        for i in chosen:
            adjusted[i][side] = 0
        best = max(best, permutation_lower_tail([(p[side], p[1 - side]) for p in adjusted]))
    return best


def test_10_least_rejectable():
    start = time.perf_counter()
    cases = failures = 0
    for I in range(1, 7):
        for n11, d_t, d_c in itertools.product(range(I + 1), repeat=3):
            if n11 + d_t + d_c > I:
                continue
            table = PairedOutcomeTable(n11, d_t, d_c, I - n11 - d_t - d_c)
            for direction in (TREATED_CAUSES, CONTROL_CAUSES):
                for delta0 in range(causing_side_events(table, direction) + 1):
                    cases += 1
                    got = attributable_test(table, AttributableHypothesis(delta0, direction)).p_upper
                    if abs(got - float(_unit_level_max(table, delta0, direction))) > 1e-12:
                        failures += 1
    elapsed = time.perf_counter() - start
    check(10, "adjusted table maximizes the P-value over all attributions",
          failures == 0 and elapsed < 30, f"{cases} cases, {failures} failures, {elapsed:.1f} s")
