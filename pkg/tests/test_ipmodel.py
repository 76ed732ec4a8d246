import itertools
import json
from math import comb

import numpy as np
import pytest

from ivmatch.ipmodel import (EQ, GE, LE, PairVarIndex, ProgramError, add_cap, add_fine_balance,
                             add_mean_balance, add_near_fine_balance, add_separation, export_mps,
                             new_program, parse_mps, read_solution)
from oracles import matchings


def flat(L, value):
    d = np.full((L, L), float(value))
    np.fill_diagonal(d, 0.0)
    return d


def feasible_sets(prog):
    out = set()
    for m in matchings(prog.index.pairs):
        if prog.is_feasible(prog.assignment(m)):
            out.add(frozenset(m))
    return out


class TestNewProgram:
    def test_three_units(self):
        prog = new_program(3, flat(3, 5), 2.0)
        assert prog.n_vars == 3
        assert np.allclose(prog.objective, 3.0)
        assert [r.tag for r in prog.rows] == ["degree"] * 3

    def test_two_units(self):
        prog = new_program(2, flat(2, 1), 0.0)
        assert prog.n_vars == 1 and len(prog.rows) == 2

    def test_degree_rows_lead(self):
        prog = new_program(5, flat(5, 1), 0.5)
        for unit, row in enumerate(prog.rows[:5]):
            assert row.sense == LE and row.rhs == 1.0
            assert {p for j in row.idx for p in prog.index.pairs[j]} >= {unit}
            assert all(unit in prog.index.pairs[j] for j in row.idx)
            assert len(row.idx) == 4

    def test_errors(self):
        with pytest.raises(ProgramError):
            new_program(1, flat(1, 0), 0.0)
        with pytest.raises(ProgramError):
            new_program(3, flat(3, 1), -1.0)
        with pytest.raises(ProgramError):
            new_program(3, flat(4, 1), 1.0)

    def test_variable_index_order(self):
        idx = PairVarIndex(4)
        assert idx.pairs == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        assert len(idx) == comb(4, 2)
        assert idx.position(3, 1) == 4
        assert idx.name(4) == "p_1_3"

    def test_candidate_pruning(self):
        v = np.array([0.0, 5.0, 20.0])
        prog = new_program(3, flat(3, 1), 1.0, instrument=v,
                           candidates=np.abs(v[:, None] - v[None, :]) >= 12)
        assert prog.index.pairs == [(0, 2), (1, 2)]
        assert (0, 1) not in prog.index
        with pytest.raises(ProgramError):
            PairVarIndex(3, [(0, 3)])


def test_orientation_follows_instrument():
    v = np.array([1.0, 9.0, 9.0])
    prog = new_program(3, flat(3, 1), 0.0, instrument=v)
    assert [prog.oriented(i) for i in range(3)] == [(1, 0), (2, 0), (1, 2)]


class TestFineBalance:
    def test_zero_indicator_row_is_empty(self):
        prog = new_program(4, flat(4, 1), 2.0)
        row = add_fine_balance(prog, [0, 0, 0, 0])
        assert row.idx.size == 0 and row.sense == EQ
        assert len(feasible_sets(prog)) == len(matchings(prog.index.pairs))

    def test_four_units_by_enumeration(self):
        # Units 0 and 3 are long within their pairs with units 2 and 1.
        prog = new_program(4, flat(4, 1), 2.0, instrument=[10.0, 0.0, 0.0, 10.0])
        row = add_fine_balance(prog, [1, 1, 0, 0])
        value = lambda pairs: row.activity(prog.assignment(pairs))
        assert value([(0, 2), (1, 3)]) == 0
        assert value([(0, 1), (2, 3)]) == 0
        assert value([(0, 2)]) == 1
        ok = feasible_sets(prog)
        assert frozenset({(0, 2), (1, 3)}) in ok
        assert frozenset({(0, 2)}) not in ok

    def test_orientation_matters(self):
        # Without an instrument the lower index is long, so both pairs put a 1 on the long side.
        prog = new_program(4, flat(4, 1), 2.0)
        row = add_fine_balance(prog, [1, 1, 0, 0])
        assert row.activity(prog.assignment([(0, 2), (1, 3)])) == 2

    def test_rejects_non_binary(self):
        with pytest.raises(ProgramError):
            add_fine_balance(new_program(3, flat(3, 1), 0.0), [0, 2, 1])


class TestCap:
    def test_gap_flags_with_zero_cap(self):
        v = np.array([0.0, 5.0, 14.0, 30.0])
        prog = new_program(4, flat(4, 1), 2.0, instrument=v)
        add_cap(prog, lambda l, m: abs(v[l] - v[m]) < 12, 0)
        for pairs in feasible_sets(prog):
            assert all(abs(v[l] - v[m]) >= 12 for l, m in pairs)

    def test_fraction_of_births(self):
        prog = new_program(10, flat(10, 1), 2.0)
        row = add_cap(prog, np.ones(prog.n_vars), int(0.2 * 10))
        assert row.rhs == 2.0

    def test_vacuous_and_errors(self):
        prog = new_program(4, flat(4, 1), 2.0)
        add_cap(prog, np.zeros((4, 4)), 0)
        assert len(feasible_sets(prog)) == len(matchings(prog.index.pairs))
        with pytest.raises(ProgramError):
            add_cap(prog, np.zeros(prog.n_vars), -1)
        with pytest.raises(ProgramError):
            add_cap(prog, np.zeros(3), 0)


class TestMeanBalance:
    def test_rows_have_stated_coefficients(self):
        prog = new_program(3, flat(3, 1), 0.0)
        r1, r2 = add_mean_balance(prog, [1.0, 4.0, 9.0], 0.5)
        # pairs (0,1), (0,2), (1,2) with l long
        assert np.allclose(r1.val, [-3.5, -8.5, -5.5])
        assert np.allclose(r2.val, [2.5, 7.5, 4.5])
        assert r1.sense == r2.sense == LE and r1.rhs == r2.rhs == 0.0

    def test_single_equal_pair(self):
        prog = new_program(2, flat(2, 1), 0.0)
        add_mean_balance(prog, [3.0, 3.0], 1e-9)
        assert prog.is_feasible(prog.assignment([(0, 1)]))

    def test_four_units_by_enumeration(self):
        prog = new_program(4, flat(4, 1), 0.0)
        add_mean_balance(prog, [0.0, 10.0, 0.0, 10.0], 1.0)
        ok = feasible_sets(prog)
        assert frozenset({(0, 1), (2, 3)}) not in ok
        assert frozenset({(0, 2), (1, 3)}) in ok

    def test_rejects_nonpositive_epsilon(self):
        with pytest.raises(ProgramError):
            add_mean_balance(new_program(2, flat(2, 1), 0.0), [1, 2], 0.0)


class TestSeparation:
    def test_exact_gap_holds_with_equality(self):
        prog = new_program(2, flat(2, 1), 0.0, instrument=[40.0, 27.0])
        row = add_separation(prog, [40.0, 27.0], 13.0)
        a = prog.assignment([(0, 1)])
        assert row.sense == GE
        assert row.activity(a) == pytest.approx(0.0)
        assert prog.is_feasible(a)

    def test_mean_gap_enforced(self):
        v = [0.0, 10.0, 20.0, 50.0]
        prog = new_program(4, flat(4, 1), 0.0, instrument=v)
        add_separation(prog, v, 15.0)
        for pairs in feasible_sets(prog):
            if pairs:
                gaps = [abs(v[l] - v[m]) for l, m in pairs]
                assert sum(gaps) / len(gaps) >= 15.0
        with pytest.raises(ProgramError):
            add_separation(prog, v, -1.0)


class TestNearFine:
    def test_zero_epsilon_matches_fine_balance(self):
        w = [1, 0, 1, 1, 0]
        v = [3.0, 8.0, 1.0, 9.0, 4.0]
        a = new_program(5, flat(5, 1), 0.0, instrument=v)
        b = new_program(5, flat(5, 1), 0.0, instrument=v)
        add_fine_balance(a, w)
        add_near_fine_balance(b, w, 0)
        assert feasible_sets(a) == feasible_sets(b)

    def test_single_flagged_unit(self):
        prog = new_program(4, flat(4, 1), 0.0)
        add_near_fine_balance(prog, [1, 0, 0, 0], 1)
        # One flagged unit can sit in at most one pair, so every matching qualifies.
        assert len(feasible_sets(prog)) == len(matchings(prog.index.pairs))
        tight = new_program(4, flat(4, 1), 0.0)
        add_near_fine_balance(tight, [1, 0, 0, 0], 0)
        assert all(all(0 not in p for p in s) for s in feasible_sets(tight))

    def test_two_same_side_mixed_pairs_disallowed(self):
        prog = new_program(4, flat(4, 1), 0.0)
        add_near_fine_balance(prog, [1, 1, 0, 0], 1)
        ok = feasible_sets(prog)
        assert frozenset({(0, 2)}) in ok
        assert frozenset({(0, 2), (1, 3)}) not in ok

    def test_epsilon_L_vacuous(self):
        prog = new_program(4, flat(4, 1), 0.0)
        add_near_fine_balance(prog, [1, 1, 0, 0], 4)
        assert len(feasible_sets(prog)) == len(matchings(prog.index.pairs))
        with pytest.raises(ProgramError):
            add_near_fine_balance(prog, [1, 1, 0, 0], -1)


def test_builder_order_does_not_change_feasible_set():
    rng = np.random.default_rng(3)
    v = rng.integers(0, 30, 6).astype(float)
    w = rng.integers(0, 2, 6)
    x = rng.normal(size=6)
    flags = rng.integers(0, 2, (6, 6))
    builders = [lambda p: add_fine_balance(p, w), lambda p: add_cap(p, flags, 1),
                lambda p: add_mean_balance(p, x, 0.7), lambda p: add_separation(p, v, 5.0),
                lambda p: add_near_fine_balance(p, 1 - w, 1)]
    reference = None
    for order in itertools.permutations(range(5)):
        prog = new_program(6, flat(6, 1), 2.0, instrument=v)
        for k in order:
            builders[k](prog)
        sets = feasible_sets(prog)
        if reference is None:
            reference = sets
        assert sets == reference


def test_row_validation():
    prog = new_program(3, flat(3, 1), 0.0)
    with pytest.raises(ProgramError):
        prog.add_row(np.ones(3), "<", 1.0, "cap")
    with pytest.raises(ProgramError):
        prog.add_row(np.ones(3), LE, 1.0, "mystery")
    with pytest.raises(ProgramError):
        prog.add_row(np.array([1.0, np.inf, 0.0]), LE, 1.0, "cap")


def test_json_dump_has_provenance():
    prog = new_program(3, flat(3, 2), 1.0)
    add_cap(prog, np.ones(3), 1)
    data = json.loads(prog.to_json())
    assert [r["tag"] for r in data["rows"]] == ["degree"] * 3 + ["cap"]
    assert data["variables"][0] == {"name": "p_0_1", "eta": 1.0}


class TestMps:
    def test_two_unit_round_trip(self):
        prog = new_program(2, flat(2, 5.0), 10.0)
        model = parse_mps(export_mps(prog))
        assert model.columns == ["p_0_1"]
        assert model.objective == {"p_0_1": -5.0}
        assert model.binaries == {"p_0_1"} == model.integer_columns
        assert [(r["name"], r["sense"], r["rhs"], r["coefficients"]) for r in model.rows] == [
            ("degree_0", LE, 1.0, {"p_0_1": 1.0}), ("degree_1", LE, 1.0, {"p_0_1": 1.0})]

    def test_sections_and_minimize(self):
        text = export_mps(new_program(3, flat(3, 1.0), 0.5, name="S_H1"))
        heads = [ln.split()[0] for ln in text.splitlines() if ln and not ln[0].isspace()]
        assert heads == ["NAME", "ROWS", "COLUMNS", "RHS", "BOUNDS", "ENDATA"]
        assert " N  COST" in text and "MAX" not in text
        assert text.count("'INTORG'") == text.count("'INTEND'") == 1

    def test_columns_list_every_nonzero(self):
        v = [30.0, 10.0, 0.0]
        prog = new_program(3, flat(3, 1.0), 0.5, instrument=v)
        add_fine_balance(prog, [1, 0, 0])
        add_separation(prog, v, 12.0)
        add_cap(prog, np.array([1.0, 0.0, 0.0]), 0)
        model = parse_mps(export_mps(prog))
        assert model.columns == ["p_0_1", "p_0_2", "p_1_2"]
        for row, parsed in zip(prog.rows, model.rows):
            expected = {prog.index.name(j): v for j, v in zip(row.idx, row.val)}
            assert parsed["coefficients"] == expected
            assert parsed["sense"] == row.sense and parsed["rhs"] == row.rhs

    def test_read_solution(self):
        prog = new_program(4, flat(4, 1.0), 3.0)
        a = read_solution("# external\np_0_1 1\np_2_3 = 0.9999999\np_0_2 0\n", prog)
        assert a.tolist() == prog.assignment([(0, 1), (2, 3)]).tolist()
        with pytest.raises(ProgramError):
            read_solution("q_0_1 1\n", prog)
