import copy

import pytest

from ivmatch.cli import load_cohort
from ivmatch.cohort import Unit
from ivmatch.config import ConfigError, load_config, parse_config
from ivmatch.design import build_program, check_study, design_stats, match_cohort, partition
from ivmatch.diagnostics import MatchedPair
from ivmatch.synthetic import SCHEMA, cohort_csv


def base_config(**match):
    m = {"hard_separation": 12, "mean_separation": 13, "fine_balance": ["race"],
         "near_fine_balance": {"lbw": 1},
         "caps": [{"kind": "mismatch", "field": "lbw", "fraction": 0.2}],
         "mean_balance": {"weight": None}}
    m.update(match)
    return {"input": {"path": "c.csv", "schema": SCHEMA}, "match": m}


@pytest.fixture
def small(tmp_path):
    (tmp_path / "c.csv").write_text(cohort_csv(90, 3, seed=7))
    config = parse_config(base_config(), tmp_path)
    return config, load_cohort(config, read_outcome=False)


class TestConfig:
    def test_defaults(self, tmp_path):
        cfg = parse_config({"input": {"path": "x.csv", "schema": {"id": "id"}}}, tmp_path)
        assert cfg.match.hard_separation == 12.0 and cfg.match.mean_separation == 13
        assert cfg.match.lambda_rule == "median"
        assert cfg.report.sweep == [0.0, 9.0, 12.0, 15.0]
        assert cfg.input_path == tmp_path / "x.csv"

    @pytest.mark.parametrize("patch, message", [
        ({"match": {"hard_separation": -1}}, "hard_separation"),
        ({"match": {"lambda": -2}}, "lambda"),
        ({"match": {"lambda": "mean"}}, "lambda"),
        ({"match": {"caps": [{"field": "lbw", "fraction": 1.5}]}}, "fraction"),
        ({"match": {"caps": [{"field": "lbw"}]}}, "exactly one"),
        ({"match": {"caps": [{"kind": "odd", "field": "lbw", "count": 1}]}}, "cap kind"),
        ({"match": {"mean_balance": {"weight": 0}}}, "positive"),
        ({"match": {"fine": ["race"]}}, "unknown keys"),
        ({"inference": {"gammas": [0.5]}}, "gamma"),
        ({"inference": {"delta0": 3, "delta0_fraction": 0.1}}, "not both"),
        ({"report": {"sweep": [0, -3]}}, "sweep"),
        ({"workers": 0}, "workers"),
        ({"input": {"path": "x.csv", "schema": {"id": "id"}, "sep": ";"}}, "unknown keys"),
    ])
    def test_rejects_bad_values(self, tmp_path, patch, message):
        data = {"input": {"path": "x.csv", "schema": {"id": "id"}}}
        data.update(patch)
        with pytest.raises(ConfigError, match=message):
            parse_config(data, tmp_path)

    def test_input_required(self, tmp_path):
        with pytest.raises(ConfigError, match="path"):
            parse_config({"input": {"schema": {"id": "id"}}}, tmp_path)

    def test_load_yaml(self, tmp_path):
        (tmp_path / "run.yaml").write_text(
            "input: {path: data.csv, schema: {id: id}}\nmatch: {lambda: 4.5}\n")
        cfg = load_config(tmp_path / "run.yaml")
        assert cfg.match.lambda_rule == 4.5
        (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(tmp_path / "bad.yaml")


def test_partition_splits_large_strata(tmp_path):
    units = [Unit(id=str(i), covariates={"x": float(i)}, exact_keys=("H1",),
                  instrument_value=float(i % 4) * 20, attributes={"ward": "A" if i < 5 else "B"})
             for i in range(10)]
    cfg = parse_config(base_config(max_variables=5, split_key="ward"), tmp_path)
    jobs = partition(units, cfg)
    assert [j.key for j in jobs] == [("H1", "A"), ("H1", "B")]
    assert sorted(len(j.units) for j in jobs) == [5, 5]
    cfg.match.split_key = None
    with pytest.raises(ConfigError, match="split_key"):
        partition(units, cfg)


def test_lambda_is_stratum_median(small):
    config, cohort = small
    stats = design_stats(cohort, config)
    job = partition(cohort, config)[0]
    prog = build_program(job, config, stats)
    full = build_program(job, config, stats, hard_separation=0.0)
    assert prog.lam == full.lam
    assert prog.n_vars < full.n_vars


def test_match_passes_check(small):
    config, cohort = small
    study = match_cohort(cohort, config)
    assert all(s.status == "optimal" for s in study.strata)
    assert study.pairs
    assert check_study(study, config, cohort) == []
    for p in study.pairs:
        assert p.long.instrument_value - p.short.instrument_value >= 12


def test_check_reports_tampering(small):
    config, cohort = small
    study = match_cohort(cohort, config)
    bad = copy.copy(study)
    first = study.pairs[0]
    # Swapping sides breaks orientation and the separation rule.
    bad.pairs = [MatchedPair(first.pair_id, first.short, first.long, first.stratum)] + study.pairs[1:]
    assert any("instrument gap" in m for m in check_study(bad, config, cohort))
    dup = copy.copy(study)
    dup.pairs = study.pairs + [MatchedPair(999, first.long, first.short, first.stratum)]
    assert any("appears in pairs" in m for m in check_study(dup, config, cohort))
    ghost = copy.copy(study)
    ghost.pairs = study.pairs + [MatchedPair(1000, first.long, first.short, ("H9", "2000"))]
    assert any("unknown stratum" in m for m in check_study(ghost, config, cohort))


def test_check_catches_fine_balance_break(small):
    config, cohort = small
    study = match_cohort(cohort, config)
    races = {(p.long.nominal_marks["race"], p.short.nominal_marks["race"]) for p in study.pairs}
    if all(a == b for a, b in races):
        pytest.skip("every pair already agrees on race")
    mixed = next(p for p in study.pairs
                 if p.long.nominal_marks["race"] != p.short.nominal_marks["race"])
    broken = copy.copy(study)
    broken.pairs = [p for p in study.pairs if p is not mixed]
    assert any("fine balance" in m for m in check_study(broken, config, cohort))


def test_hard_separation_override_is_monotone(small):
    config, cohort = small
    counts = [len(match_cohort(cohort, config, hard_separation=t).pairs) for t in (0, 12, 18)]
    assert counts[0] >= counts[1] >= counts[2]


def test_single_unit_stratum(tmp_path):
    (tmp_path / "c.csv").write_text(cohort_csv(1, 1, seed=1))
    config = parse_config(base_config(), tmp_path)
    study = match_cohort(load_cohort(config, read_outcome=False), config)
    assert study.pairs == [] and study.strata[0].n_units == 1


def test_workers_give_same_pairs(small):
    config, cohort = small
    serial = [(p.long.id, p.short.id) for p in match_cohort(cohort, config).pairs]
    config.workers = 2
    parallel = [(p.long.id, p.short.id) for p in match_cohort(cohort, config).pairs]
    assert serial == parallel
