"""Command-line driver: ``ivmatch {match,sweep,infer,export-mps,check}``.

Exit codes: 0 success, 1 usage or invalid input, 2 infeasible, solver limit
or failed check, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

from .cohort import Cohort, CohortError, compute_alos, ingest, outcomes_sealed, stratum_label
from .config import ConfigError, RunConfig, load_config
from .design import build_program, check_study, design_stats, match_cohort, partition
from .diagnostics import (MatchedStudy, Table, balance_report, read_pairs, separation_sweep,
                          strength_report, write_pairs, write_tables)
from .inference import (DIRECTIONS, AttributableHypothesis, attributable_test,
                        adjust_table, mcnemar_bounds, resolve_delta0, tabulate)
from .ipmodel import export_mps
from .solver import OPTIMAL

log = logging.getLogger("ivmatch")

EXIT_OK, EXIT_USAGE, EXIT_SOLVE, EXIT_IO = 0, 1, 2, 3


class MatchFailure(RuntimeError):
    """A stratum ended without a certified optimum."""


def load_cohort(config: RunConfig, read_outcome: bool) -> Cohort:
    """Ingest the input and fill instrument values.

    With a length-of-stay column the instrument is the median stay per
    hour of the raw instrument; without one the raw column is used as is.
    """
    cohort = ingest(Path(config.input_path), config.schema, read_outcome=read_outcome)
    if config.schema.instrument is None:
        raise ConfigError("schema must name the instrument column")
    if config.schema.los:
        compute_alos(cohort, los_field=config.schema.los)
    else:
        for u in cohort:
            u.instrument_value = u.instrument_raw
    return cohort


def _los_field(config: RunConfig) -> str | None:
    return config.schema.los


def _strata_table(study: MatchedStudy) -> Table:
    t = Table("Per-stratum solutions", ["stratum", "units", "variables", "status", "pairs",
                                        "objective", "bound", "nodes", "lambda"])
    for s in study.strata:
        t.rows.append([stratum_label(s.key), s.n_units, s.n_vars, s.status, s.n_pairs,
                       float(s.objective), float(s.bound), s.nodes, float(s.lam)])
    return t


def run_match(config: RunConfig, write: bool = True) -> MatchedStudy:
    """Design phase: build, solve and report the match without reading outcomes."""
    with outcomes_sealed():
        cohort = load_cohort(config, read_outcome=False)
        study = match_cohort(cohort, config)
        bad = [s for s in study.strata if s.status != OPTIMAL]
        hard_fail = [s for s in bad if s.status not in ("feasible_gap", "unknown_limit")
                     or not config.solver.allow_gap]
        if hard_fail:
            listing = ", ".join(f"{stratum_label(s.key) or '<all>'} ({s.status})" for s in hard_fail)
            raise MatchFailure(f"strata without an optimal match: {listing}")
        for s in bad:
            log.warning("stratum %s ended %s; gap %.6g", stratum_label(s.key), s.status,
                        s.objective - s.bound)
        if write:
            out = Path(config.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_pairs(study, out / "pairs.csv")
            write_tables(out, "strata", [_strata_table(study)])
            write_tables(out, "balance", balance_report(study, config.report.pair_binaries).tables)
            if _los_field(config):
                rep = strength_report(study, _los_field(config))
                write_tables(out, "strength", [rep.summary, rep.day_crosstab])
    return study


def run_sweep(config: RunConfig, thresholds=None) -> Table:
    cohort = load_cohort(config, read_outcome=False)
    if not _los_field(config):
        raise ConfigError("the sweep reports stays, so the schema needs a los column")
    table, _ = separation_sweep(cohort, config, thresholds, los_field=_los_field(config))
    write_tables(config.output_dir, "sweep", [table])
    return table


@dataclass
class InferenceReport:
    tables: list[Table]
    delta0: int


def run_infer(config: RunConfig, study_path: str | Path, write: bool = True) -> InferenceReport:
    """Analysis phase on a stored study: outcome table, tests, Gamma bounds."""
    if not config.schema.outcome:
        raise ConfigError("schema names no outcome column")
    cohort = load_cohort(config, read_outcome=True)
    study = read_pairs(study_path, cohort)
    table = tabulate(study)
    inf = config.inference
    delta0 = resolve_delta0(table.pairs, inf.delta0, inf.delta0_fraction)

    counts = Table("Paired outcome table", ["cell", "count"], [
        ["both_events", table.n11],
        ["short_only_event", table.d_t],
        ["long_only_event", table.d_c],
        ["neither_event", table.n00],
    ])
    tables = [counts]
    if delta0 > 0:
        adj = Table(f"Adjusted tables for an attributable effect of {delta0}",
                    ["hypothesis", "both_events", "short_only_event", "long_only_event",
                     "neither_event"])
        for direction in DIRECTIONS:
            hyp = AttributableHypothesis(delta0, direction)
            if hyp.compatible_with(table):
                a = adjust_table(table, hyp)
                adj.rows.append([direction, a.n11, a.d_t, a.d_c, a.n00])
            else:
                adj.rows.append([direction, "incompatible", "", "", ""])
        tables.append(adj)

    tests = Table("Tests and sensitivity bounds", ["gamma", "test", "delta0", "p_upper",
                                                   "p_lower", "log10_p_upper", "rejected"])
    for gamma in inf.gammas:
        hi, lo = mcnemar_bounds(table, gamma)
        tests.rows.append([gamma, "no_effect", 0, hi, lo, _log10(hi), hi <= inf.alpha])
        if delta0 == 0:
            continue
        for direction in DIRECTIONS:
            hyp = AttributableHypothesis(delta0, direction)
            if not hyp.compatible_with(table):
                tests.rows.append([gamma, direction, delta0, 0.0, 0.0, float("-inf"), True])
                continue
            res = attributable_test(table, hyp, gamma)
            tests.rows.append([gamma, direction, delta0, res.p_upper, res.p_lower,
                               res.log10_p_upper, res.p_upper <= inf.alpha])
    tables.append(tests)
    if write:
        write_tables(config.output_dir, "inference", tables)
    return InferenceReport(tables, delta0)


def _log10(p: float) -> float:
    return math.log10(p) if p > 0 else float("-inf")


def run_export_mps(config: RunConfig, stratum: str, out: str | Path | None = None) -> str:
    with outcomes_sealed():
        cohort = load_cohort(config, read_outcome=False)
        jobs = {stratum_label(j.key): j for j in partition(cohort, config)}
        if stratum not in jobs:
            raise ConfigError(f"no stratum {stratum!r}; known: {sorted(jobs)}")
        program = build_program(jobs[stratum], config, design_stats(cohort, config))
    text = export_mps(program)
    if out is not None:
        Path(out).write_text(text, encoding="utf-8")
    return text


def run_check(config: RunConfig, study_path: str | Path) -> list[str]:
    with outcomes_sealed():
        cohort = load_cohort(config, read_outcome=False)
        study = read_pairs(study_path, cohort)
        return check_study(study, config, cohort)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivmatch", description="Matching to strengthen an instrument, "
                                "with exact paired-outcome inference.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [("match", "solve the design and write pairs and reports"),
                           ("sweep", "re-run the design over hard separation thresholds"),
                           ("infer", "test hypotheses on a stored study"),
                           ("export-mps", "write one stratum's program in MPS format"),
                           ("check", "re-verify a stored study against the config")]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        if name in ("infer", "check"):
            sp.add_argument("--study", required=True)
        if name == "sweep":
            sp.add_argument("--thresholds", type=float, nargs="+")
        if name == "export-mps":
            sp.add_argument("--stratum", required=True, help="key values joined by '|'")
            sp.add_argument("--out", help="file to write; stdout when omitted")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.command == "match":
            study = run_match(config)
            print(f"{len(study.pairs)} pairs from {len(study.units)} units in "
                  f"{len(study.strata)} strata; wrote {config.output_dir}")
        elif args.command == "sweep":
            print(run_sweep(config, args.thresholds).to_text(), end="")
        elif args.command == "infer":
            rep = run_infer(config, args.study)
            print("\n".join(t.to_text() for t in rep.tables), end="")
        elif args.command == "export-mps":
            text = run_export_mps(config, args.stratum, args.out)
            if args.out is None:
                sys.stdout.write(text)
        elif args.command == "check":
            problems = run_check(config, args.study)
            for msg in problems:
                print(msg)
            if problems:
                return EXIT_SOLVE
            print("study satisfies every constraint")
    except MatchFailure as exc:
        print(f"ivmatch: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    except OSError as exc:
        print(f"ivmatch: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, CohortError, ValueError, KeyError) as exc:
        print(f"ivmatch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
