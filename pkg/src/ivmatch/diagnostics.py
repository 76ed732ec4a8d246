"""Matched-study container, balance and instrument-strength reports, and the
separation sweep.

Reports are pure views of a :class:`MatchedStudy`; nothing here reads
outcomes.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .cohort import Unit, outcomes_sealed, parse_stratum_label, stratum_label


@dataclass
class MatchedPair:
    pair_id: int
    long: Unit
    short: Unit
    stratum: tuple[str, ...]


@dataclass
class StratumResult:
    key: tuple[str, ...]
    n_units: int
    n_vars: int
    status: str
    objective: float
    bound: float
    nodes: int
    n_pairs: int
    lam: float


@dataclass
class MatchedStudy:
    pairs: list[MatchedPair]
    units: list[Unit]
    strata: list[StratumResult] = field(default_factory=list)
    covariate_names: list[str] = field(default_factory=list)

    @property
    def discarded(self) -> list[Unit]:
        used = {u.id for p in self.pairs for u in (p.long, p.short)}
        return [u for u in self.units if u.id not in used]

    def side(self, which: str) -> list[Unit]:
        return [getattr(p, which) for p in self.pairs]


# -- persistence -------------------------------------------------------------

PAIR_COLUMNS = ["pair_id", "long_unit_id", "short_unit_id", "stratum_key"]


def pairs_csv(study: MatchedStudy) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PAIR_COLUMNS)
    for p in study.pairs:
        w.writerow([p.pair_id, p.long.id, p.short.id, stratum_label(p.stratum)])
    return buf.getvalue()


def write_pairs(study: MatchedStudy, path: str | Path) -> None:
    Path(path).write_text(pairs_csv(study), encoding="utf-8")


def read_pairs(path: str | Path, units: Iterable[Unit]) -> MatchedStudy:
    units = list(units)
    by_id = {u.id: u for u in units}
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PAIR_COLUMNS:
            raise ValueError(f"{path}: expected columns {PAIR_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            try:
                long_u, short_u = by_id[row["long_unit_id"]], by_id[row["short_unit_id"]]
            except KeyError as exc:
                raise ValueError(f"{path}: pair {row['pair_id']} names unknown unit {exc}") from None
            pairs.append(MatchedPair(int(row["pair_id"]), long_u, short_u,
                                     parse_stratum_label(row["stratum_key"])))
    return MatchedStudy(pairs=pairs, units=units)


# -- tables ------------------------------------------------------------------


@dataclass
class Table:
    """Rows of named columns, rendered as CSV or aligned text."""

    title: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(x) for x in r])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self.columns] + [[_fmt(x) for x in r] for r in self.rows]
        widths = [max(len(str(row[i])) for row in cells) for i in range(len(self.columns))]
        lines = [self.title, ""]
        for k, row in enumerate(cells):
            lines.append("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                   for i, (c, w) in enumerate(zip(row, widths))).rstrip())
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "NA"
        return f"{x:.4g}" if abs(x) < 1e-3 and x != 0 else f"{x:.4f}".rstrip("0").rstrip(".")
    return "" if x is None else str(x)


def write_tables(out_dir: str | Path, stem: str, tables: Sequence[Table]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text("".join(
        (f"# {t.title}\n" if len(tables) > 1 else "") + t.to_csv() for t in tables), encoding="utf-8")
    (out / f"{stem}.txt").write_text("\n".join(t.to_text() for t in tables), encoding="utf-8")


# -- balance -----------------------------------------------------------------


@dataclass
class BalanceReport:
    covariates: Table
    nominal: Table
    crosstabs: Table

    @property
    def tables(self) -> list[Table]:
        return [self.covariates, self.nominal, self.crosstabs]


def _mean(xs: Sequence[float]) -> float:
    return statistics.fmean(xs) if xs else float("nan")


def _split_binary(entry: str, units: Sequence[Unit]) -> tuple[str, str]:
    if "=" in entry:
        name, level = entry.split("=", 1)
        return name, level
    levels = sorted({u.nominal_marks[entry] for u in units})
    return entry, levels[-1] if levels else ""


def balance_report(study: MatchedStudy, pair_binaries: Sequence[str] = (),
                   covariates: Sequence[str] | None = None) -> BalanceReport:
    """Side means, standardized differences, nominal counts and pair cross-tabs.

    Standardized differences divide by the standard deviation of the
    covariate over every unit before matching.  ``pair_binaries`` entries
    are ``field`` or ``field=level``.
    """
    longs, shorts = study.side("long"), study.side("short")
    names = list(covariates) if covariates is not None else (
        study.covariate_names or (list(study.units[0].covariates) if study.units else []))
    cov = Table("Covariate means by side", ["covariate", "long_mean", "short_mean", "std_diff"])
    for name in names:
        lm = _mean([u.covariates[name] for u in longs])
        sm = _mean([u.covariates[name] for u in shorts])
        pre = [u.covariates[name] for u in study.units]
        sd = statistics.stdev(pre) if len(pre) > 1 else 0.0
        std = (lm - sm) / sd if sd > 0 and longs else (0.0 if longs else float("nan"))
        cov.rows.append([name, lm, sm, std])

    nominal = Table("Nominal category counts by side", ["variable", "category", "long", "short"])
    fields = sorted({k for u in study.units for k in u.nominal_marks})
    for name in fields:
        for cat in sorted({u.nominal_marks[name] for u in study.units}):
            nominal.rows.append([name, cat, sum(u.nominal_marks[name] == cat for u in longs),
                                 sum(u.nominal_marks[name] == cat for u in shorts)])

    cross = Table("Pair cross-tabulations (long row x short column)",
                  ["variable", "level", "long_yes_short_yes", "long_yes_short_no",
                   "long_no_short_yes", "long_no_short_no", "diagonal_fraction"])
    for entry in pair_binaries:
        name, level = _split_binary(entry, study.units)
        yy = yn = ny = nn = 0
        for p in study.pairs:
            a, b = p.long.nominal_marks[name] == level, p.short.nominal_marks[name] == level
            yy += a and b
            yn += a and not b
            ny += b and not a
            nn += not a and not b
        n = len(study.pairs)
        cross.rows.append([name, level, yy, yn, ny, nn, (yy + nn) / n if n else float("nan")])
    return BalanceReport(cov, nominal, cross)


# -- instrument strength -----------------------------------------------------

DAY_EDGES = (12.0, 36.0, 60.0)


def day_bin(hours: float, edges: Sequence[float] | None = None) -> int:
    """Days in hospital: [0, 12) -> 0, [12, 36) -> 1, [36, 60) -> 2, ...

    With explicit ``edges`` the bin is the number of edges <= hours.
    """
    if edges is None:
        return int(math.floor((hours + 12.0) / 24.0))
    return sum(hours >= e for e in edges)


@dataclass
class StrengthReport:
    summary: Table
    day_crosstab: Table
    long_pct_over_one_day: float
    short_pct_over_one_day: float
    discordant_odds: float | None


def _los(unit: Unit, los_field: str) -> float:
    value = unit.attributes.get(los_field)
    if value is None:
        raise ValueError(f"unit {unit.id} has no {los_field!r} value")
    return float(value)


def strength_report(study: MatchedStudy, los_field: str = "los",
                    day_edges: Sequence[float] | None = None) -> StrengthReport:
    """Percent staying more than one day per side, and the pair day cross-tab.

    The discordant odds compare pairs where the long unit stayed two days
    and the short unit at most one, against the reverse; None when the
    reverse count is zero.
    """
    def days(u):
        return day_bin(_los(u, los_field), day_edges)

    def cat(d):
        return "<=1" if d <= 1 else ("2" if d == 2 else ">=3")

    longs, shorts = study.side("long"), study.side("short")
    lp = 100.0 * sum(days(u) >= 2 for u in longs) / len(longs) if longs else float("nan")
    sp = 100.0 * sum(days(u) >= 2 for u in shorts) / len(shorts) if shorts else float("nan")
    order = ["<=1", "2", ">=3"]
    counts = {(a, b): 0 for a in order for b in order}
    for p in study.pairs:
        counts[(cat(days(p.long)), cat(days(p.short)))] += 1
    reverse = counts[("<=1", "2")]
    odds = counts[("2", "<=1")] / reverse if reverse else None

    summary = Table("Instrument strength", ["measure", "value"], [
        ["pairs", len(study.pairs)],
        ["long_pct_over_1_day", lp],
        ["short_pct_over_1_day", sp],
        ["difference_pct", lp - sp],
        ["discordant_odds", "undefined" if odds is None else round(odds, 1)],
    ])
    tab = Table("Actual days in hospital in pairs (long row x short column)",
                ["long\\short", *order],
                [[a, *(counts[(a, b)] for b in order)] for a in order])
    return StrengthReport(summary, tab, lp, sp, odds)


# -- separation sweep --------------------------------------------------------


@dataclass
class SweepColumn:
    threshold: float
    pairs: int | None
    long_pct: float
    short_pct: float
    status: str

    @property
    def difference(self) -> float:
        return self.long_pct - self.short_pct


def separation_sweep(cohort, config, thresholds: Sequence[float] | None = None,
                     los_field: str | None = None) -> tuple[Table, list[SweepColumn]]:
    """Re-run the whole design at each hard separation threshold.

    Everything else in ``config`` is held fixed.  Runs with outcomes
    sealed; a threshold whose run hits a solver limit without an optimal
    answer is reported as infeasible.
    """
    from .design import match_cohort  # deferred: design depends on this module

    thresholds = list(config.report.sweep if thresholds is None else thresholds)
    if any(t < 0 for t in thresholds):
        raise ValueError("separation thresholds must be nonnegative")
    los_field = los_field or (config.schema.los if config.schema.los else "los")
    cols = []
    with outcomes_sealed():
        for t in thresholds:
            study = match_cohort(cohort, config, hard_separation=t)
            if any(s.status != "optimal" for s in study.strata):
                cols.append(SweepColumn(t, None, float("nan"), float("nan"), "infeasible"))
                continue
            rep = strength_report(study, los_field)
            cols.append(SweepColumn(t, len(study.pairs), rep.long_pct_over_one_day,
                                    rep.short_pct_over_one_day, "optimal"))
    table = Table("Comparison of required separations in anticipated length of stay",
                  ["hours", *(_fmt(float(c.threshold)) for c in cols)])
    table.rows.append(["long_pct", *(c.long_pct for c in cols)])
    table.rows.append(["short_pct", *(c.short_pct for c in cols)])
    table.rows.append(["difference_pct", *(c.difference for c in cols)])
    table.rows.append(["pairs", *(c.pairs if c.pairs is not None else "infeasible" for c in cols)])
    return table, cols
