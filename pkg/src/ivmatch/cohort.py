"""Unit records, the anticipated-length-of-stay instrument, and exact-match strata."""

from __future__ import annotations

import contextlib
import contextvars
import csv
import io
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

MISSING_TOKENS = frozenset({"", "NA", "N/A", "NaN", "nan", "."})
MISSING_FLAG_SUFFIX = "__missing"

_outcomes_sealed: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "outcomes_sealed", default=False)


class CohortError(ValueError):
    """Malformed input data or schema."""


class OutcomeAccessError(RuntimeError):
    """An outcome was read while the design phase had outcomes sealed."""


@contextlib.contextmanager
def outcomes_sealed() -> Iterator[None]:
    """Make any read of ``Unit.outcome`` raise inside the block.

    Matching is design work and must be done without looking at outcomes.
    """
    token = _outcomes_sealed.set(True)
    try:
        yield
    finally:
        _outcomes_sealed.reset(token)


@dataclass
class Unit:
    id: str
    covariates: dict[str, float]
    nominal_marks: dict[str, str] = field(default_factory=dict)
    exact_keys: tuple[str, ...] = ()
    instrument_raw: float | None = None
    instrument_value: float | None = None
    attributes: dict[str, float | None] = field(default_factory=dict)
    _outcome: int | None = field(default=None, repr=False)

    @property
    def outcome(self) -> int | None:
        if _outcomes_sealed.get():
            raise OutcomeAccessError(f"outcome of unit {self.id} read during design")
        return self._outcome

    @outcome.setter
    def outcome(self, value: int | None) -> None:
        self._outcome = value

    def covariate_vector(self, names: Sequence[str]) -> list[float]:
        return [self.covariates[n] for n in names]

    def value(self, name: str):
        """Look a named field up across covariates, nominal marks and attributes."""
        if name in self.covariates:
            return self.covariates[name]
        if name in self.nominal_marks:
            return self.nominal_marks[name]
        if name in self.attributes:
            return self.attributes[name]
        if name in ("instrument_raw", "instrument_value"):
            return getattr(self, name)
        raise KeyError(name)


@dataclass
class Schema:
    """Column roles in the input table.

    ``impute`` lists covariate columns whose missing cells are replaced by
    the stratum mean plus a companion ``<name>__missing`` indicator.
    """

    id: str
    covariates: list[str] = field(default_factory=list)
    nominal: list[str] = field(default_factory=list)
    exact_keys: list[str] = field(default_factory=list)
    instrument: str | None = None
    los: str | None = None
    outcome: str | None = None
    attributes: list[str] = field(default_factory=list)
    impute: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Mapping) -> "Schema":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise CohortError(f"unknown schema keys: {sorted(unknown)}")
        if "id" not in data:
            raise CohortError("schema must name the id column")
        kwargs = dict(data)
        for key in ("covariates", "nominal", "exact_keys", "attributes", "impute"):
            kwargs[key] = list(kwargs.get(key) or [])
        return cls(**kwargs)

    def columns(self, with_outcome: bool = True) -> list[str]:
        cols = [self.id, *self.covariates, *self.nominal, *self.exact_keys, *self.attributes]
        for col in (self.instrument, self.los):
            if col:
                cols.append(col)
        if with_outcome and self.outcome:
            cols.append(self.outcome)
        return cols


@dataclass
class Cohort:
    units: list[Unit]
    covariate_names: list[str]
    schema: Schema | None = None

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self):
        return iter(self.units)

    def by_id(self) -> dict[str, Unit]:
        return {u.id: u for u in self.units}


@dataclass
class Stratum:
    key: tuple[str, ...]
    units: list[Unit]

    @property
    def size(self) -> int:
        return len(self.units)


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise CohortError(f"row {row}, column {column}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise CohortError(f"row {row}, column {column}: non-finite value {text!r}")
    return value


def ingest(source: str | Path | io.TextIOBase, schema: Schema | Mapping,
           read_outcome: bool = True) -> Cohort:
    """Read a header-led CSV into a cohort of units, preserving row order.

    ``source`` may be a path, an open text stream, or CSV text itself.
    Rows are numbered from 1 for the first data row.  With
    ``read_outcome=False`` the outcome column is never parsed.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_dict(schema)
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and Path(source).exists()):
        with open(source, newline="", encoding="utf-8") as fh:
            return _ingest_stream(fh, schema, read_outcome)
    if isinstance(source, str):
        return _ingest_stream(io.StringIO(source), schema, read_outcome)
    return _ingest_stream(source, schema, read_outcome)


def _ingest_stream(stream, schema: Schema, read_outcome: bool) -> Cohort:
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    absent = [c for c in schema.columns(with_outcome=read_outcome) if c not in header]
    if absent:
        raise CohortError(f"schema columns absent from input: {absent}")

    units: list[Unit] = []
    seen: set[str] = set()
    missing_cells: list[tuple[int, str]] = []
    for row_no, row in enumerate(reader, start=1):
        uid = row[schema.id]
        if uid in seen:
            raise CohortError(f"duplicate id {uid!r} at row {row_no}")
        seen.add(uid)

        covs: dict[str, float] = {}
        for name in schema.covariates:
            text = row[name].strip()
            if text in MISSING_TOKENS:
                if name not in schema.impute:
                    raise CohortError(f"row {row_no}, column {name}: missing value")
                covs[name] = math.nan
                missing_cells.append((len(units), name))
            else:
                covs[name] = _parse_float(text, row_no, name)

        attrs: dict[str, float | None] = {}
        for name in schema.attributes + ([schema.los] if schema.los else []):
            text = row[name].strip()
            attrs[name] = None if text in MISSING_TOKENS else _parse_float(text, row_no, name)

        raw = None
        if schema.instrument:
            text = row[schema.instrument].strip()
            if text in MISSING_TOKENS:
                raise CohortError(f"row {row_no}, column {schema.instrument}: missing value")
            raw = _parse_float(text, row_no, schema.instrument)

        unit = Unit(
            id=uid,
            covariates=covs,
            nominal_marks={n: row[n].strip() for n in schema.nominal},
            exact_keys=tuple(row[k].strip() for k in schema.exact_keys),
            instrument_raw=raw,
            attributes=attrs,
        )
        if read_outcome and schema.outcome:
            text = row[schema.outcome].strip()
            if text in MISSING_TOKENS:
                unit.outcome = None
            else:
                value = _parse_float(text, row_no, schema.outcome)
                if value not in (0.0, 1.0):
                    raise CohortError(f"row {row_no}, column {schema.outcome}: outcome must be 0 or 1")
                unit.outcome = int(value)
        units.append(unit)

    names = list(schema.covariates)
    imputed = sorted({name for _, name in missing_cells}, key=names.index)
    if imputed:
        _impute_flagged_means(units, imputed)
        names += [n + MISSING_FLAG_SUFFIX for n in imputed]
    return Cohort(units=units, covariate_names=names, schema=schema)


def _impute_flagged_means(units: list[Unit], columns: list[str]) -> None:
    groups: dict[tuple, list[Unit]] = defaultdict(list)
    for u in units:
        groups[u.exact_keys].append(u)
    for name in columns:
        for members in groups.values():
            observed = [u.covariates[name] for u in members if not math.isnan(u.covariates[name])]
            if not observed:
                # No observed value in the stratum: fall back to the cohort mean.
                observed = [u.covariates[name] for u in units if not math.isnan(u.covariates[name])]
            fill = statistics.fmean(observed) if observed else 0.0
            for u in members:
                flag = math.isnan(u.covariates[name])
                if flag:
                    u.covariates[name] = fill
                u.covariates[name + MISSING_FLAG_SUFFIX] = 1.0 if flag else 0.0


AlosTable = dict[int, float]


def hour_bin(raw: float) -> int:
    hour = int(math.floor(raw))
    if not 0 <= hour <= 23:
        raise CohortError(f"hour of birth {raw} outside 0-23")
    return hour


def compute_alos(cohort: Cohort | Iterable[Unit], hour_field: str = "instrument_raw",
                 los_field: str = "los") -> AlosTable:
    """Median length of stay per hour of birth; sets each unit's instrument value.

    Fractional hours floor to the hour.  Even-sized groups take the mean of
    the two middle stays.
    """
    units = list(cohort)
    stays: dict[int, list[float]] = defaultdict(list)
    for u in units:
        hour = u.value(hour_field)
        stay = u.value(los_field)
        if hour is None or stay is None:
            raise CohortError(f"unit {u.id} lacks {hour_field} or {los_field}")
        if stay < 0:
            raise CohortError(f"unit {u.id} has negative length of stay {stay}")
        stays[hour_bin(hour)].append(float(stay))
    table = {h: float(statistics.median(v)) for h, v in sorted(stays.items())}
    apply_alos(units, table, hour_field)
    return table


def apply_alos(units: Iterable[Unit], table: AlosTable, hour_field: str = "instrument_raw") -> None:
    for u in units:
        hour = hour_bin(u.value(hour_field))
        if hour not in table:
            raise CohortError(f"unit {u.id} has hour {hour} with no length-of-stay median")
        u.instrument_value = table[hour]


def stratify(cohort: Cohort | Iterable[Unit]) -> list[Stratum]:
    """Partition units by their exact-match key, strata sorted by key."""
    groups: dict[tuple[str, ...], list[Unit]] = defaultdict(list)
    for u in cohort:
        groups[tuple(u.exact_keys)].append(u)
    return [Stratum(key=k, units=groups[k]) for k in sorted(groups)]


def stratum_label(key: Sequence[str]) -> str:
    return "|".join(key)


def parse_stratum_label(label: str) -> tuple[str, ...]:
    return tuple(label.split("|")) if label else ()
