"""Run configuration, read from a YAML file.

See README.md for the full key reference.  Relative paths are resolved
against the directory holding the config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .cohort import Schema


class ConfigError(ValueError):
    pass


@dataclass
class CapRule:
    """Limit on selected pairs flagged by a predicate.

    ``kind`` is ``mismatch`` (the two units differ on nominal ``field``) or
    ``gap_below`` (|difference| in numeric ``field`` is below ``below``).
    The limit is ``count`` pairs, or ``fraction`` of the stratum's units
    rounded down.
    """

    kind: str
    field: str
    count: int | None = None
    fraction: float | None = None
    below: float | None = None

    def limit(self, stratum_size: int) -> int:
        if self.count is not None:
            return int(self.count)
        return int(self.fraction * stratum_size)


@dataclass
class MatchConfig:
    covariates: list[str] | None = None
    hard_separation: float = 12.0
    mean_separation: float | None = 13.0
    lambda_rule: str | float = "median"
    fine_balance: list[str] = field(default_factory=list)
    near_fine_balance: dict[str, int] = field(default_factory=dict)
    caps: list[CapRule] = field(default_factory=list)
    mean_balance: dict[str, float | None] = field(default_factory=dict)
    mean_balance_sd_fraction: float = 0.005
    max_variables: int = 2_000_000
    split_key: str | None = None


@dataclass
class SolverConfig:
    node_limit: int | None = 200_000
    time_limit: float | None = None
    allow_gap: bool = False


@dataclass
class InferenceConfig:
    delta0: int | None = None
    delta0_fraction: float | None = None
    alpha: float = 0.05
    gammas: list[float] = field(default_factory=lambda: [1.0])


@dataclass
class ReportConfig:
    pair_binaries: list[str] = field(default_factory=list)
    sweep: list[float] = field(default_factory=lambda: [0.0, 9.0, 12.0, 15.0])


@dataclass
class RunConfig:
    input_path: Path
    schema: Schema
    match: MatchConfig = field(default_factory=MatchConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    output_dir: Path = Path("out")
    workers: int = 1

    def distance_covariates(self, available: list[str]) -> list[str]:
        names = self.match.covariates if self.match.covariates is not None else available
        missing = [n for n in names if n not in available]
        if missing:
            raise ConfigError(f"distance covariates not in the cohort: {missing}")
        return list(names)


def _section(data: Mapping, key: str) -> dict:
    value = data.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"'{key}' must be a mapping")
    return dict(value)


def _reject_unknown(section: str, data: Mapping, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


def _nonnegative(name: str, value):
    if value is not None and value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value}")
    return value


def parse_config(data: Mapping[str, Any], base_dir: Path | str = ".") -> RunConfig:
    base = Path(base_dir)
    _reject_unknown("top level", data, {"input", "match", "solver", "inference", "report",
                                        "output", "workers"})
    inp = _section(data, "input")
    _reject_unknown("input", inp, {"path", "schema"})
    if "path" not in inp or "schema" not in inp:
        raise ConfigError("input needs 'path' and 'schema'")
    schema = Schema.from_dict(inp["schema"])

    m = _section(data, "match")
    _reject_unknown("match", m, {"covariates", "hard_separation", "mean_separation", "lambda",
                                 "fine_balance", "near_fine_balance", "caps", "mean_balance",
                                 "mean_balance_sd_fraction", "max_variables", "split_key"})
    caps = []
    for raw in m.get("caps") or []:
        rule = CapRule(kind=raw.get("kind", "mismatch"), field=raw["field"], count=raw.get("count"),
                       fraction=raw.get("fraction"), below=raw.get("below"))
        if rule.kind not in ("mismatch", "gap_below"):
            raise ConfigError(f"unknown cap kind {rule.kind!r}")
        if (rule.count is None) == (rule.fraction is None):
            raise ConfigError(f"cap on {rule.field!r} needs exactly one of count or fraction")
        _nonnegative("cap count", rule.count)
        if rule.fraction is not None and not 0 <= rule.fraction <= 1:
            raise ConfigError(f"cap fraction must lie in [0, 1], got {rule.fraction}")
        if rule.kind == "gap_below" and rule.below is None:
            raise ConfigError("gap_below caps need 'below'")
        caps.append(rule)
    lam = m.get("lambda", "median")
    if lam != "median":
        try:
            lam = float(lam)
        except (TypeError, ValueError):
            raise ConfigError(f"lambda must be 'median' or a number, got {lam!r}") from None
        _nonnegative("lambda", lam)
    match = MatchConfig(
        covariates=m.get("covariates"),
        hard_separation=float(_nonnegative("hard_separation", m.get("hard_separation", 12.0))),
        mean_separation=_nonnegative("mean_separation", m.get("mean_separation", 13.0)),
        lambda_rule=lam,
        fine_balance=list(m.get("fine_balance") or []),
        near_fine_balance={k: int(_nonnegative("near-fine epsilon", v))
                           for k, v in (m.get("near_fine_balance") or {}).items()},
        caps=caps,
        mean_balance={k: (None if v is None else float(v))
                      for k, v in (m.get("mean_balance") or {}).items()},
        mean_balance_sd_fraction=float(m.get("mean_balance_sd_fraction", 0.005)),
        max_variables=int(m.get("max_variables", 2_000_000)),
        split_key=m.get("split_key"),
    )
    for name, eps in match.mean_balance.items():
        if eps is not None and eps <= 0:
            raise ConfigError(f"mean-balance epsilon for {name!r} must be positive")

    s = _section(data, "solver")
    _reject_unknown("solver", s, {"node_limit", "time_limit", "allow_gap"})
    solver = SolverConfig(node_limit=s.get("node_limit", 200_000), time_limit=s.get("time_limit"),
                          allow_gap=bool(s.get("allow_gap", False)))

    i = _section(data, "inference")
    _reject_unknown("inference", i, {"delta0", "delta0_fraction", "alpha", "gammas"})
    gammas = [float(g) for g in (i.get("gammas") or [1.0])]
    if any(g < 1 for g in gammas):
        raise ConfigError("every gamma must be >= 1")
    frac = i.get("delta0_fraction")
    if frac is not None and not 0 <= frac <= 1:
        raise ConfigError(f"delta0_fraction must lie in [0, 1], got {frac}")
    if i.get("delta0") is not None and frac is not None:
        raise ConfigError("give delta0 or delta0_fraction, not both")
    inference = InferenceConfig(delta0=_nonnegative("delta0", i.get("delta0")), delta0_fraction=frac,
                                alpha=float(i.get("alpha", 0.05)), gammas=gammas)

    r = _section(data, "report")
    _reject_unknown("report", r, {"pair_binaries", "sweep"})
    sweep = [float(_nonnegative("sweep threshold", t)) for t in (r.get("sweep") or [0, 9, 12, 15])]
    report = ReportConfig(pair_binaries=list(r.get("pair_binaries") or []), sweep=sweep)

    workers = int(data.get("workers", 1))
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return RunConfig(input_path=(base / inp["path"]), schema=schema, match=match, solver=solver,
                     inference=inference, report=report,
                     output_dir=base / data.get("output", "out"), workers=workers)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data, path.parent)
