"""Seeded synthetic birth cohorts for demos and tests.

Length of stay depends on the hour of birth through a daily cycle, so the
median stay per hour spans roughly 20 to 48 hours and pairs separated by
12 hours or more exist in every stratum.
"""

from __future__ import annotations

import csv
import io

import numpy as np

SCHEMA = {
    "id": "id",
    "covariates": ["weight", "gestage", "mother_age", "parity"],
    "nominal": ["lbw", "race"],
    "exact_keys": ["hospital", "year"],
    "instrument": "hour",
    "los": "los",
    "outcome": "readmit",
}

COLUMNS = ["id", "hospital", "year", "hour", "los", "weight", "gestage", "mother_age", "parity",
           "lbw", "race", "readmit"]


def typical_stay(hour: np.ndarray) -> np.ndarray:
    return 34.0 + 14.0 * np.sin(2 * np.pi * (hour - 9.0) / 24.0)


def cohort_rows(n_units: int, n_strata: int, seed: int = 0) -> list[dict]:
    if n_strata < 1 or n_units < 0:
        raise ValueError("need n_strata >= 1 and n_units >= 0")
    rng = np.random.default_rng(seed)
    # Round-robin assignment keeps stratum sizes within one of each other.
    stratum = np.arange(n_units) % n_strata
    hour = rng.integers(0, 24, n_units)
    weight = rng.normal(3300, 550, n_units).round()
    gestage = np.clip(rng.normal(39, 1.8, n_units).round(), 28, 43)
    mother_age = np.clip(rng.normal(28, 6, n_units).round(), 15, 48)
    parity = rng.poisson(1.0, n_units)
    race = rng.choice(["A", "B", "C"], n_units, p=[0.6, 0.25, 0.15])
    stay = np.maximum(typical_stay(hour) + rng.normal(0, 6, n_units), 4.0).round(1)
    risk = 1 / (1 + np.exp(-(-0.8 + 0.0008 * (3000 - weight) - 0.01 * (stay - 30))))
    readmit = (rng.random(n_units) < risk).astype(int)
    rows = []
    for i in range(n_units):
        rows.append({
            "id": f"U{i + 1:04d}",
            "hospital": f"H{stratum[i] // 2 + 1}",
            "year": str(1993 + stratum[i] % 2),
            "hour": int(hour[i]),
            "los": float(stay[i]),
            "weight": float(weight[i]),
            "gestage": float(gestage[i]),
            "mother_age": float(mother_age[i]),
            "parity": int(parity[i]),
            "lbw": "1" if weight[i] < 2500 else "0",
            "race": str(race[i]),
            "readmit": int(readmit[i]),
        })
    return rows


def cohort_csv(n_units: int, n_strata: int, seed: int = 0) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(cohort_rows(n_units, n_strata, seed))
    return buf.getvalue()
