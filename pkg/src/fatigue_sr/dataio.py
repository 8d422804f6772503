"""Datasets, the dimensionless feature pipeline, metrics and fold splitting.

Bundled datasets live in ``fatigue_sr/data``. Setting ``RSL_DATA_DIR``
makes bundled names resolve to ``$RSL_DATA_DIR/<name>.csv`` first, which is
how externally sourced tables (TC4, GH4169 at 650 C) are supplied.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import astuple, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import MaterialProperties

DATASET_FIELDS = ("phase_deg", "eps_a_pct", "gamma_a_pct", "sigma_a_mpa", "tau_a_mpa", "nf_cycles")
CONDITION_FIELDS = ("condition", "omega_profile", "eps_a_pct", "gamma_a_pct", "sigma_a_mpa", "tau_a_mpa")
FEATURE_NAMES = ("eps_a", "gamma_a", "sigma_over_E", "tau_over_G")
BUNDLED_DATASETS = ("data1", "data2", "data3", "table5")
# material each dataset was measured on
DATASET_MATERIAL = {"data1": "GH4169_25C", "data2": "TC4_25C", "data3": "GH4169_650C", "table5": "GH4169_650C"}
UNITS = ("percent", "fraction")


class SchemaMismatch(ValueError):
    pass


class DatasetUnavailable(FileNotFoundError):
    pass


class LengthMismatch(ValueError):
    pass


class InvalidK(ValueError):
    pass


@dataclass(frozen=True)
class FatigueRecord:
    phase_deg: float
    eps_a_pct: float
    gamma_a_pct: float
    sigma_a_mpa: float
    tau_a_mpa: float
    nf_cycles: int

    def __post_init__(self):
        if self.nf_cycles < 1:
            raise ValueError(f"nf_cycles must be >= 1, got {self.nf_cycles}")
        amps = (self.eps_a_pct, self.gamma_a_pct, self.sigma_a_mpa, self.tau_a_mpa)
        if min(amps) < 0 or not all(math.isfinite(a) for a in amps + (self.phase_deg,)):
            raise ValueError("amplitudes must be finite and non-negative")


@dataclass(frozen=True)
class OperatingCondition:
    condition: str
    omega_profile: str
    eps_a_pct: float
    gamma_a_pct: float
    sigma_a_mpa: float
    tau_a_mpa: float
    phase_deg: float = 0.0


@dataclass(frozen=True)
class DimensionlessSample:
    features: tuple[float, float, float, float]
    nf_cycles: float | None

    @property
    def target_log(self) -> float:
        return math.log(self.nf_cycles)


def _resolve(source: str | Path) -> tuple[str, object]:
    """Return ``(label, readable)`` for a path or bundled dataset name."""
    name = str(source)
    if name in BUNDLED_DATASETS:
        override = os.environ.get("RSL_DATA_DIR")
        if override and (Path(override) / f"{name}.csv").is_file():
            return name, Path(override) / f"{name}.csv"
        bundled = resources.files("fatigue_sr.data").joinpath(f"{name}.csv")
        if bundled.is_file():
            return name, bundled
        raise DatasetUnavailable(
            f"dataset {name!r} is not bundled; place {name}.csv in the directory named by RSL_DATA_DIR")
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"no such dataset file: {path}")
    return str(path), path


def _read_rows(source, fields: Sequence[str]) -> tuple[str, list[dict]]:
    label, handle = _resolve(source)
    with handle.open("r", newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [f for f in fields if f not in header]
        if missing:
            extra = [h for h in header if h not in fields]
            hint = f" (found unexpected {', '.join(extra)})" if extra else ""
            raise SchemaMismatch(f"{label}: missing column(s) {', '.join(missing)}{hint}")
        rows = [{k.strip(): (v or "").strip() for k, v in row.items() if k} for row in reader]
    return label, rows


def load_dataset(source: str | Path) -> list[FatigueRecord]:
    """Load fatigue records from a CSV path or bundled name (``data1``...)."""
    label, rows = _read_rows(source, DATASET_FIELDS)
    out = []
    for i, row in enumerate(rows):
        try:
            nf = float(row["nf_cycles"])
            if nf != int(nf):
                raise ValueError(f"nf_cycles must be an integer, got {row['nf_cycles']}")
            out.append(FatigueRecord(*(float(row[f]) for f in DATASET_FIELDS[:-1]), int(nf)))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"{label}: row {i}: {exc}") from exc
    return out


def load_conditions(source: str | Path = "table5") -> list[OperatingCondition]:
    """Load operating conditions (amplitudes at a critical location, no life)."""
    label, rows = _read_rows(source, CONDITION_FIELDS)
    out = []
    for i, row in enumerate(rows):
        try:
            vals = [float(row[f]) for f in CONDITION_FIELDS[2:]]
            if min(vals) < 0:
                raise ValueError("amplitudes must be non-negative")
            out.append(OperatingCondition(row["condition"], row["omega_profile"], *vals))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"{label}: row {i}: {exc}") from exc
    return out


def write_dataset(records: Iterable[FatigueRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_FIELDS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(r)])


def preprocess_dr(records: Iterable, mat: MaterialProperties, units: str = "percent") -> list[DimensionlessSample]:
    """Dimensionless features ``(eps_a, gamma_a, sigma_a/E, tau_a/G)``.

    With ``units="percent"`` every feature is a percentage, the scale of the
    tabulated strains. ``units="fraction"`` divides all four by 100.
    Records without a life (operating conditions) get ``nf_cycles=None``.
    """
    if units not in UNITS:
        raise ValueError(f"units must be one of {UNITS}, got {units!r}")
    scale = 1.0 if units == "percent" else 0.01
    out = []
    for r in records:
        feats = (r.eps_a_pct * scale, r.gamma_a_pct * scale,
                 100.0 * r.sigma_a_mpa / mat.E_mpa * scale, 100.0 * r.tau_a_mpa / mat.G_mpa * scale)
        out.append(DimensionlessSample(feats, getattr(r, "nf_cycles", None)))
    return out


def design_matrix(samples: Sequence[DimensionlessSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into ``X`` (n, 4) and lives ``y`` (n,) for fitting."""
    X = np.array([s.features for s in samples], dtype=float).reshape(-1, len(FEATURE_NAMES))
    y = np.array([np.nan if s.nf_cycles is None else s.nf_cycles for s in samples], dtype=float)
    return X, y


@dataclass(frozen=True)
class Metrics:
    rmse_cycles: float
    r2: float
    frac_within_2x: float
    frac_within_3x: float
    n_excluded: int

    def report(self) -> str:
        return "\n".join(f"{k} = {v:.10g}" if isinstance(v, float) else f"{k} = {v}"
                         for k, v in self.__dict__.items())


def within_band(observed, predicted, factor: float) -> np.ndarray:
    obs = np.asarray(observed, dtype=float)
    pred = np.asarray(predicted, dtype=float)
    return (pred >= obs / factor) & (pred <= obs * factor)


def compute_metrics(observed, predicted) -> Metrics:
    """RMSE and R-squared in cycle space plus 2x/3x error-band fractions.

    Non-finite predictions are dropped from every statistic and counted.
    """
    obs = np.asarray(observed, dtype=float)
    pred = np.asarray(predicted, dtype=float)
    if obs.shape != pred.shape:
        raise LengthMismatch(f"{obs.shape} observed vs {pred.shape} predicted")
    ok = np.isfinite(pred)
    obs, pred = obs[ok], pred[ok]
    n_excl = int((~ok).sum())
    if len(obs) == 0:
        return Metrics(math.nan, math.nan, 0.0, 0.0, n_excl)
    rmse = float(np.sqrt(np.mean((obs - pred) ** 2)))
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    ss_res = float(np.sum((obs - pred) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)
    return Metrics(rmse, r2, float(within_band(obs, pred, 2).mean()),
                   float(within_band(obs, pred, 3).mean()), n_excl)


def kfold_split(n: int, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle then contiguous partition into ``k`` validation folds."""
    if not 2 <= k <= n:
        raise InvalidK(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    return [(np.sort(np.concatenate(folds[:i] + folds[i + 1:])), np.sort(f)) for i, f in enumerate(folds)]
