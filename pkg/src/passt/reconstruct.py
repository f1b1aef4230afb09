"""Gaussian-process field reconstruction from sparse point measurements.

Each velocity component gets an independent GP over cell coordinates with a
squared-exponential kernel. The prior mean is a full field (typically the
model's own prediction), so the posterior is a correction to it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import ConfigError, OutOfBounds, ShapeError, SingularKernel
from .grid import FlowSnapshot


@dataclass(frozen=True)
class Measurement:
    cell: tuple[int, int]
    velocity: tuple[float, float]
    age: int = 0
    time_index: int = 0
    source: int = 0  # id of the path that collected it


@dataclass(frozen=True)
class MeasurementSet:
    measurements: tuple = ()

    def __len__(self):
        return len(self.measurements)

    def __iter__(self):
        return iter(self.measurements)

    @property
    def cells(self) -> np.ndarray:
        return np.array([m.cell for m in self.measurements], dtype=int).reshape(-1, 2)

    @property
    def values(self) -> np.ndarray:
        return np.array([m.velocity for m in self.measurements], dtype=np.float64).reshape(-1, 2)

    @property
    def ages(self) -> np.ndarray:
        return np.array([m.age for m in self.measurements], dtype=np.float64)

    @property
    def source_ids(self) -> list[int]:
        return sorted({m.source for m in self.measurements})

    @classmethod
    def from_arrays(cls, cells, values, ages=None) -> "MeasurementSet":
        cells = np.asarray(cells, dtype=int).reshape(-1, 2)
        values = np.asarray(values, dtype=np.float64).reshape(-1, 2)
        ages = np.zeros(len(cells), dtype=int) if ages is None else np.asarray(ages, dtype=int)
        if np.any(ages < 0):
            raise ValueError("ages must be nonnegative")
        return cls(tuple(
            Measurement((int(c[0]), int(c[1])), (float(v[0]), float(v[1])), int(a))
            for c, v, a in zip(cells, values, ages)
        ))


@dataclass(frozen=True)
class GpConfig:
    length_scale: float = 3.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-4
    prior: str = "model_prediction"  # or "zero"

    def __post_init__(self):
        if not (self.length_scale > 0 and self.signal_variance > 0 and self.noise_variance > 0):
            raise ConfigError("GP hyperparameters must be positive")
        if self.prior not in ("model_prediction", "zero"):
            raise ConfigError(f"unknown prior {self.prior!r}")


def se_kernel(a: np.ndarray, b: np.ndarray, length_scale: float, signal_variance: float) -> np.ndarray:
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return signal_variance * np.exp(-0.5 * d2 / length_scale**2)


def _cholesky(K: np.ndarray, base_jitter: float):
    jitter = 0.0
    for _ in range(7):
        try:
            with np.errstate(all="ignore"):
                fac = cho_factor(K + jitter * np.eye(K.shape[0]), lower=True, check_finite=True)
            if np.all(np.isfinite(fac[0])) and np.all(np.diag(fac[0]) > 0):
                return fac
        except (LinAlgError, ValueError):
            pass
        jitter = base_jitter if jitter == 0.0 else jitter * 10.0
    raise SingularKernel("Gram matrix is singular even after jitter (duplicate cells with conflicting values?)")


def gp_posterior_mean(cells: np.ndarray, residuals: np.ndarray, noise: np.ndarray, targets: np.ndarray,
                      config: GpConfig) -> np.ndarray:
    """Posterior mean of a zero-mean GP at ``targets`` given ``residuals`` (n, k) at ``cells``."""
    X = cells.astype(np.float64)
    K = se_kernel(X, X, config.length_scale, config.signal_variance)
    K[np.diag_indices_from(K)] += noise
    fac = _cholesky(K, 1e-10 * config.signal_variance)
    alpha = cho_solve(fac, residuals)
    Ks = se_kernel(targets.astype(np.float64), X, config.length_scale, config.signal_variance)
    out = Ks @ alpha
    if not np.all(np.isfinite(out)):
        raise SingularKernel("posterior mean is not finite")
    return out


def effective_noise(meas: MeasurementSet, config: GpConfig) -> np.ndarray:
    """Per-measurement noise variance; older readings are trusted less."""
    return config.noise_variance * (1.0 + meas.ages)


def gp_reconstruct(meas: MeasurementSet, prior_field: FlowSnapshot, config: GpConfig = GpConfig()) -> FlowSnapshot:
    if len(meas) == 0:
        raise ValueError("need at least one measurement")
    spec = prior_field.spec
    cells = meas.cells
    if np.any(cells < 0) or np.any(cells[:, 0] >= spec.n_rows) or np.any(cells[:, 1] >= spec.n_cols):
        raise OutOfBounds("measurement outside grid")
    prior = prior_field.values if config.prior == "model_prediction" else np.zeros_like(prior_field.values)
    resid = meas.values - prior[cells[:, 0], cells[:, 1]]
    rr, cc = np.meshgrid(np.arange(spec.n_rows), np.arange(spec.n_cols), indexing="ij")
    targets = np.stack([rr.ravel(), cc.ravel()], axis=1)
    corr = gp_posterior_mean(cells, resid, effective_noise(meas, config), targets, config)
    return prior_field.with_values(prior + corr.reshape(spec.n_rows, spec.n_cols, 2))


def merge_measurements(existing: MeasurementSet, path, field_truth_access, cycle_steps: int = 0,
                       source: int = 0, now: int | None = None) -> MeasurementSet:
    """Age ``existing`` by ``cycle_steps`` and fold in readings along ``path``.

    ``path`` is a sequence of cells, or ``(cell, time_index)`` pairs when
    readings are taken at different times. ``field_truth_access(cell,
    time_index)`` returns the true velocity. A newer reading of a cell
    replaces the older one. New readings get age 0, or ``now - time_index``
    when ``now`` is given.
    """
    merged: dict = {}
    for m in existing:
        merged[m.cell] = Measurement(m.cell, m.velocity, m.age + int(cycle_steps), m.time_index, m.source)
    cells = getattr(path, "cells", path)
    for item in cells:
        if len(item) == 2 and np.ndim(item[0]) == 1:
            cell, t = item
        else:
            cell, t = item, 0
        cell = (int(cell[0]), int(cell[1]))
        v = np.asarray(field_truth_access(cell, t), dtype=np.float64)
        merged.pop(cell, None)  # reinsert so order reflects recency
        age = 0 if now is None else int(now) - int(t)
        if age < 0:
            raise ValueError(f"reading at {t} is later than now={now}")
        merged[cell] = Measurement(cell, (float(v[0]), float(v[1])), age, int(t), source)
    return MeasurementSet(tuple(merged.values()))
