"""Field error metrics, lookahead evaluation and POD energy spectra."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateData, ShapeError
from .grid import FlowSeries, FlowSnapshot

DEFAULT_LOOKAHEADS = (1, 2, 5, 10, 20, 50, 100)
ZERO_NORM = 1e-12


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FlowSnapshot) else np.asarray(x, dtype=np.float64)


def _pair(a, b):
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape or va.shape[-1] != 2:
        raise ShapeError(f"fields differ in shape: {va.shape} vs {vb.shape}")
    if isinstance(a, FlowSnapshot) and isinstance(b, FlowSnapshot) and a.spec != b.spec:
        raise ShapeError("fields live on different grids")
    return va, vb


def mse(a, b) -> float:
    """Mean over cells of the squared norm of the per-cell velocity difference."""
    va, vb = _pair(a, b)
    return float(np.mean(np.sum((va - vb) ** 2, axis=-1)))


def rmse(a, b) -> float:
    return float(np.sqrt(mse(a, b)))


def cosine_distance(a, b) -> float:
    """``1 - mean cos(angle)`` over cells where both vectors are nonzero."""
    va, vb = _pair(a, b)
    na = np.linalg.norm(va, axis=-1)
    nb = np.linalg.norm(vb, axis=-1)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    if not np.any(ok):
        return 0.0
    cos = np.sum(va * vb, axis=-1)[ok] / (na[ok] * nb[ok])
    return float(1.0 - np.mean(cos))


def batch_mse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-snapshot MSE for stacked fields ``(..., rows, cols, 2)``."""
    return np.mean(np.sum((a - b) ** 2, axis=-1), axis=(-2, -1))


def batch_cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    cos = np.where(ok, np.sum(a * b, axis=-1) / np.where(ok, na * nb, 1.0), 0.0)
    n = ok.sum(axis=(-2, -1))
    mean_cos = np.where(n > 0, cos.sum(axis=(-2, -1)) / np.maximum(n, 1), 1.0)
    return 1.0 - mean_cos


@dataclass(frozen=True)
class LookaheadReport:
    lookaheads: tuple
    mse: tuple
    cosine_distance: tuple
    dataset: str = "test"
    n_starts: tuple = ()

    def rows(self):
        return [
            {"lookahead": l, "mse": m, "cosine_distance": c, "dataset": self.dataset}
            for l, m, c in zip(self.lookaheads, self.mse, self.cosine_distance)
        ]


def lookahead_eval(model, series: FlowSeries, lookaheads: Sequence[int] = DEFAULT_LOOKAHEADS,
                   dataset: str = "test") -> LookaheadReport:
    """Roll out from every valid start ``t`` and compare step ``t + l`` with the truth."""
    from .knode import rollout_batch

    lookaheads = tuple(int(l) for l in lookaheads)
    if any(l < 1 for l in lookaheads) or list(lookaheads) != sorted(set(lookaheads)):
        raise ValueError("lookaheads must be positive and strictly increasing")
    data = series.data
    T = data.shape[0]
    lmax = lookaheads[-1]
    if T <= lmax:
        raise ValueError(f"series of length {T} too short for lookahead {lmax}")
    n_starts = T - lookaheads[0]
    traj = rollout_batch(model, data[:n_starts], lmax)  # (lmax+1, starts, ...)
    mses, coss, counts = [], [], []
    for l in lookaheads:
        n = T - l
        pred = traj[l, :n]
        truth = data[l : l + n]
        mses.append(float(np.mean(batch_mse(pred, truth))))
        coss.append(float(np.mean(batch_cosine_distance(pred, truth))))
        counts.append(n)
    return LookaheadReport(lookaheads, tuple(mses), tuple(coss), dataset, tuple(counts))


def write_lookahead_csv(reports: Sequence[LookaheadReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lookahead", "mse", "cosine_distance", "dataset"])
        for rep in reports:
            for row in rep.rows():
                w.writerow([row["lookahead"], repr(row["mse"]), repr(row["cosine_distance"]), row["dataset"]])
    return path


# ---------------------------------------------------------------------------
# POD


@dataclass(frozen=True)
class PodSpectrum:
    singular_values: np.ndarray
    energy_fractions: np.ndarray
    cumulative_energy: np.ndarray
    n_snapshots: int
    mean_subtracted: bool = True

    def energy_of_first(self, k: int) -> float:
        if k <= 0:
            return 0.0
        return float(self.cumulative_energy[min(k, self.cumulative_energy.size) - 1])


def snapshot_matrix(series) -> np.ndarray:
    """Columns are flattened snapshots (cells x components)."""
    data = series.data if isinstance(series, FlowSeries) else np.asarray(series, dtype=np.float64)
    return data.reshape(data.shape[0], -1).T


def pod(series, subtract_mean: bool = True) -> PodSpectrum:
    X = snapshot_matrix(series)
    if X.shape[1] < 2:
        raise ValueError("POD needs at least 2 snapshots")
    if subtract_mean:
        X = X - X.mean(axis=1, keepdims=True)
    s = np.linalg.svd(X, compute_uv=False)
    energy = s**2
    total = energy.sum()
    if not total > 0 or s[0] <= 1e-12 * max(1.0, np.abs(X).max()):
        raise DegenerateData("snapshot matrix has no variance")
    frac = energy / total
    cum = np.cumsum(frac)
    cum[-1] = 1.0 if abs(cum[-1] - 1.0) < 1e-10 else cum[-1]
    return PodSpectrum(s, frac, cum, X.shape[1], subtract_mean)


def write_pod_csv(spec: PodSpectrum, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "singular_value", "energy_fraction", "cumulative"])
        for i, (sv, f, c) in enumerate(zip(spec.singular_values, spec.energy_fractions, spec.cumulative_energy), 1):
            w.writerow([i, repr(float(sv)), repr(float(f)), repr(float(c))])
    return path
