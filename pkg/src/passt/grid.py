"""Grid and field containers, Gaussian smoothing, bilinear sampling and FlowPack I/O.

Conventions used everywhere in the package:

* row 0 is the southernmost row, column 0 the westernmost column;
* arrays are stored row-major as ``[row][col][component]`` with components
  ``(u_x, u_y)`` = (eastward, northward);
* cell ``(r, c)`` has its center at ``origin + (c * cell_size, r * cell_size)``;
* one snapshot interval is one model time unit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, OutOfBounds, ShapeError, VersionError

FLOWPACK_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "field.f32"


@dataclass(frozen=True)
class GridSpec:
    n_rows: int
    n_cols: int
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.n_rows) != self.n_rows or int(self.n_cols) != self.n_cols:
            raise ConfigError("grid dimensions must be integers")
        if self.n_rows < 2 or self.n_cols < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.n_rows}x{self.n_cols}")
        if not self.cell_size > 0:
            raise ConfigError("cell_size must be positive")
        object.__setattr__(self, "n_rows", int(self.n_rows))
        object.__setattr__(self, "n_cols", int(self.n_cols))
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin[0] + col * self.cell_size, self.origin[1] + row * self.cell_size)

    def world_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """World ``(x, y)`` of every cell center, each of shape ``(n_rows, n_cols)``."""
        xs = self.origin[0] + self.cell_size * np.arange(self.n_cols)
        ys = self.origin[1] + self.cell_size * np.arange(self.n_rows)
        return np.meshgrid(xs, ys)

    def bounds(self) -> tuple[float, float, float, float]:
        """Bounding box ``(x_min, x_max, y_min, y_max)`` of the cell centers."""
        x0, y0 = self.origin
        return (x0, x0 + (self.n_cols - 1) * self.cell_size, y0, y0 + (self.n_rows - 1) * self.cell_size)

    def contains_cell(self, row: int, col: int) -> bool:
        return 0 <= row < self.n_rows and 0 <= col < self.n_cols


def _frozen(values, spec: GridSpec) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.shape != (spec.n_rows, spec.n_cols, 2):
        raise ShapeError(f"expected field of shape {(spec.n_rows, spec.n_cols, 2)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FlowSnapshot:
    """Velocity field on a grid at one time instant. ``values`` is read-only."""

    spec: GridSpec
    values: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.spec))
        object.__setattr__(self, "time_index", int(self.time_index))

    def __eq__(self, other):
        if not isinstance(other, FlowSnapshot):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.time_index == other.time_index
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def with_values(self, values, time_index: int | None = None) -> "FlowSnapshot":
        return FlowSnapshot(self.spec, values, self.time_index if time_index is None else time_index)

    def speed(self) -> np.ndarray:
        return np.hypot(self.values[..., 0], self.values[..., 1])


@dataclass(frozen=True, eq=False)
class FlowSeries:
    """Time-ordered snapshots with uniform spacing, stored as one ``[t][row][col][2]`` array."""

    spec: GridSpec
    data: np.ndarray
    start_index: int = 0
    dt: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 4 or arr.shape[1:] != (self.spec.n_rows, self.spec.n_cols, 2):
            raise ShapeError(
                f"expected series of shape (T, {self.spec.n_rows}, {self.spec.n_cols}, 2), got {arr.shape}"
            )
        if arr.shape[0] < 2:
            raise ValueError("a FlowSeries needs at least 2 snapshots")
        if not np.all(np.isfinite(arr)):
            raise ValueError("series values must be finite")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "start_index", int(self.start_index))
        object.__setattr__(self, "dt", float(self.dt))

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[FlowSnapshot], dt: float = 1.0, metadata=None) -> "FlowSeries":
        if len(snapshots) < 2:
            raise ValueError("a FlowSeries needs at least 2 snapshots")
        spec = snapshots[0].spec
        start = snapshots[0].time_index
        for k, snap in enumerate(snapshots):
            if snap.spec != spec:
                raise ShapeError("all snapshots must share one GridSpec")
            if snap.time_index != start + k:
                raise ValueError("snapshot time indices must increase by exactly 1")
        data = np.stack([s.values for s in snapshots])
        return cls(spec, data, start, dt, dict(metadata or {}))

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, k: int) -> FlowSnapshot:
        if k < 0:
            k += len(self)
        if not 0 <= k < len(self):
            raise IndexError(k)
        return FlowSnapshot(self.spec, self.data[k], self.start_index + k)

    @property
    def snapshots(self) -> list[FlowSnapshot]:
        return [self[k] for k in range(len(self))]

    @property
    def time_indices(self) -> np.ndarray:
        return self.start_index + np.arange(len(self))

    def window(self, first: int, last: int) -> "FlowSeries":
        """Snapshots with time index in ``[first, last]`` (inclusive)."""
        lo = first - self.start_index
        hi = last - self.start_index
        if lo < 0 or hi >= len(self) or hi - lo < 1:
            raise IndexError(f"window [{first}, {last}] outside series {self.time_indices[[0, -1]]}")
        return FlowSeries(self.spec, self.data[lo : hi + 1], first, self.dt, dict(self.metadata))

    def __eq__(self, other):
        if not isinstance(other, FlowSeries):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.start_index == other.start_index
            and self.dt == other.dt
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True)
class SmoothingKernel:
    size: int = 5
    variance: float = 0.1

    def __post_init__(self):
        if self.size < 1 or self.size % 2 != 1:
            raise ConfigError(f"kernel size must be odd and positive, got {self.size}")
        if not self.variance > 0:
            raise ConfigError("kernel variance must be positive")

    def weights_1d(self) -> np.ndarray:
        half = self.size // 2
        d = np.arange(-half, half + 1, dtype=np.float64)
        w = np.exp(-(d**2) / (2.0 * self.variance))
        return w / w.sum()

    def weights(self) -> np.ndarray:
        """Normalized ``size x size`` weights; the 2-D Gaussian factorizes exactly."""
        w = self.weights_1d()
        return np.outer(w, w)


@lru_cache(maxsize=64)
def _smoothing_matrix_cached(n: int, size: int, variance: float) -> np.ndarray:
    w = SmoothingKernel(size, variance).weights_1d()
    half = size // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for k, wk in enumerate(w):
            j = min(max(i + k - half, 0), n - 1)  # edge replication
            mat[i, j] += wk
    mat.flags.writeable = False
    return mat


def smoothing_matrix(n: int, kernel: SmoothingKernel) -> np.ndarray:
    """1-D smoothing operator with edge replication as an ``n x n`` matrix."""
    return _smoothing_matrix_cached(int(n), kernel.size, float(kernel.variance))


def smooth_array(arr: np.ndarray, kernel: SmoothingKernel) -> np.ndarray:
    """Smooth ``arr[..., row, col, comp]`` over the two grid axes."""
    rows = smoothing_matrix(arr.shape[-3], kernel)
    cols = smoothing_matrix(arr.shape[-2], kernel)
    return np.einsum("ij,...jkc,lk->...ilc", rows, arr, cols, optimize=True)


def smooth_array_adjoint(arr: np.ndarray, kernel: SmoothingKernel) -> np.ndarray:
    """Transpose of :func:`smooth_array` (differs from it at the borders)."""
    rows = smoothing_matrix(arr.shape[-3], kernel)
    cols = smoothing_matrix(arr.shape[-2], kernel)
    return np.einsum("ji,...jkc,kl->...ilc", rows, arr, cols, optimize=True)


def gaussian_smooth(field: FlowSnapshot, kernel: SmoothingKernel) -> FlowSnapshot:
    return field.with_values(smooth_array(field.values, kernel))


def bilinear_sample(field: FlowSnapshot, world_point) -> np.ndarray:
    """Velocity at ``world_point`` interpolated from the four surrounding cell centers."""
    spec = field.spec
    x, y = float(world_point[0]), float(world_point[1])
    fc = (x - spec.origin[0]) / spec.cell_size
    fr = (y - spec.origin[1]) / spec.cell_size
    tol = 1e-9
    if not (-tol <= fc <= spec.n_cols - 1 + tol and -tol <= fr <= spec.n_rows - 1 + tol):
        raise OutOfBounds(f"point ({x}, {y}) outside grid bounds {spec.bounds()}")
    fc = min(max(fc, 0.0), spec.n_cols - 1.0)
    fr = min(max(fr, 0.0), spec.n_rows - 1.0)
    c0 = min(int(np.floor(fc)), spec.n_cols - 2)
    r0 = min(int(np.floor(fr)), spec.n_rows - 2)
    tx, ty = fc - c0, fr - r0
    v = field.values
    return (
        (1 - tx) * (1 - ty) * v[r0, c0]
        + tx * (1 - ty) * v[r0, c0 + 1]
        + (1 - tx) * ty * v[r0 + 1, c0]
        + tx * ty * v[r0 + 1, c0 + 1]
    )


# ---------------------------------------------------------------------------
# FlowPack: manifest.json + little-endian float32 payload laid out [t][row][col][comp]


def _manifest_for(series: FlowSeries, source: str) -> dict:
    man = {
        "version": FLOWPACK_VERSION,
        "n_rows": series.spec.n_rows,
        "n_cols": series.spec.n_cols,
        "n_steps": len(series),
        "components": 2,
        "cell_size_m": series.spec.cell_size,
        "origin": list(series.spec.origin),
        "dt": series.dt,
        "source": source,
        "start_index": series.start_index,
    }
    extra = {k: v for k, v in series.metadata.items() if k != "source"}
    if extra:
        man["metadata"] = extra
    return man


def write_flowpack(series: FlowSeries, path) -> Path:
    """Write ``series`` as a FlowPack directory. Values are stored as float32."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    man = _manifest_for(series, str(series.metadata.get("source", "")))
    (path / MANIFEST_NAME).write_text(json.dumps(man, indent=2) + "\n")
    payload = np.ascontiguousarray(series.data, dtype="<f4")
    (path / PAYLOAD_NAME).write_bytes(payload.tobytes())
    return path


def _require(man: dict, key: str, kind):
    if key not in man:
        raise FormatError(f"manifest missing field {key!r}")
    val = man[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise FormatError(f"manifest field {key!r} must be an integer")
    if kind is float and (isinstance(val, bool) or not isinstance(val, (int, float))):
        raise FormatError(f"manifest field {key!r} must be a number")
    return val


def read_manifest(path) -> dict:
    raw = Path(path, MANIFEST_NAME).read_bytes()
    try:
        man = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not UTF-8", offset=exc.start) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(man, dict):
        raise FormatError("manifest must be a JSON object", offset=0)
    return man


def read_flowpack(path) -> FlowSeries:
    path = Path(path)
    man = read_manifest(path)
    version = _require(man, "version", int)
    if version != FLOWPACK_VERSION:
        raise VersionError(f"unsupported FlowPack version {version}")
    n_rows = _require(man, "n_rows", int)
    n_cols = _require(man, "n_cols", int)
    n_steps = _require(man, "n_steps", int)
    comps = _require(man, "components", int)
    if comps != 2:
        raise FormatError(f"expected 2 components, manifest declares {comps}")
    cell = _require(man, "cell_size_m", float)
    origin = _require(man, "origin", list)
    if len(origin) != 2:
        raise FormatError("origin must be [x, y]")
    dt = _require(man, "dt", float)
    payload = (path / PAYLOAD_NAME).read_bytes()
    expected = n_steps * n_rows * n_cols * 2 * 4
    if len(payload) != expected:
        raise FormatError(
            f"payload is {len(payload)} bytes, manifest implies {expected}",
            offset=min(len(payload), expected),
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(n_steps, n_rows, n_cols, 2)
    bad = np.flatnonzero(~np.isfinite(arr.ravel()))
    if bad.size:
        raise FormatError("payload contains non-finite values", offset=int(bad[0]) * 4)
    metadata = dict(man.get("metadata", {}))
    metadata["source"] = man.get("source", "")
    try:
        spec = GridSpec(n_rows, n_cols, cell, (origin[0], origin[1]))
        return FlowSeries(spec, arr.astype(np.float64), int(man.get("start_index", 0)), dt, metadata)
    except (ValueError, ConfigError) as exc:
        raise FormatError(f"invalid FlowPack contents: {exc}") from exc


def series_from_arrays(spec: GridSpec, frames: Iterable[np.ndarray], start_index: int = 0, **meta) -> FlowSeries:
    return FlowSeries(spec, np.stack(list(frames)), start_index, 1.0, meta)
