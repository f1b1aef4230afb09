"""Synthetic vortex-street flows and CSV ingestion of gridded currents.

The street is a closed-form kinematic model: a uniform inflow plus two
staggered rows of regularized point vortices of opposite sign, advected
downstream at a fixed speed and recycled from the downstream end of the
street to its upstream end. A smooth taper fades vortices in and out at the
ends of the street so recycling does not produce jumps.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, GapError, SchemaError
from .grid import FlowSeries, GridSpec

CSV_HEADER = ["row", "col", "u", "v"]
MAX_GAP_FRACTION = 0.05


def default_window() -> GridSpec:
    # 10 m x 10 m wake window sampled on a 30 x 30 lattice, cylinder at the origin
    cell = 10.0 / 30
    return GridSpec(30, 30, cell, (2.0 + cell / 2, -5.0 + cell / 2))


@dataclass(frozen=True)
class VortexStreetConfig:
    inflow_speed: float = 0.5
    street_spacing: float = 6.0
    row_offset: float = 1.0
    circulation: float = 3.0
    core_radius: float = 0.8
    advection_speed: float = 0.25
    oscillation_amplitude: float = 0.0
    oscillation_period: float = 96.0
    window: GridSpec = field(default_factory=default_window)
    n_steps: int = 401
    seed: int = 0
    street_origin: tuple[float, float] = (0.0, 0.0)
    n_vortices_per_row: int = 4
    taper_length: float | None = None

    def __post_init__(self):
        for name in ("street_spacing", "row_offset", "core_radius", "advection_speed"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.oscillation_amplitude < 0:
            raise ConfigError("oscillation_amplitude must be nonnegative")
        if self.oscillation_amplitude > 0 and not self.oscillation_period > 0:
            raise ConfigError("oscillation_period must be positive when oscillating")
        if self.n_steps < 2:
            raise ConfigError("n_steps must be at least 2")
        if self.n_vortices_per_row < 1:
            raise ConfigError("need at least one vortex per row")

    @property
    def period(self) -> float:
        """Time period of the stationary street, in snapshots."""
        return self.street_spacing / self.advection_speed

    @property
    def street_length(self) -> float:
        return self.n_vortices_per_row * self.street_spacing


def stationary_config(**overrides) -> VortexStreetConfig:
    return VortexStreetConfig(**overrides)


def oscillating_config(**overrides) -> VortexStreetConfig:
    overrides.setdefault("oscillation_amplitude", 1.0)
    overrides.setdefault("oscillation_period", 96.0)
    return VortexStreetConfig(**overrides)


def vortex_velocity(x, y, xv, yv, circulation, core_radius):
    """Velocity induced at ``(x, y)`` by a regularized vortex at ``(xv, yv)``.

    Tangential speed is ``G r / (2 pi (r^2 + rc^2))``; positive circulation
    turns counterclockwise.
    """
    dx = np.asarray(x) - xv
    dy = np.asarray(y) - yv
    scale = circulation / (2.0 * np.pi * (dx * dx + dy * dy + core_radius**2))
    return -scale * dy, scale * dx


def _taper(s: np.ndarray, length: float, ramp: float) -> np.ndarray:
    """Strength weight along the street: 0 at both ends, 1 in the middle."""
    up = np.clip(s / ramp, 0.0, 1.0)
    down = np.clip((length - s) / ramp, 0.0, 1.0)
    w = np.minimum(up, down)
    return w * w * (3.0 - 2.0 * w)


def _check_overlap(cfg: VortexStreetConfig):
    x0, x1, y0, y1 = cfg.window.bounds()
    sx, sy = cfg.street_origin
    reach = cfg.row_offset + cfg.oscillation_amplitude + 3.0 * cfg.core_radius
    if x1 < sx or x0 > sx + cfg.street_length or y1 < sy - reach or y0 > sy + reach:
        raise ConfigError("window does not overlap the vortex street")


def vortex_positions(cfg: VortexStreetConfig, t: float):
    """Positions, signed circulations (after taper) of all street vortices at time ``t``."""
    a = cfg.street_spacing
    L = cfg.street_length
    period = cfg.period
    if cfg.oscillation_amplitude == 0.0 and abs(period - round(period)) < 1e-9 and float(t).is_integer():
        # exact periodicity: t and t + P map to identical inputs
        t = float(int(t) % int(round(period)))
    phase = np.random.default_rng(cfg.seed).uniform(0.0, a)
    sx, sy = cfg.street_origin
    if cfg.oscillation_amplitude > 0:
        sy = sy + cfg.oscillation_amplitude * np.sin(2.0 * np.pi * t / cfg.oscillation_period)
    ramp = cfg.taper_length if cfg.taper_length is not None else a
    k = np.arange(cfg.n_vortices_per_row)
    s_upper = np.mod(k * a + phase + cfg.advection_speed * t, L)
    s_lower = np.mod(k * a + 0.5 * a + phase + cfg.advection_speed * t, L)
    xs = sx + np.concatenate([s_upper, s_lower])
    ys = np.concatenate([np.full(k.size, sy + cfg.row_offset), np.full(k.size, sy - cfg.row_offset)])
    weight = _taper(np.concatenate([s_upper, s_lower]), L, ramp)
    # upper row turns clockwise, lower row counterclockwise
    gammas = cfg.circulation * weight * np.concatenate([-np.ones(k.size), np.ones(k.size)])
    return xs, ys, gammas


def street_snapshot(cfg: VortexStreetConfig, t: float) -> np.ndarray:
    X, Y = cfg.window.world_coords()
    u = np.full(X.shape, float(cfg.inflow_speed))
    v = np.zeros(X.shape)
    for xv, yv, g in zip(*vortex_positions(cfg, t)):
        if g == 0.0:
            continue
        du, dv = vortex_velocity(X, Y, xv, yv, g, cfg.core_radius)
        u += du
        v += dv
    return np.stack([u, v], axis=-1)


def generate_vortex_street(cfg: VortexStreetConfig) -> FlowSeries:
    """Series of ``cfg.n_steps`` snapshots, time indices ``0 .. n_steps-1``.

    Values are rounded to float32 so that FlowPack storage is lossless.
    """
    _check_overlap(cfg)
    frames = np.stack([street_snapshot(cfg, float(t)) for t in range(cfg.n_steps)])
    frames = frames.astype(np.float32).astype(np.float64)
    kind = "oscillating" if cfg.oscillation_amplitude > 0 else "stationary"
    return FlowSeries(cfg.window, frames, 0, 1.0, {"source": f"synthetic vortex street ({kind}), seed {cfg.seed}"})


def speed_bound(cfg: VortexStreetConfig) -> float:
    """Upper bound on speed: inflow plus every vortex's regularized peak speed."""
    peak = abs(cfg.circulation) / (4.0 * np.pi * cfg.core_radius)
    return abs(cfg.inflow_speed) + 2 * cfg.n_vortices_per_row * peak


# ---------------------------------------------------------------------------
# CSV currents


def _read_current_csv(path: Path, spec: GridSpec):
    vals = np.full((spec.n_rows, spec.n_cols, 2), np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file", offset=0) from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise SchemaError(f"{path}: header must be {','.join(CSV_HEADER)}, got {','.join(header)}", offset=0)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise SchemaError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            try:
                r, c = int(rec[0]), int(rec[1])
                u, v = float(rec[2]), float(rec[3])
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: unparseable record {rec}") from None
            if not spec.contains_cell(r, c):
                raise SchemaError(f"{path}:{lineno}: cell ({r}, {c}) outside grid")
            if not (np.isfinite(u) and np.isfinite(v)):
                continue  # treated as missing
            vals[r, c] = (u, v)
    return vals


def _fill_nearest(vals: np.ndarray) -> list[tuple[int, int]]:
    missing = np.argwhere(np.isnan(vals[..., 0]))
    if missing.size == 0:
        return []
    present = np.argwhere(~np.isnan(vals[..., 0]))
    filled = []
    for r, c in missing:
        d2 = (present[:, 0] - r) ** 2 + (present[:, 1] - c) ** 2
        pr, pc = present[int(np.argmin(d2))]
        vals[r, c] = vals[pr, pc]
        filled.append((int(r), int(c)))
    return filled


def ingest_csv_currents(files: Sequence, spec: GridSpec, source: str = "csv currents") -> FlowSeries:
    """Load one ``row,col,u,v`` CSV per snapshot into a FlowSeries on ``spec``.

    Missing cells (absent lines or non-finite values) are filled from the
    nearest present cell and listed in ``metadata["filled_cells"]`` as
    ``[snapshot, row, col]``.
    """
    files = [Path(f) for f in files]
    if len(files) < 2:
        raise ConfigError("need at least two snapshot files")
    frames, filled_all = [], []
    for t, path in enumerate(files):
        vals = _read_current_csv(path, spec)
        n_missing = int(np.isnan(vals[..., 0]).sum())
        if n_missing > MAX_GAP_FRACTION * spec.n_cells:
            raise GapError(f"{path}: {n_missing} of {spec.n_cells} cells missing")
        filled_all.extend([t, r, c] for r, c in _fill_nearest(vals))
        frames.append(vals)
    return FlowSeries(spec, np.stack(frames), 0, 1.0, {"source": source, "filled_cells": filled_all})
