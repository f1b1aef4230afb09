"""Closed-loop predictive sampling and the open-loop prediction baseline.

Each step the model advances its state by one snapshot, the prediction is
turned into a reward map, the robot takes one planner action and reads the
true field at its new cell. Every ``path_horizon`` steps the readings are
fused into the model state by GP reconstruction, which becomes the model's
new input. The model parameters never change.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import knode
from .errors import ConfigError, DivergedError, ShapeError
from .grid import FlowSeries, FlowSnapshot, write_flowpack
from .planner import MOVES, PolicyParams, next_action, reward_from_prediction
from .reconstruct import GpConfig, MeasurementSet, gp_reconstruct, merge_measurements

WORLD_MODES = ("advancing", "frozen")
# Short length scale and a noise/signal ratio of 0.1: corrections stay local and do not overshoot
# between adjacent path cells, which the tighter reconstruct defaults do on rough residuals.
LOOP_GP = GpConfig(length_scale=1.0, signal_variance=1.0, noise_variance=0.1)


@dataclass(frozen=True)
class LoopConfig:
    path_horizon: int = 30
    total_steps: int = 300
    start_cell: tuple | None = None  # grid center when None
    policy_mode: str = "sample"
    seed: int = 0
    world: str = "advancing"
    reward_lambda: float = 0.5
    gp: GpConfig = LOOP_GP
    baseline: bool = False

    def __post_init__(self):
        if self.path_horizon < 1:
            raise ConfigError("path_horizon must be at least 1")
        if self.total_steps < self.path_horizon:
            raise ConfigError("total_steps must be at least path_horizon")
        if self.policy_mode not in ("sample", "greedy"):
            raise ConfigError(f"unknown policy mode {self.policy_mode!r}")
        if self.world not in WORLD_MODES:
            raise ConfigError(f"world must be one of {WORLD_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_cell"] = list(self.start_cell) if self.start_cell is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LoopConfig":
        d = dict(d)
        if isinstance(d.get("gp"), dict):
            d["gp"] = GpConfig(**d["gp"])
        if d.get("start_cell") is not None:
            d["start_cell"] = tuple(d["start_cell"])
        return cls(**d)


@dataclass
class LoopTrace:
    """Everything a loop run produced. Arrays are indexed by step ``0..total_steps``."""

    estimates: np.ndarray  # (T+1, rows, cols, 2): model state after each step
    truth: np.ndarray  # (T+1, rows, cols, 2)
    predictions: np.ndarray | None = None  # (T+1, ...): one-step prediction before any reset
    reward_maps: np.ndarray | None = None  # (T+1, rows, cols); step 0 unused
    robot_cells: np.ndarray | None = None  # (T+1, 2)
    measurements: list = field(default_factory=list)  # (step, row, col, u, v, time_index)
    reconstructions: dict = field(default_factory=dict)  # step -> field
    cycle_ids: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    start_index: int = 0

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(np.mean(np.sum((self.estimates - self.truth) ** 2, axis=-1), axis=(-2, -1)))

    @property
    def n_steps(self) -> int:
        return self.estimates.shape[0] - 1

    def mean_rmse(self, first: int, last: int) -> float:
        return float(np.mean(self.rmse[first : last + 1]))

    def write(self, path, spec) -> Path:
        """Trace directory: FlowPacks for estimates and reconstructions plus ``trace.csv``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        write_flowpack(FlowSeries(spec, self.estimates, self.start_index, 1.0, {"source": "loop estimates"}),
                       path / "estimates")
        if self.reconstructions:
            rec_dir = path / "reconstructions"
            for step, fld in sorted(self.reconstructions.items()):
                # single reconstructed snapshot stored as a 2-step pack (prior state, reconstruction)
                pair = np.stack([self.predictions[step], fld])
                write_flowpack(FlowSeries(spec, pair, step - 1, 1.0, {"source": f"reconstruction at step {step}"}),
                               rec_dir / f"step_{step:05d}")
        rmse = self.rmse
        with open(path / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "robot_row", "robot_col", "rmse_vs_truth", "cycle_id"])
            for t in range(self.n_steps + 1):
                r, c = (self.robot_cells[t] if self.robot_cells is not None else (-1, -1))
                cyc = int(self.cycle_ids[t]) if self.cycle_ids is not None else 0
                w.writerow([t, int(r), int(c), repr(float(rmse[t])), cyc])
        (path / "config.json").write_text(json.dumps(self.config, indent=2) + "\n")
        return path


def _check_inputs(model, truth: FlowSeries, total_steps: int):
    if model.arch.input_shape != (truth.spec.n_rows, truth.spec.n_cols, 2):
        raise ShapeError("model grid does not match truth grid")
    if len(truth) < total_steps + 1:
        raise ConfigError(f"truth has {len(truth)} snapshots, need {total_steps + 1}")


def run_baseline(model, truth: FlowSeries, total_steps: int) -> LoopTrace:
    """Open-loop rollout from the first truth snapshot."""
    _check_inputs(model, truth, total_steps)
    est = knode.rollout(model, truth[0], total_steps).data
    return LoopTrace(
        estimates=np.array(est),
        truth=np.array(truth.data[: total_steps + 1]),
        predictions=np.array(est),
        cycle_ids=np.zeros(total_steps + 1, dtype=int),
        config={"baseline": True, "total_steps": total_steps},
        start_index=truth.start_index,
    )


def run_passt(model, truth: FlowSeries, policy: PolicyParams, config: LoopConfig = LoopConfig()) -> LoopTrace:
    T, H = config.total_steps, config.path_horizon
    if config.baseline:
        return run_baseline(model, truth, T)
    _check_inputs(model, truth, T)
    spec = truth.spec
    shape = spec.shape
    rng = np.random.default_rng(config.seed)
    robot = tuple(config.start_cell) if config.start_cell is not None else (shape[0] // 2, shape[1] // 2)
    if not spec.contains_cell(*robot):
        raise ConfigError(f"start cell {robot} outside grid")

    state = truth.data[0][None]
    estimates = np.empty((T + 1,) + truth.data.shape[1:])
    predictions = np.empty_like(estimates)
    reward_maps = np.zeros((T + 1,) + shape)
    robot_cells = np.zeros((T + 1, 2), dtype=int)
    cycle_ids = np.zeros(T + 1, dtype=int)
    estimates[0] = predictions[0] = state[0]
    robot_cells[0] = robot
    staleness = np.zeros(shape)
    visited = np.zeros(shape, dtype=bool)
    visited[robot] = True
    meas = MeasurementSet()
    cycle_cells: list = []
    readings: list = []
    recons: dict = {}
    cycle = 0

    def truth_at(cell, t):
        return truth.data[t, cell[0], cell[1]]

    for t in range(1, T + 1):
        try:
            state = knode.integrate(model, state)
            knode._guard(state, step=t)
        except DivergedError as exc:
            raise DivergedError("closed loop diverged", step=t) from exc
        predictions[t] = state[0]
        pred = FlowSnapshot(spec, state[0], truth.start_index + t)
        rmap = reward_from_prediction(pred, staleness, config.reward_lambda)
        reward_maps[t] = rmap.q
        a = next_action(policy, rmap, robot, visited, config.policy_mode, rng)
        robot = (robot[0] + int(MOVES[a, 0]), robot[1] + int(MOVES[a, 1]))
        visited[robot] = True
        staleness += 1.0
        staleness[robot] = 0.0
        robot_cells[t] = robot
        cycle_ids[t] = cycle
        cycle_cells.append((robot, t))
        if config.world == "advancing":
            readings.append((t, robot[0], robot[1], *truth_at(robot, t), truth.start_index + t))

        if t % H == 0:
            if config.world == "frozen":
                cycle_cells = [(cell, t) for cell, _ in cycle_cells]
            meas = merge_measurements(meas, cycle_cells, truth_at, cycle_steps=H if cycle else 0,
                                      source=cycle, now=t)
            if config.world == "frozen":
                readings.extend((t, c[0], c[1], *truth_at(c, t), truth.start_index + t) for c, _ in cycle_cells)
            recon = gp_reconstruct(meas, pred, config.gp)
            state = recon.values[None]
            recons[t] = recon.values
            cycle += 1
            cycle_cells = []
            visited[:] = False
            visited[robot] = True
        estimates[t] = state[0]

    return LoopTrace(
        estimates=estimates,
        truth=np.array(truth.data[: T + 1]),
        predictions=predictions,
        reward_maps=reward_maps,
        robot_cells=robot_cells,
        measurements=readings,
        reconstructions=recons,
        cycle_ids=cycle_ids,
        config=config.to_dict(),
        start_index=truth.start_index,
    )
