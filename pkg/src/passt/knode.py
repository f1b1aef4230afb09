"""Knowledge-based neural ODE: ``du/dt = K(N(u; phi))`` with K a Gaussian smoother.

One snapshot interval is integrated with a fixed number of explicit Euler
sub-steps; smoothing is applied to the network output at every sub-step.
Gradients are exact reverse-mode derivatives of that discrete scheme.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netcore
from .errors import ConfigError, DivergedError, ShapeError
from .grid import FlowSeries, FlowSnapshot, SmoothingKernel, smooth_array, smooth_array_adjoint
from .netcore import NetArchitecture, ParameterVector

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class KnodeModel:
    arch: NetArchitecture
    params: ParameterVector
    kernel: SmoothingKernel = field(default_factory=SmoothingKernel)
    substeps: int = 6

    def __post_init__(self):
        if self.substeps < 1:
            raise ConfigError("substeps must be at least 1")
        if self.params.layout != netcore.make_layout(self.arch):
            raise ShapeError("parameters do not match architecture")

    def with_params(self, params: ParameterVector) -> "KnodeModel":
        return KnodeModel(self.arch, params, self.kernel, self.substeps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 2000
    noise_variance: float = 1e-3
    batch_stride: int = 1
    rng_seed: int = 0
    substeps: int = 6
    kernel_size: int = 5
    kernel_variance: float = 0.1
    loss_every: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be nonnegative")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_stride < 1:
            raise ConfigError("batch_stride must be at least 1")
        if self.loss_every < 1:
            raise ConfigError("loss_every must be at least 1")


# ---------------------------------------------------------------------------
# integration


def _guard(u, step=None):
    if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > DIVERGENCE_LIMIT:
        raise DivergedError(f"state magnitude exceeded {DIVERGENCE_LIMIT:g}", step=step)


def integrate(model: KnodeModel, u: np.ndarray, tape: bool = False):
    """Advance a batch ``u`` of shape ``(B, rows, cols, 2)`` by one snapshot interval.

    With ``tape=True`` also returns the per-sub-step network caches needed by
    :func:`integrate_backward`.
    """
    h = 1.0 / model.substeps
    flat = model.params.values
    caches = []
    for _ in range(model.substeps):
        f, cache = netcore.forward_batch(model.arch, flat, u)
        if tape:
            caches.append(cache)
        u = u + h * smooth_array(f, model.kernel)
    return (u, caches) if tape else u


def integrate_backward(model: KnodeModel, caches, g: np.ndarray, need_input_grad: bool = False):
    """Pull cotangent ``g`` on the end state back through all sub-steps."""
    h = 1.0 / model.substeps
    flat = model.params.values
    grad = np.zeros_like(flat)
    for k in range(model.substeps - 1, -1, -1):
        cot = h * smooth_array_adjoint(g, model.kernel)
        want_dx = k > 0 or need_input_grad
        gp, dx = netcore.backward_batch(model.arch, flat, caches[k], cot, need_input_grad=want_dx)
        grad += gp
        if want_dx:
            g = g + dx
    return grad, (g if need_input_grad else None)


def step(model: KnodeModel, state: FlowSnapshot) -> FlowSnapshot:
    """One-step-ahead prediction from ``state``; the result carries ``time_index + 1``."""
    if state.values.shape != model.arch.input_shape:
        raise ShapeError(f"state shape {state.values.shape} != model grid {model.arch.input_shape}")
    u = integrate(model, state.values[None])
    _guard(u, step=state.time_index + 1)
    return FlowSnapshot(state.spec, u[0], state.time_index + 1)


def rollout(model: KnodeModel, initial: FlowSnapshot, horizon: int) -> FlowSeries:
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    frames = [initial.values]
    u = initial.values[None]
    for k in range(1, horizon + 1):
        u = integrate(model, u)
        _guard(u, step=k)
        frames.append(u[0])
    return FlowSeries(initial.spec, np.stack(frames), initial.time_index)


def rollout_batch(model: KnodeModel, starts: np.ndarray, horizon: int) -> np.ndarray:
    """Roll out many initial states at once; returns ``(horizon + 1, B, rows, cols, 2)``."""
    out = [starts]
    u = starts
    for k in range(1, horizon + 1):
        u = integrate(model, u)
        _guard(u, step=k)
        out.append(u)
    return np.stack(out)


# ---------------------------------------------------------------------------
# loss


def _transitions(series: FlowSeries):
    return series.data[:-1], series.data[1:]


def loss_from_arrays(model: KnodeModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    pred = integrate(model, inputs)
    n_cells = inputs.shape[1] * inputs.shape[2]
    return float(np.sum((pred - targets) ** 2) / (n_cells * inputs.shape[0]))


def loss(model: KnodeModel, series: FlowSeries) -> float:
    """Mean over cells and transitions of the squared one-step prediction error."""
    inputs, targets = _transitions(series)
    return loss_from_arrays(model, inputs, targets)


def loss_and_grad(model: KnodeModel, inputs: np.ndarray, targets: np.ndarray):
    """Loss on the given transitions and its exact gradient w.r.t. the flat parameters."""
    pred, caches = integrate(model, inputs, tape=True)
    _guard(pred)
    n_cells = inputs.shape[1] * inputs.shape[2]
    norm = 1.0 / (n_cells * inputs.shape[0])
    resid = pred - targets
    value = float(np.sum(resid**2) * norm)
    grad, _ = integrate_backward(model, caches, 2.0 * norm * resid)
    return value, grad


def loss_grad(model: KnodeModel, series: FlowSeries) -> np.ndarray:
    inputs, targets = _transitions(series)
    return loss_and_grad(model, inputs, targets)[1]


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _batches(series: FlowSeries, stride: int):
    idx = np.arange(len(series) - 1)
    if stride == 1:
        return [idx]
    targets_t = series.time_indices[1:]
    return [idx[targets_t % stride == r] for r in range(stride) if np.any(targets_t % stride == r)]


def train(series: FlowSeries, arch: NetArchitecture, config: TrainConfig = TrainConfig(), callback=None):
    """Fit a KNODE model with Adam; returns ``(model, loss_history)``.

    ``loss_history`` is a list of ``(epoch, loss)``: the noise-free loss of the
    parameters at the start of every ``loss_every``-th epoch, plus the loss of
    the returned parameters at ``epoch == config.epochs``.
    """
    if len(series) < 2:
        raise ConfigError("need at least two snapshots to train")
    if arch.input_shape != (series.spec.n_rows, series.spec.n_cols, 2):
        raise ShapeError("architecture does not match the series grid")
    kernel = SmoothingKernel(config.kernel_size, config.kernel_variance)
    model = KnodeModel(arch, netcore.init_params(arch, config.rng_seed), kernel, config.substeps)
    inputs, targets = _transitions(series)
    batches = _batches(series, config.batch_stride)
    noise_rng = np.random.default_rng([config.rng_seed, 1])
    noise_std = float(np.sqrt(config.noise_variance))
    opt = Adam(arch.n_params(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    theta = model.params.values.copy()
    history: list[tuple[int, float]] = []

    def record(epoch):
        try:
            history.append((epoch, loss_from_arrays(model, inputs, targets)))
        except FloatingPointError as exc:
            raise DivergedError("loss evaluation failed", step=epoch, history=history) from exc

    for epoch in range(config.epochs):
        if epoch % config.loss_every == 0:
            record(epoch)
            if not np.isfinite(history[-1][1]):
                raise DivergedError("non-finite loss", step=epoch, history=history)
        noisy = inputs
        if noise_std > 0:
            noisy = inputs + noise_rng.normal(0.0, noise_std, inputs.shape)
        objective = 0.0
        for idx in batches:
            try:
                value, grad = loss_and_grad(model, noisy[idx], targets[idx])
            except DivergedError as exc:
                raise DivergedError("training diverged", step=epoch, history=history) from exc
            objective += value * idx.size / inputs.shape[0]
            theta = opt.step(theta, grad)
            if not np.all(np.isfinite(theta)):
                raise DivergedError("non-finite parameters", step=epoch, history=history)
            model = model.with_params(model.params.replace(theta))
        if callback is not None:
            callback(epoch, objective, model)
        if epoch % 100 == 0:
            log.info("epoch %d objective %.6g", epoch, objective)
    record(config.epochs)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: KnodeModel, loss_history=(), train_config: TrainConfig | None = None) -> Path:
    extra = {
        "kernel": {"size": model.kernel.size, "variance": model.kernel.variance},
        "substeps": model.substeps,
    }
    if train_config is not None:
        extra["train_config"] = asdict(train_config)
    loss_history = [(int(e), float(v)) for e, v in loss_history]
    epoch = loss_history[-1][0] if loss_history else 0
    extra["loss_epochs"] = [e for e, _ in loss_history]
    path = netcore.write_checkpoint(path, model.arch, model.params, epoch, [v for _, v in loss_history], extra)
    with open(Path(path) / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for e, v in loss_history:
            w.writerow([e, repr(v)])
    return path


def load_model(path) -> tuple[KnodeModel, dict]:
    arch, params, man = netcore.read_checkpoint(path)
    k = man.get("kernel", {})
    kernel = SmoothingKernel(int(k.get("size", 5)), float(k.get("variance", 0.1)))
    return KnodeModel(arch, params, kernel, int(man.get("substeps", 6))), man
