"""Fixed-architecture convolutional encoder / dense decoder with hand-written reverse mode.

Tensors are channels-last, ``(batch, rows, cols, channels)``. A ``Dense``
layer flattens whatever it receives; ``Reshape`` restores the grid shape of
the network input. All arithmetic is float64.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, FormatError, ShapeError, VersionError
from .grid import FlowSnapshot

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class Conv2D:
    channels_out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    activation: str = "tanh"

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"Conv2D needs a (rows, cols, channels) input, got {shape}")
        h, w, _ = shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2D kernel {self.kernel} does not fit input {shape}")
        return (ho, wo, self.channels_out)


@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "relu"

    def out_shape(self, shape):
        return (self.width,)


@dataclass(frozen=True)
class Reshape:
    """Reshape to the network's input shape."""

    def out_shape(self, shape):
        return shape  # resolved by NetArchitecture


Layer = Union[Conv2D, Dense, Reshape]


@dataclass(frozen=True)
class NetArchitecture:
    layers: tuple
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        for layer in self.layers:
            act = getattr(layer, "activation", "identity")
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
        if self.shapes()[-1] != self.input_shape:
            raise ShapeError(f"network output shape {self.shapes()[-1]} != input shape {self.input_shape}")

    def shapes(self) -> list[tuple]:
        """Activation shape after each layer, starting with the input shape."""
        shapes = [self.input_shape]
        for layer in self.layers:
            cur = shapes[-1]
            if isinstance(layer, Reshape):
                if int(np.prod(cur)) != int(np.prod(self.input_shape)):
                    raise ShapeError(f"cannot reshape {cur} to {self.input_shape}")
                shapes.append(self.input_shape)
            else:
                shapes.append(layer.out_shape(cur))
        return shapes

    def param_shapes(self) -> list[tuple[int, str, tuple]]:
        """``(layer_index, name, shape)`` for every parameter block, in storage order."""
        out = []
        shapes = self.shapes()
        for i, layer in enumerate(self.layers):
            fan_shape = shapes[i]
            if isinstance(layer, Conv2D):
                c_in = fan_shape[2]
                out.append((i, "W", (layer.kernel, layer.kernel, c_in, layer.channels_out)))
                out.append((i, "b", (layer.channels_out,)))
            elif isinstance(layer, Dense):
                out.append((i, "W", (int(np.prod(fan_shape)), layer.width)))
                out.append((i, "b", (layer.width,)))
        return out

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, _, s in self.param_shapes())

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"type": type(layer).__name__, **asdict(layer)} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetArchitecture":
        kinds = {"Conv2D": Conv2D, "Dense": Dense, "Reshape": Reshape}
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            kind = spec.pop("type")
            if kind not in kinds:
                raise ConfigError(f"unknown layer type {kind!r}")
            layers.append(kinds[kind](**spec))
        return cls(tuple(layers), tuple(d["input_shape"]))


def reference_architecture(n_rows: int = 30, n_cols: int = 30) -> NetArchitecture:
    return NetArchitecture(
        (
            Conv2D(16, 3, 1, 1, "tanh"),
            Conv2D(32, 3, 2, 1, "tanh"),
            Conv2D(32, 3, 2, 1, "tanh"),
            Dense(256, "relu"),
            Dense(n_rows * n_cols * 2, "identity"),
            Reshape(),
        ),
        (n_rows, n_cols, 2),
    )


def paper_architecture(n_rows: int = 30, n_cols: int = 30) -> NetArchitecture:
    """Five conv layers (32, 64, 128, 128, 128 channels), then two dense layers.

    The second dense layer must produce the full field, so its width is the
    grid size times two rather than 128.
    """
    return NetArchitecture(
        (
            Conv2D(32, 3, 1, 0, "tanh"),
            Conv2D(64, 3, 1, 0, "tanh"),
            Conv2D(128, 3, 2, 1, "tanh"),
            Conv2D(128, 3, 2, 1, "tanh"),
            Conv2D(128, 3, 2, 0, "tanh"),
            Dense(128, "relu"),
            Dense(n_rows * n_cols * 2, "identity"),
            Reshape(),
        ),
        (n_rows, n_cols, 2),
    )


def small_architecture(n_rows: int, n_cols: int, channels: int = 3, hidden: int = 8) -> NetArchitecture:
    """Reduced net with every layer kind, for gradient checks."""
    return NetArchitecture(
        (
            Conv2D(channels, 3, 1, 1, "tanh"),
            Conv2D(channels, 3, 2, 1, "tanh"),
            Dense(hidden, "relu"),
            Dense(n_rows * n_cols * 2, "identity"),
            Reshape(),
        ),
        (n_rows, n_cols, 2),
    )


PRESETS = {"reference": reference_architecture, "paper": paper_architecture}


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    layout: tuple  # ((layer_index, name, offset, shape), ...)
    init_seed: int | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        total = sum(int(np.prod(shape)) for _, _, _, shape in self.layout)
        if vals.size != total:
            raise ShapeError(f"parameter vector has {vals.size} entries, layout needs {total}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameters must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None

    def block(self, layer_index: int, name: str) -> np.ndarray:
        for li, nm, off, shape in self.layout:
            if li == layer_index and nm == name:
                return self.values[off : off + int(np.prod(shape))].reshape(shape)
        raise KeyError((layer_index, name))

    def replace(self, values) -> "ParameterVector":
        return ParameterVector(values, self.layout, self.init_seed)


def make_layout(arch: NetArchitecture) -> tuple:
    layout, off = [], 0
    for li, name, shape in arch.param_shapes():
        layout.append((li, name, off, tuple(shape)))
        off += int(np.prod(shape))
    return tuple(layout)


def init_params(arch: NetArchitecture, seed: int) -> ParameterVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias of a layer."""
    rng = np.random.default_rng(seed)
    layout = make_layout(arch)
    shapes = arch.shapes()
    vals = np.empty(sum(int(np.prod(s)) for *_, s in layout))
    for li, name, off, shape in layout:
        layer = arch.layers[li]
        if isinstance(layer, Conv2D):
            fan_in = layer.kernel * layer.kernel * shapes[li][2]
        else:
            fan_in = int(np.prod(shapes[li]))
        n = int(np.prod(shape))
        bound = 1.0 / np.sqrt(fan_in)
        vals[off : off + n] = rng.uniform(-bound, bound, n)
    return ParameterVector(vals, layout, seed)


def zero_params(arch: NetArchitecture) -> ParameterVector:
    layout = make_layout(arch)
    return ParameterVector(np.zeros(arch.n_params()), layout, None)


# ---------------------------------------------------------------------------
# batched engine


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(dy, y, kind):
    if kind == "tanh":
        return dy * (1.0 - y * y)
    if kind == "relu":
        return dy * (y > 0)
    return dy


def _im2col(x, k, s, p):
    b, h, w, c = x.shape
    x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else np.ascontiguousarray(x)
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    sb, sh, sw, sc = x.strides
    view = as_strided(x, (b, ho, wo, k, k, c), (sb, sh * s, sw * s, sh, sw, sc), writeable=False)
    return view.reshape(b * ho * wo, k * k * c), ho, wo


def _conv_input_grad(dz, W, x_shape, s, p, ho, wo):
    """Scatter ``dz @ W[i, j].T`` back onto the (padded) input, one kernel offset at a time."""
    b, h, w, c = x_shape
    k = W.shape[0]
    dxp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += (dz @ W[i, j].T).reshape(b, ho, wo, c)
    return dxp[:, p : p + h, p : p + w, :]


def _blocks(arch, flat):
    """Per-layer ``(W, b)`` views into the flat parameter array."""
    out = {}
    for li, name, off, shape in make_layout(arch):
        out[(li, name)] = flat[off : off + int(np.prod(shape))].reshape(shape)
    return out


def forward_batch(arch: NetArchitecture, flat: np.ndarray, x: np.ndarray):
    """Evaluate the network on ``x`` of shape ``(batch, *input_shape)``.

    Returns ``(y, cache)``; ``cache`` feeds :func:`backward_batch`.
    """
    if x.shape[1:] != arch.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != architecture input {arch.input_shape}")
    p = _blocks(arch, flat)
    cache = []
    h = x
    for li, layer in enumerate(arch.layers):
        if isinstance(layer, Conv2D):
            cols, ho, wo = _im2col(h, layer.kernel, layer.stride, layer.padding)
            W = p[(li, "W")].reshape(-1, layer.channels_out)
            z = cols @ W + p[(li, "b")]
            y = _activate(z, layer.activation).reshape(h.shape[0], ho, wo, layer.channels_out)
            cache.append((cols, h.shape, ho, wo, y))
        elif isinstance(layer, Dense):
            inp = h.reshape(h.shape[0], -1)
            y = _activate(inp @ p[(li, "W")] + p[(li, "b")], layer.activation)
            cache.append((inp, h.shape, y))
        else:
            cache.append((h.shape,))
            y = h.reshape((h.shape[0],) + arch.input_shape)
        h = y
    return h, cache


def backward_batch(arch: NetArchitecture, flat: np.ndarray, cache, dy: np.ndarray, need_input_grad: bool = True):
    """Reverse pass: gradients of ``sum(dy * y)`` w.r.t. parameters and input."""
    p = _blocks(arch, flat)
    grad = np.zeros_like(flat)
    g = _blocks(arch, grad)
    d = dy
    for li in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[li]
        last = li == 0 and not need_input_grad
        if isinstance(layer, Conv2D):
            cols, in_shape, ho, wo, y = cache[li]
            dz = _activation_grad(d, y, layer.activation).reshape(-1, layer.channels_out)
            g[(li, "W")][...] = (cols.T @ dz).reshape(g[(li, "W")].shape)
            g[(li, "b")][...] = dz.sum(axis=0)
            if last:
                d = None
                break
            d = _conv_input_grad(dz, p[(li, "W")], in_shape, layer.stride, layer.padding, ho, wo)
        elif isinstance(layer, Dense):
            inp, in_shape, y = cache[li]
            dz = _activation_grad(d, y, layer.activation)
            g[(li, "W")][...] = inp.T @ dz
            g[(li, "b")][...] = dz.sum(axis=0)
            if last:
                d = None
                break
            d = (dz @ p[(li, "W")].T).reshape(in_shape)
        else:
            (in_shape,) = cache[li]
            d = d.reshape(in_shape)
    return grad, d


# ---------------------------------------------------------------------------
# snapshot-level API


def _check(arch, params):
    if params.layout != make_layout(arch):
        raise ShapeError("parameter layout does not match architecture")


def forward(arch: NetArchitecture, params: ParameterVector, inp: FlowSnapshot) -> FlowSnapshot:
    _check(arch, params)
    if inp.values.shape != arch.input_shape:
        raise ShapeError(f"snapshot shape {inp.values.shape} != architecture input {arch.input_shape}")
    y, _ = forward_batch(arch, params.values, inp.values[None])
    return inp.with_values(y[0])


def backward(arch: NetArchitecture, params: ParameterVector, inp: FlowSnapshot, cotangent: FlowSnapshot):
    """``(d<c, f(x)>/d params, d<c, f(x)>/d x)`` for cotangent ``c``."""
    _check(arch, params)
    if inp.values.shape != arch.input_shape or cotangent.values.shape != arch.input_shape:
        raise ShapeError("input and cotangent must match the architecture input shape")
    _, cache = forward_batch(arch, params.values, inp.values[None])
    grad, dx = backward_batch(arch, params.values, cache, cotangent.values[None])
    return params.replace(grad), inp.with_values(dx[0])


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + params.f64


def write_checkpoint(path, arch: NetArchitecture, params: ParameterVector, epoch: int = 0,
                     loss_history: Sequence[float] = (), extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    man = {
        "format": "passt-checkpoint",
        "version": 1,
        "architecture": arch.to_dict(),
        "n_params": arch.n_params(),
        "seed": params.init_seed,
        "epoch": int(epoch),
        "loss_history": [float(v) for v in loss_history],
    }
    man.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(man, indent=2) + "\n")
    (path / "params.f64").write_bytes(np.ascontiguousarray(params.values, dtype="<f8").tobytes())
    return path


def read_checkpoint(path):
    """Return ``(arch, params, manifest)``."""
    path = Path(path)
    raw = (path / "manifest.json").read_bytes()
    try:
        man = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint manifest is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if man.get("version") != 1:
        raise VersionError(f"unsupported checkpoint version {man.get('version')}")
    arch = NetArchitecture.from_dict(man["architecture"])
    payload = (path / "params.f64").read_bytes()
    expected = arch.n_params() * 8
    if len(payload) != expected:
        raise FormatError(f"params payload is {len(payload)} bytes, expected {expected}",
                          offset=min(len(payload), expected))
    vals = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return arch, ParameterVector(vals, make_layout(arch), man.get("seed")), man
