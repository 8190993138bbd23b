"""A small numpy neural-network engine: dense and 3x3 convolution layers,
reverse-mode gradients, Adam, finite-difference gradient checking and a
binary checkpoint format.

Tensors are float64. Dense layers take (n, features); conv layers take
NHWC arrays and keep the spatial size (stride 1, zero padding 1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.3
ACTIVATIONS = ("relu", "leaky_relu", "tanh", "logistic", "identity")
KINDS = ("dense", "conv3x3", "activation")
_KINKED = ("relu", "leaky_relu")
_MAGIC = b"NNK1"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int
    fan_out: int
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "activation" and self.fan_in != self.fan_out:
            raise ValueError("activation layers must keep their width")

    @property
    def has_params(self) -> bool:
        return self.kind != "activation"


def dense(fan_in, fan_out, activation="identity") -> LayerSpec:
    return LayerSpec("dense", fan_in, fan_out, activation)


def conv3x3(fan_in, fan_out, activation="identity") -> LayerSpec:
    return LayerSpec("conv3x3", fan_in, fan_out, activation)


def activation(width, kind) -> LayerSpec:
    return LayerSpec("activation", width, width, kind)


# ------------------------------------------------------------- activations


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "tanh":
        return np.tanh(z)
    if name == "logistic":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(name)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "identity":
        return g
    if name == "relu":
        return g * (z > 0)
    if name == "leaky_relu":
        return g * np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return g * (1.0 - a * a)
    if name == "logistic":
        return g * a * (1.0 - a)
    raise ValueError(name)


# ------------------------------------------------------------ convolution


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a same-padded conv input: g convolved with the flipped, transposed kernel."""
    n, h, wd, c_out = g.shape
    flipped = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * c_out, w.shape[2])
    return (_im2col(g) @ flipped).reshape(n, h, wd, w.shape[2])


# ------------------------------------------------------------------ network


def glorot_bound(spec: LayerSpec) -> float:
    k = 9 if spec.kind == "conv3x3" else 1
    return float(np.sqrt(6.0 / (k * spec.fan_in + k * spec.fan_out)))


@dataclass
class Trace:
    """Per-layer caches from a forward pass: (layer input or im2col, pre-activation, output)."""

    inputs: list
    pre: list
    outputs: list

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass
class Network:
    """An ordered chain of layers with parameters [W0, b0, W1, b1, ...]."""

    specs: tuple[LayerSpec, ...]
    params: list[np.ndarray]
    seed: Optional[int] = None

    def __post_init__(self):
        self.specs = tuple(self.specs)
        for a, b in zip(self.specs, self.specs[1:]):
            if a.fan_out != b.fan_in:
                raise ShapeError(f"layer widths do not chain: {a} -> {b}")
        expected = []
        for s in self.specs:
            if s.kind == "dense":
                expected += [(s.fan_in, s.fan_out), (s.fan_out,)]
            elif s.kind == "conv3x3":
                expected += [(3, 3, s.fan_in, s.fan_out), (s.fan_out,)]
        if [tuple(p.shape) for p in self.params] != expected:
            raise ShapeError("parameter shapes do not match the layer specs")

    @classmethod
    def init(cls, specs: Sequence[LayerSpec], seed: int) -> "Network":
        rng = np.random.default_rng(seed)
        params = []
        for s in specs:
            if not s.has_params:
                continue
            bound = glorot_bound(s)
            shape = (s.fan_in, s.fan_out) if s.kind == "dense" else (3, 3, s.fan_in, s.fan_out)
            params.append(rng.uniform(-bound, bound, size=shape))
            params.append(np.zeros(s.fan_out))
        return cls(tuple(specs), params, seed)

    @property
    def in_width(self) -> int:
        return self.specs[0].fan_in

    @property
    def out_width(self) -> int:
        return self.specs[-1].fan_out

    def with_params(self, params) -> "Network":
        return replace(self, params=list(params))

    def copy(self) -> "Network":
        return self.with_params([p.copy() for p in self.params])

    def _layer_params(self):
        i = 0
        for s in self.specs:
            if s.has_params:
                yield s, self.params[i], self.params[i + 1]
                i += 2
            else:
                yield s, None, None

    def forward(self, x: np.ndarray, keep: bool = True) -> Trace:
        """Run the chain. With keep=False only the output is retained."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_width:
            raise ShapeError(f"input has {x.shape[-1]} features, network expects {self.in_width}")
        if self.specs[0].kind == "conv3x3" and x.ndim != 4:
            raise ShapeError("conv networks take NHWC input")
        if self.specs[0].kind == "dense" and x.ndim != 2:
            raise ShapeError("dense networks take (n, features) input")
        inputs, pre, outputs = [], [], []
        a = x
        for spec, w, b in self._layer_params():
            if spec.kind == "dense":
                cache = a
                z = a @ w + b
            elif spec.kind == "conv3x3":
                if a.ndim != 4:
                    raise ShapeError("conv3x3 layer needs NHWC input")
                cols = _im2col(a)
                cache = (cols, a.shape)
                z = (cols @ w.reshape(-1, spec.fan_out) + b).reshape(a.shape[:3] + (spec.fan_out,))
            else:
                cache = None
                z = a
            a = _act(spec.activation, z)
            if keep:
                inputs.append(cache)
                pre.append(z)
                outputs.append(a)
        if not keep:
            outputs.append(a)
        return Trace(inputs, pre, outputs)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, keep=False).output

    def backward(self, trace: Trace, grad_out: np.ndarray, from_preactivation: bool = False):
        """Return (parameter gradients in `params` order, gradient w.r.t. the input).

        With from_preactivation=True, `grad_out` is taken w.r.t. the last
        layer's pre-activation, which keeps e.g. logistic + cross-entropy stable.
        """
        if len(trace.pre) != len(self.specs):
            raise ShapeError("trace was not produced by a keep=True forward pass of this network")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != trace.output.shape:
            raise ShapeError(f"gradient shape {grad_out.shape} != output shape {trace.output.shape}")
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        layers = list(self._layer_params())
        pidx = sum(2 for s in self.specs if s.has_params)
        g = grad_out
        for i in range(len(layers) - 1, -1, -1):
            spec, w, b = layers[i]
            if not (from_preactivation and i == len(layers) - 1):
                g = _act_grad(spec.activation, trace.pre[i], trace.outputs[i], g)
            if spec.kind == "dense":
                pidx -= 2
                x = trace.inputs[i]
                grads[pidx] = x.T @ g
                grads[pidx + 1] = g.sum(axis=0)
                g = g @ w.T
            elif spec.kind == "conv3x3":
                pidx -= 2
                cols, _ = trace.inputs[i]
                gf = g.reshape(-1, spec.fan_out)
                grads[pidx] = (cols.T @ gf).reshape(w.shape)
                grads[pidx + 1] = gf.sum(axis=0)
                g = _conv_input_grad(g, w)
        return grads, g


def forward(net: Network, x: np.ndarray) -> Trace:
    return net.forward(x)


def backward(net: Network, trace: Trace, loss_gradient: np.ndarray) -> list[np.ndarray]:
    return net.backward(trace, loss_gradient)[0]


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns (new params, new state); inputs are not modified."""
    params = [p.copy() for p in params]
    state = replace(state, m=[m.copy() for m in state.m], v=[v.copy() for v in state.v])
    adam_update_(params, grads, state)
    return params, state


def adam_update_(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place form of `adam_step` for training loops: mutates params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p -= state.lr * (m / c1) / denom


# --------------------------------------------------------------- gradcheck


@dataclass
class GradcheckResult:
    max_rel_error: float
    at_kink: bool = False
    n_checked: int = 0

    def __float__(self):
        return self.max_rel_error


LossFn = Callable[[np.ndarray], tuple]


def gradcheck(net: Network, x: np.ndarray, loss: LossFn, step: float = 1e-5, kink_tol: float = 1e-4) -> GradcheckResult:
    """Compare analytic gradients with central differences for every parameter.

    `loss(output)` returns (value, d value / d output). The result is flagged
    `at_kink` when any relu/leaky_relu pre-activation lies within `kink_tol`
    of zero, where the derivative does not exist.
    """
    trace = net.forward(x)
    _, dout = loss(trace.output)
    analytic = net.backward(trace, dout)[0]
    at_kink = any(
        s.activation in _KINKED and np.any(np.abs(z) < kink_tol) for s, z in zip(net.specs, trace.pre)
    )
    worst = 0.0
    count = 0
    for k, p in enumerate(net.params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() if j == k else q for j, q in enumerate(net.params)]
            minus = [q.copy() if j == k else q for j, q in enumerate(net.params)]
            plus[k][idx] += step
            minus[k][idx] -= step
            lp = loss(net.with_params(plus)(x))[0]
            lm = loss(net.with_params(minus)(x))[0]
            numeric = (lp - lm) / (2 * step)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            count += 1
    return GradcheckResult(worst, at_kink, count)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: Network, **extra) -> None:
    """JSON header (specs, seed, extras) followed by float64 little-endian parameters."""
    header = {
        "specs": [[s.kind, s.fan_in, s.fan_out, s.activation] for s in net.specs],
        "seed": net.seed,
        "shapes": [list(p.shape) for p in net.params],
        **extra,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params)
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def load_checkpoint(path) -> tuple[Network, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not an nnkit checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    offset = 8 + hlen
    params = []
    for shape in header["shapes"]:
        n = int(np.prod(shape)) * 8
        params.append(np.frombuffer(raw[offset : offset + n], dtype="<f8").reshape(shape).copy())
        offset += n
    if offset != len(raw):
        raise ValueError(f"{path}: payload size does not match header")
    specs = tuple(LayerSpec(*s) for s in header["specs"])
    return Network(specs, params, header.get("seed")), header
