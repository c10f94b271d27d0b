"""Dense patch estimator: 7-channel input patch -> 3-channel metric patch."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

IN_CHANNELS = 7
OUT_CHANNELS = 3
OUTPUT_CLAMP = (0.0, 1.5)
ACTIVATIONS = ("tanh", "relu")


@dataclass
class EstimatorModel:
    """Fully connected network over flattened ``(P, P, 7)`` patches.

    ``weights[i]`` has shape ``(layer_sizes[i], layer_sizes[i + 1])``.
    Hidden layers use ``activation``; the last layer is linear followed by
    an element-wise clamp to ``OUTPUT_CLAMP``.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "tanh"
    patch: int = 32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self.validate()

    def validate(self):
        sizes = self.layer_sizes
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if len(sizes) < 2 or len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValidationError("layer sizes, weights and biases disagree in depth")
        P = self.patch
        if sizes[0] != P * P * IN_CHANNELS or sizes[-1] != P * P * OUT_CHANNELS:
            raise ValidationError(
                f"layer sizes {sizes} do not fit patch {P} ({P * P * IN_CHANNELS} in, {P * P * OUT_CHANNELS} out)")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValidationError(f"layer {i} parameter shapes {w.shape}, {b.shape} do not match sizes")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i} has non-finite parameters")

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def init_model(patch, hidden=(256, 256), activation="tanh", rng=None, output_bias=0.25):
    """Glorot-uniform weights; output biases start inside the clamp range so
    early gradients are not cut off."""
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = (patch * patch * IN_CHANNELS,) + tuple(int(h) for h in hidden) + (patch * patch * OUT_CHANNELS,)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    biases[-1][:] = output_bias
    return EstimatorModel(sizes, weights, biases, activation, patch)


def _act(name, x):
    return np.tanh(x) if name == "tanh" else np.maximum(x, 0.0)


def _act_grad(name, a):
    """Derivative expressed through the activation output ``a``."""
    return 1.0 - a * a if name == "tanh" else (a > 0).astype(np.float64)


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    P = model.patch
    if x.shape[-3:] != (P, P, IN_CHANNELS):
        raise ValidationError(f"input patch shape {x.shape[-3:]} != ({P}, {P}, {IN_CHANNELS})")
    return x


def forward_batch(model, x, keep_cache=False):
    """Outputs ``(N, P, P, 3)`` for inputs ``(N, P, P, 7)``."""
    x = _check_input(model, x)
    n = x.shape[0]
    h = x.reshape(n, -1)
    acts = [h]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else _act(model.activation, z)
        acts.append(h)
    lo, hi = OUTPUT_CLAMP
    out = np.clip(h, lo, hi).reshape(n, model.patch, model.patch, OUT_CHANNELS)
    if keep_cache:
        return out, acts
    return out


def forward(model, patch):
    """Single-patch forward pass ``(P, P, 7) -> (P, P, 3)``."""
    patch = _check_input(model, patch)
    if patch.ndim != 3:
        raise ValidationError("forward takes a single (P, P, 7) patch; use forward_batch for stacks")
    return forward_batch(model, patch[None])[0]


def backward(model, acts, grad_out):
    """Parameter gradients given the cache from ``forward_batch`` and
    ``d loss / d output`` of shape ``(N, P, P, 3)``. Returned in the order
    of ``model.params()``."""
    n = grad_out.shape[0]
    lo, hi = OUTPUT_CLAMP
    pre = acts[-1]
    g = grad_out.reshape(n, -1) * ((pre > lo) & (pre < hi))
    grads = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ model.weights[i].T) * _act_grad(model.activation, acts[i])
    return grads


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValidationError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model, stem):
    """``<stem>.model.json`` (architecture) + ``<stem>.model.raw`` (f64le)."""
    model.validate()
    header = {
        "layer_sizes": list(model.layer_sizes),
        "activation": model.activation,
        "patch": model.patch,
        "in_channels": IN_CHANNELS,
        "out_channels": OUT_CHANNELS,
        "dtype": "f64le",
        "n_params": model.n_params,
        "meta": model.meta,
    }
    parent = os.path.dirname(os.fspath(stem))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(f"{stem}.model.json", "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(f"{stem}.model.raw", "wb") as f:
        for p in model.params():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(stem):
    try:
        with open(f"{stem}.model.json", encoding="utf-8") as f:
            header = json.load(f)
        sizes = [int(s) for s in header["layer_sizes"]]
        dtype = header["dtype"]
        patch = int(header["patch"])
        activation = header["activation"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad model header: {exc}") from None
    if dtype != "f64le":
        raise FormatError(f"unknown model dtype {dtype!r}")
    with open(f"{stem}.model.raw", "rb") as f:
        raw = f.read()
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(raw) != 8 * expected:
        raise FormatError(f"model payload has {len(raw) // 8} values, header implies {expected}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    weights, biases, off = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[off:off + a * b].reshape(a, b))
        off += a * b
        biases.append(flat[off:off + b].copy())
        off += b
    return EstimatorModel(sizes, weights, biases, activation, patch, header.get("meta", {}))
