"""A small float64 numerical kernel: dense layers, a GRU cell, a ternary
quantizer with straight-through gradients, Adam and gradient checking.

Modules keep their parameters in a ``params`` dict of numpy arrays and
expose ``forward(x) -> (y, cache)`` and ``backward(cache, grad_y) ->
(grad_x, grads)`` where ``grads`` is keyed like ``params``.
"""

from __future__ import annotations

import io
import json
from typing import Callable, Mapping

import numpy as np

from .errors import ShapeMismatch

# ---------------------------------------------------------------------------
# Activations


def ternary_surrogate(x):
    """Smooth map whose rounding gives the ternary code."""
    return 1.5 * np.tanh(x) + 0.5 * np.tanh(-3.0 * x)


def ternary_surrogate_grad(x):
    return 1.5 * (1.0 - np.tanh(x) ** 2) - 1.5 * (1.0 - np.tanh(-3.0 * x) ** 2)


def ternary_tanh_forward(x):
    t = ternary_surrogate(np.asarray(x, dtype=float))
    return np.where(np.abs(t) > 0.5, np.sign(t), 0.0)


def ternary_tanh_backward(x, grad):
    """Straight-through: pass ``grad`` through the rounding, scaled by t'(x)."""
    return np.asarray(grad) * ternary_surrogate_grad(np.asarray(x, dtype=float))


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


# name -> (forward(z, smooth), derivative(z, y))
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda z, s: z, lambda z, y: np.ones_like(z)),
    "tanh": (lambda z, s: np.tanh(z), lambda z, y: 1.0 - y * y),
    "relu6": (lambda z, s: np.clip(z, 0.0, 6.0), lambda z, y: ((z > 0) & (z < 6)).astype(float)),
    "elu": (lambda z, s: _elu(z), lambda z, y: np.where(z > 0, 1.0, y + 1.0)),
    "ternary_tanh": (
        lambda z, s: ternary_surrogate(z) if s else ternary_tanh_forward(z),
        lambda z, y: ternary_surrogate_grad(z),
    ),
}


# ---------------------------------------------------------------------------
# Layers


def uniform_init(rng: np.random.Generator, fan_out: int, fan_in: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)


class Dense:
    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        if rng is None:
            self.params = {"W": np.zeros((out_dim, in_dim)), "b": np.zeros(out_dim)}
        else:
            W, b = uniform_init(rng, out_dim, in_dim)
            self.params = {"W": W, "b": b}

    @property
    def in_dim(self) -> int:
        return self.params["W"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["W"].shape[0]

    def forward(self, x, smooth: bool = False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        z = x @ self.params["W"].T + self.params["b"]
        y = ACTIVATIONS[self.activation][0](z, smooth)
        return y, (x, z, y)

    def backward(self, cache, grad_y):
        x, z, y = cache
        gz = np.asarray(grad_y) * ACTIVATIONS[self.activation][1](z, y)
        x2 = x.reshape(-1, x.shape[-1])
        gz2 = gz.reshape(-1, gz.shape[-1])
        grads = {"W": gz2.T @ x2, "b": gz2.sum(axis=0)}
        return gz @ self.params["W"], grads


class MLP:
    """Stack of dense layers; parameters are named ``"<layer>.W"``/``"<layer>.b"``."""

    def __init__(self, sizes, activations, rng: np.random.Generator | None = None):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        self.layers = [Dense(a, b, act, rng) for a, b, act in zip(sizes[:-1], sizes[1:], activations)]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def load(self, params: Mapping[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                value = np.asarray(params[f"{i}.{k}"], dtype=float)
                if value.shape != layer.params[k].shape:
                    raise ShapeMismatch(f"{i}.{k}: {value.shape} != {layer.params[k].shape}")
                layer.params[k] = value.copy()

    @property
    def widths(self) -> list[int]:
        return [layer.out_dim for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x, smooth: bool = False, upto: int | None = None):
        caches = []
        for layer in self.layers[:upto]:
            x, c = layer.forward(x, smooth)
            caches.append(c)
        return x, caches

    def pre_activation(self, x):
        """Input of the final activation (the last layer's affine output)."""
        h, _ = self.forward(x, upto=len(self.layers) - 1)
        last = self.layers[-1]
        return np.asarray(h) @ last.params["W"].T + last.params["b"]

    def backward(self, caches, grad_y):
        grads = {}
        g = grad_y
        for i in range(len(caches) - 1, -1, -1):
            g, lg = self.layers[i].backward(caches[i], g)
            for k, v in lg.items():
                grads[f"{i}.{k}"] = v
        return g, grads

    def backward_pre_activation(self, caches, grad_z):
        """Backward from a gradient on the last layer's pre-activation."""
        x, z, _ = caches[-1]
        last = self.layers[-1]
        gz2 = grad_z.reshape(-1, grad_z.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        grads = {f"{len(caches) - 1}.W": gz2.T @ x2, f"{len(caches) - 1}.b": gz2.sum(axis=0)}
        g = grad_z @ last.params["W"]
        for i in range(len(caches) - 2, -1, -1):
            g, lg = self.layers[i].backward(caches[i], g)
            for k, v in lg.items():
                grads[f"{i}.{k}"] = v
        return g, grads


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GRUCell:
    """Gated recurrent unit with reset/update/candidate gates stacked as r, z, n."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator | None = None):
        self.hidden = hidden
        if rng is None:
            self.params = {
                "W_ih": np.zeros((3 * hidden, in_dim)),
                "W_hh": np.zeros((3 * hidden, hidden)),
                "b_ih": np.zeros(3 * hidden),
                "b_hh": np.zeros(3 * hidden),
            }
        else:
            # every tensor uniform in +-1/sqrt(hidden)
            bound = 1.0 / np.sqrt(hidden)
            shapes = {"W_ih": (3 * hidden, in_dim), "W_hh": (3 * hidden, hidden),
                      "b_ih": (3 * hidden,), "b_hh": (3 * hidden,)}
            self.params = {k: rng.uniform(-bound, bound, s) for k, s in shapes.items()}

    @property
    def in_dim(self) -> int:
        return self.params["W_ih"].shape[1]

    def load(self, params):
        for k in self.params:
            value = np.asarray(params[k], dtype=float)
            if value.shape != self.params[k].shape:
                raise ShapeMismatch(f"{k}: {value.shape} != {self.params[k].shape}")
            self.params[k] = value.copy()

    def forward(self, x, h):
        x = np.asarray(x, dtype=float)
        h = np.asarray(h, dtype=float)
        if x.shape[-1] != self.in_dim or h.shape[-1] != self.hidden:
            raise ShapeMismatch(
                f"GRU expects ({self.in_dim}, {self.hidden}), got ({x.shape[-1]}, {h.shape[-1]})"
            )
        p, n = self.params, self.hidden
        gx = x @ p["W_ih"].T + p["b_ih"]
        gh = h @ p["W_hh"].T + p["b_hh"]
        r = _sigmoid(gx[..., :n] + gh[..., :n])
        z = _sigmoid(gx[..., n:2 * n] + gh[..., n:2 * n])
        hn = gh[..., 2 * n:]
        cand = np.tanh(gx[..., 2 * n:] + r * hn)
        h_new = (1.0 - z) * cand + z * h
        return h_new, (x, h, r, z, hn, cand)

    def backward(self, cache, grad_h):
        x, h, r, z, hn, cand = cache
        p = self.params
        d_cand = grad_h * (1.0 - z)
        d_z = grad_h * (h - cand)
        d_h = grad_h * z
        da_n = d_cand * (1.0 - cand * cand)
        d_hn = da_n * r
        da_r = da_n * hn * r * (1.0 - r)
        da_z = d_z * z * (1.0 - z)
        g_x = np.concatenate([da_r, da_z, da_n], axis=-1)
        g_h = np.concatenate([da_r, da_z, d_hn], axis=-1)
        x2, h2 = x.reshape(-1, x.shape[-1]), h.reshape(-1, h.shape[-1])
        gx2, gh2 = g_x.reshape(-1, g_x.shape[-1]), g_h.reshape(-1, g_h.shape[-1])
        grads = {
            "W_ih": gx2.T @ x2,
            "W_hh": gh2.T @ h2,
            "b_ih": gx2.sum(axis=0),
            "b_hh": gh2.sum(axis=0),
        }
        return g_x @ p["W_ih"], d_h + g_h @ p["W_hh"], grads


def gru_cell(x, h, params: Mapping[str, np.ndarray]):
    cell = GRUCell(np.shape(params["W_ih"])[1], np.shape(params["W_hh"])[1])
    cell.load(params)
    return cell.forward(x, h)[0]


# ---------------------------------------------------------------------------
# Optimisation


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    scale = max_norm / norm if norm > max_norm else 1.0
    return {k: g * scale for k, g in grads.items()}


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update; returns new parameters and mutates ``state``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    t = state.get("t", 0) + 1
    state["t"] = t
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p
            continue
        m[k] = beta1 * m.get(k, 0.0) + (1 - beta1) * g
        v[k] = beta2 * v.get(k, 0.0) + (1 - beta2) * g * g
        m_hat = m[k] / (1 - beta1**t)
        v_hat = v[k] / (1 - beta2**t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def step(self, params: dict, grads: Mapping[str, np.ndarray]) -> dict:
        return adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# Gradient checking


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_relative_error(a, b, floor: float = 1e-5) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def grad_check(net, x, eps: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(R * net(x))`` for a fixed random ``R``. Ternary
    units are evaluated through their smooth surrogate, since the rounding has
    no derivative to check. Covers all parameters and the input.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=float)
    y, caches = net.forward(x, smooth=True)
    R = np.random.default_rng(seed).standard_normal(np.shape(y))
    gx, grads = net.backward(caches, R)

    def loss():
        return float(np.sum(R * net.forward(x, smooth=True)[0]))

    worst = max_relative_error(gx, numeric_grad(loss, x, eps))
    params = net.params
    for k, p in params.items():
        worst = max(worst, max_relative_error(grads[k], numeric_grad(loss, p, eps)))
    return worst


# ---------------------------------------------------------------------------
# Checkpoints


def save_params(params: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize to a JSON header line followed by little-endian float64 data."""
    header = {
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for v in params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def load_params(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    offset = nl + 1
    params = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
        params[t["name"]] = arr.astype(float)
        offset += 8 * n
    if offset != len(data):
        raise ValueError("checkpoint has trailing bytes")
    return params, header["meta"]


__all__ = [
    "ACTIVATIONS", "Adam", "Dense", "GRUCell", "MLP", "adam_step", "clip_grad_norm",
    "global_norm", "grad_check", "gru_cell", "load_params", "max_relative_error",
    "numeric_grad", "save_params", "ternary_surrogate", "ternary_tanh_backward",
    "ternary_tanh_forward",
]
