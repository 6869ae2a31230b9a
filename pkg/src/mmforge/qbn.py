"""Quantized bottleneck autoencoders.

Encoder widths follow 8B -> 4B -> B with tanh between layers and a ternary
unit on the bottleneck; the decoder mirrors them. Observation autoencoders
end in ReLU6 (their inputs are ReLU6 features), hidden-state autoencoders in
tanh.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataset, ShapeMismatch
from .neural import MLP, Adam, clip_grad_norm, load_params, save_params, ternary_tanh_forward


class QbnKind(str, enum.Enum):
    HIDDEN = "hidden"
    OBSERVATION = "observation"


class QBN:
    def __init__(self, input_dim: int, bottleneck: int, kind: QbnKind | str,
                 rng: np.random.Generator | None = None):
        if input_dim < 1 or bottleneck < 1:
            raise ValueError("input_dim and bottleneck must be >= 1")
        self.kind = QbnKind(kind)
        self.input_dim = input_dim
        self.bottleneck = b = bottleneck
        out_act = "relu6" if self.kind is QbnKind.OBSERVATION else "tanh"
        self.encoder = MLP([input_dim, 8 * b, 4 * b, b], ["tanh", "tanh", "ternary_tanh"], rng)
        self.decoder = MLP([b, 4 * b, 8 * b, input_dim], ["tanh", "tanh", out_act], rng)

    # -- parameters ---------------------------------------------------------

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return out

    def load(self, params) -> None:
        self.encoder.load({k[4:]: v for k, v in params.items() if k.startswith("enc.")})
        self.decoder.load({k[4:]: v for k, v in params.items() if k.startswith("dec.")})

    def copy(self) -> "QBN":
        return copy.deepcopy(self)

    def to_bytes(self) -> bytes:
        meta = {"type": "qbn", "kind": self.kind.value, "input_dim": self.input_dim,
                "bottleneck": self.bottleneck}
        return save_params(self.params, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "QBN":
        params, meta = load_params(data)
        if meta.get("type") != "qbn":
            raise ValueError("checkpoint does not hold a QBN")
        q = cls(meta["input_dim"], meta["bottleneck"], meta["kind"])
        q.load(params)
        return q

    # -- inference ----------------------------------------------------------

    def _check(self, x, width):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != width:
            raise ShapeMismatch(f"expected width {width}, got {x.shape[-1]}")
        return x

    def encode(self, x):
        """Return ``(code, continuous)``; ``continuous`` is the bottleneck pre-activation."""
        x = self._check(x, self.input_dim)
        z = self.encoder.pre_activation(x)
        return ternary_tanh_forward(z).astype(int), z

    def code(self, x) -> tuple[int, ...]:
        return tuple(int(v) for v in self.encode(x)[0])

    def decode(self, code):
        code = self._check(code, self.bottleneck)
        return self.decoder.forward(code)[0]

    def forward(self, x, smooth: bool = False):
        x = self._check(x, self.input_dim)
        c, enc_cache = self.encoder.forward(x, smooth)
        y, dec_cache = self.decoder.forward(c, smooth)
        return y, (enc_cache, dec_cache)

    def backward(self, cache, grad_y):
        enc_cache, dec_cache = cache
        g, dec_grads = self.decoder.backward(dec_cache, grad_y)
        gx, enc_grads = self.encoder.backward(enc_cache, g)
        grads = {f"enc.{k}": v for k, v in enc_grads.items()}
        grads.update({f"dec.{k}": v for k, v in dec_grads.items()})
        return gx, grads

    def reconstruction_loss(self, data) -> float:
        y, _ = self.forward(data)
        return float(np.mean((y - data) ** 2))


def build_qbn(input_dim: int, bottleneck: int, kind: QbnKind | str, seed: int = 0) -> QBN:
    return QBN(input_dim, bottleneck, kind, np.random.default_rng(seed))


def encode(q: QBN, x):
    return q.encode(x)


def decode(q: QBN, code):
    return q.decode(code)


@dataclass
class QbnTrainConfig:
    lr: float = 1e-4
    max_norm: float = 5.0
    epochs: int = 200
    batch: int = 32
    patience: int = 20
    seed: int = 0


def _revive_dead_outputs(q: QBN, data) -> None:
    """Shift ReLU6 output units that are off on every input but have positive targets.

    Such a unit gets no gradient and would stay at zero for the whole run.
    """
    if q.kind is not QbnKind.OBSERVATION:
        return
    last = q.decoder.layers[-1]
    z = q.decoder.pre_activation(q.encoder.forward(data)[0])
    dead = (z.max(axis=0) <= 0) & (data.max(axis=0) > 0)
    last.params["b"] = np.where(dead, last.params["b"] - z.max(axis=0) + 0.1, last.params["b"])


def train_qbn(q: QBN, dataset, config: QbnTrainConfig | None = None) -> tuple[QBN, list[float]]:
    """Minimize mean squared reconstruction error with straight-through gradients.

    Returns a trained copy and the full-dataset loss before training and
    after every epoch. Training stops early once ``patience`` epochs pass
    without a new best loss; the best parameters seen are returned.
    """
    config = config or QbnTrainConfig()
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 2 or len(data) == 0:
        raise EmptyDataset("dataset must be a non-empty 2-d array")
    if data.shape[1] != q.input_dim:
        raise ShapeMismatch(f"dataset width {data.shape[1]} != {q.input_dim}")
    q = q.copy()
    _revive_dead_outputs(q, data)
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr)
    history = [q.reconstruction_loss(data)]
    best, best_params, stale = history[0], q.params, 0
    best_params = {k: v.copy() for k, v in best_params.items()}
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        for i in range(0, len(data), config.batch):
            x = data[order[i:i + config.batch]]
            y, cache = q.forward(x)
            _, grads = q.backward(cache, 2.0 * (y - x) / y.size)
            grads = clip_grad_norm(grads, config.max_norm)
            q.load(opt.step(q.params, grads))
        loss = q.reconstruction_loss(data)
        history.append(loss)
        if loss < best:
            best, stale = loss, 0
            best_params = {k: v.copy() for k, v in q.params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    q.load(best_params)
    return q, history


def distinct_codes(q: QBN, data) -> int:
    codes, _ = q.encode(np.asarray(data, dtype=float))
    return len({tuple(c) for c in np.atleast_2d(codes)})
