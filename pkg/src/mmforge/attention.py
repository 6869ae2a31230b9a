"""Differential attention between two observations that select different branches.

For every bottleneck unit whose ternary value differs between the two
observations, integrated gradients attribute the change in that unit's
continuous pre-quantization response to the raw observation coordinates,
with the second observation as the baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import IdenticalCodes, NonFiniteGradient, ShapeMismatch
from .neural import MLP
from .qbn import QBN

DEFAULT_STEPS = 64


def integrated_gradients(grad_fn: Callable[[np.ndarray], np.ndarray], o, o_b, m: int = DEFAULT_STEPS):
    """Midpoint-rule integrated gradients of a scalar response.

    ``grad_fn`` maps a batch of points, shape (k, d), to the response
    gradient at each point, shape (k, d).
    """
    o = np.asarray(o, dtype=float)
    o_b = np.asarray(o_b, dtype=float)
    if o.shape != o_b.shape or o.ndim != 1:
        raise ShapeMismatch(f"observation shapes differ: {o.shape} vs {o_b.shape}")
    if m < 1:
        raise ValueError("m must be >= 1")
    alphas = (np.arange(1, m + 1) - 0.5) / m
    delta = o - o_b
    grads = np.asarray(grad_fn(o_b + alphas[:, None] * delta), dtype=float)
    if grads.shape != (m, o.size):
        raise ShapeMismatch(f"gradient batch has shape {grads.shape}, expected {(m, o.size)}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite gradient along the integration path")
    return delta * grads.mean(axis=0)


class EncoderResponse:
    """Pre-quantization bottleneck units of ``q``, optionally behind a feature net.

    With ``front`` set (the policy's feature layers), responses are functions
    of the raw observation rather than of the features.
    """

    def __init__(self, q: QBN, front: MLP | None = None):
        self.q = q
        self.front = front

    @property
    def input_dim(self) -> int:
        return self.front.in_dim if self.front is not None else self.q.input_dim

    def _features(self, x):
        if self.front is None:
            return x, None
        return self.front.forward(x)

    def value(self, x) -> np.ndarray:
        return self.q.encoder.pre_activation(self._features(np.asarray(x, dtype=float))[0])

    def code(self, x) -> tuple[int, ...]:
        return self.q.code(self._features(np.asarray(x, dtype=float))[0])

    def grad(self, unit: int) -> Callable[[np.ndarray], np.ndarray]:
        def fn(points):
            feats, front_cache = self._features(points)
            _, caches = self.q.encoder.forward(feats)
            gz = np.zeros((len(points), self.q.bottleneck))
            gz[:, unit] = 1.0
            g, _ = self.q.encoder.backward_pre_activation(caches, gz)
            if front_cache is not None:
                g, _ = self.front.backward(front_cache, g)
            return g

        return fn


def _response(q):
    """Wrap a bare QBN; anything already exposing code/value/grad is used as is."""
    return EncoderResponse(q) if isinstance(q, QBN) else q


def differing_features(q, o1, o2) -> list[int]:
    r = _response(q)
    c1, c2 = r.code(o1), r.code(o2)
    return [j for j, (a, b) in enumerate(zip(c1, c2)) if a != b]


@dataclass
class AttentionMap:
    o1: np.ndarray
    o2: np.ndarray
    differing: list[int]
    per_feature: dict[int, np.ndarray]
    combined: np.ndarray
    steps: int
    baseline_is_o2: bool = True

    def to_dict(self) -> dict:
        return {
            "o1": self.o1.tolist(),
            "o2": self.o2.tolist(),
            "baseline_is_o2": self.baseline_is_o2,
            "differing": list(self.differing),
            "per_feature": {str(f): v.tolist() for f, v in self.per_feature.items()},
            "combined": self.combined.tolist(),
            "steps": self.steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj) -> "AttentionMap":
        return cls(
            np.asarray(obj["o1"], dtype=float),
            np.asarray(obj["o2"], dtype=float),
            [int(f) for f in obj["differing"]],
            {int(f): np.asarray(v, dtype=float) for f, v in obj["per_feature"].items()},
            np.asarray(obj["combined"], dtype=float),
            int(obj["steps"]),
            bool(obj.get("baseline_is_o2", True)),
        )


def differential_map(q, o1, o2, m: int = DEFAULT_STEPS) -> AttentionMap:
    """Attribute each differing bottleneck unit to raw coordinates, baseline ``o2``."""
    r = _response(q)
    o1 = np.asarray(o1, dtype=float)
    o2 = np.asarray(o2, dtype=float)
    if o1.shape != (r.input_dim,) or o2.shape != (r.input_dim,):
        raise ShapeMismatch(f"observations must have shape ({r.input_dim},)")
    diff = differing_features(r, o1, o2)
    if not diff:
        raise IdenticalCodes("both observations encode to the same discrete code")
    per = {f: integrated_gradients(r.grad(f), o1, o2, m) for f in diff}
    combined = np.mean([np.abs(v) for v in per.values()], axis=0)
    return AttentionMap(o1, o2, diff, per, combined, m)


def rank_features(amap: AttentionMap | np.ndarray) -> list[int]:
    """Raw coordinates by descending combined attribution, ties to the lower index."""
    combined = amap.combined if isinstance(amap, AttentionMap) else np.asarray(amap)
    return sorted(range(len(combined)), key=lambda i: (-combined[i], i))
