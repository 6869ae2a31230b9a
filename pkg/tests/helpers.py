"""Shared test scaffolding."""

import numpy as np

from mmforge.attention import EncoderResponse, differential_map
from mmforge.automaton import replay
from mmforge.fixtures import make_machine
from mmforge.neural import MLP, Dense, GRUCell, grad_check
from mmforge.qbn import build_qbn
from mmforge.reducer import expand, replay_trace_actions


class GruAsNet:
    """Presents a GRU cell as a one-input net over the concatenation [x, h]."""

    def __init__(self, cell: GRUCell):
        self.cell = cell
        self.params = cell.params

    def forward(self, xh, smooth=False):
        d = self.cell.in_dim
        return self.cell.forward(xh[..., :d], xh[..., d:])

    def backward(self, cache, grad_h):
        gx, gh, grads = self.cell.backward(cache, grad_h)
        return np.concatenate([gx, gh], axis=-1), grads


def dense_case(seed):
    rng = np.random.default_rng(seed)
    d_in, d_out = (int(v) for v in rng.integers(1, 6, 2))
    act = ["identity", "tanh", "elu", "ternary_tanh"][seed % 4]
    return Dense(d_in, d_out, act, rng), rng.standard_normal((3, d_in))


def mlp_case(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(v) for v in rng.integers(1, 6, 3)]
    return MLP(sizes, ["tanh", "tanh"], rng), rng.standard_normal((2, sizes[0]))


def gru_case(seed):
    rng = np.random.default_rng(seed)
    d, n = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    cell = GRUCell(d, n, rng)
    xh = np.concatenate([rng.standard_normal((2, d)), rng.uniform(-1, 1, (2, n))], axis=-1)
    return GruAsNet(cell), xh


def qbn_case(seed, part):
    rng = np.random.default_rng(seed)
    d, b = int(rng.integers(1, 5)), int(rng.integers(1, 3))
    q = build_qbn(d, b, ["hidden", "observation"][seed % 2], seed)
    if part == "encoder":
        return q.encoder, rng.standard_normal((2, d))
    if part == "decoder":
        return q.decoder, rng.uniform(-1, 1, (2, b))
    return q, rng.standard_normal((2, d))


def worst_grad_error(make, n=50):
    return max(grad_check(*make(seed), eps=1e-5, seed=seed) for seed in range(n))


# -- machines and views ------------------------------------------------------------


def chain_with_branches(rng, n=50, branch_p=0.2, n_obs=3):
    """A long chain where some states branch to a random earlier or later state."""
    actions = [int(rng.integers(3)) for _ in range(n)]
    arcs = []
    for s in range(n):
        nxt = (s + 1) % n
        arcs.append((s, 0, nxt, 1))
        if rng.random() < branch_p:
            for o in range(1, n_obs):
                arcs.append((s, o, int(rng.integers(n)), 1))
    return make_machine(actions, arcs, n_obs=n_obs, nh=5, no=2)


def observed(mm, traces):
    return {(s, o, t) for tr in traces for s, o, t, _ in replay(mm, tr)}


def check_view(mm, traces, view):
    for tr in traces:
        assert replay_trace_actions(view, tr) == [s.a for s in tr.steps]
    assert expand(view) == observed(mm, traces)


# -- encoders ----------------------------------------------------------------------


def lively_qbn(d, b, kind, seed, gain=3.0):
    """Untrained encoders sit inside the dead zone; a larger gain spreads the codes out."""
    q = build_qbn(d, b, kind, seed)
    for layer in q.encoder.layers:
        layer.params["W"] *= gain
    return q


def differing_pair(q, rng, scale=2.0, shared=()):
    for _ in range(10_000):
        o1, o2 = rng.normal(scale=scale, size=(2, q.input_dim))
        o2[list(shared)] = o1[list(shared)]
        if q.code(o1) != q.code(o2):
            return o1, o2
    raise AssertionError("encoder maps every probe to one code")


def qbn_residuals(q, o1, o2, m):
    r = EncoderResponse(q)
    amap = differential_map(r, o1, o2, m)
    delta = r.value(o1) - r.value(o2)
    return [abs(amap.per_feature[f].sum() - delta[f]) / max(1.0, abs(delta[f]))
            for f in amap.differing]
