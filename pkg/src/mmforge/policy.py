"""Recurrent policy networks, behavior cloning, QBN insertion and trace collection.

The network reads an observation, extracts features, folds them into its
memory with a GRU and then picks the greedy action of the policy head on the
updated memory::

    f_t = features(o_t);  h_{t+1} = gru(f_t, h_t);  a_t = argmax pi(h_{t+1})

With quantized bottlenecks inserted, ``f_t`` and ``h_{t+1}`` are replaced by
their autoencoder reconstructions, which makes the whole step a function of
the two ternary codes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .automaton import Trace, TransitionTuple
from .errors import ExpertFailure, ShapeMismatch
from .neural import MLP, Adam, Dense, GRUCell, clip_grad_norm, load_params, save_params
from .qbn import QBN, QbnKind


class RPN:
    """Feature layers (16 ELU, 8 ReLU6), a GRU memory, policy and value heads."""

    def __init__(self, obs_dim: int, action_count: int, hidden: int = 8, seed: int | None = 0,
                 feature_sizes=(16, 8)):
        rng = None if seed is None else np.random.default_rng(seed)
        self.obs_dim = obs_dim
        self.action_count = action_count
        self.hidden = hidden
        self.feature_sizes = tuple(feature_sizes)
        self.features = MLP([obs_dim, *feature_sizes], ["elu", "relu6"], rng)
        self.gru = GRUCell(feature_sizes[-1], hidden, rng)
        self.policy = Dense(hidden, action_count, "identity", rng)
        self.value = Dense(hidden, 1, "identity", rng)

    @property
    def feature_dim(self) -> int:
        return self.feature_sizes[-1]

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"feat.{k}": v for k, v in self.features.params.items()}
        out.update({f"gru.{k}": v for k, v in self.gru.params.items()})
        out.update({f"pi.{k}": v for k, v in self.policy.params.items()})
        out.update({f"v.{k}": v for k, v in self.value.params.items()})
        return out

    def load(self, params) -> None:
        self.features.load({k[5:]: v for k, v in params.items() if k.startswith("feat.")})
        self.gru.load({k[4:]: v for k, v in params.items() if k.startswith("gru.")})
        for name, layer in (("pi.", self.policy), ("v.", self.value)):
            for k in layer.params:
                value = np.asarray(params[name + k], dtype=float)
                if value.shape != layer.params[k].shape:
                    raise ShapeMismatch(f"{name}{k}: {value.shape}")
                layer.params[k] = value.copy()

    def copy(self) -> "RPN":
        return copy.deepcopy(self)

    def to_bytes(self) -> bytes:
        meta = {"type": "rpn", "obs_dim": self.obs_dim, "action_count": self.action_count,
                "hidden": self.hidden, "feature_sizes": list(self.feature_sizes)}
        return save_params(self.params, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RPN":
        params, meta = load_params(data)
        if meta.get("type") != "rpn":
            raise ValueError("checkpoint does not hold a recurrent policy")
        rpn = cls(meta["obs_dim"], meta["action_count"], meta["hidden"], None,
                  tuple(meta["feature_sizes"]))
        rpn.load(params)
        return rpn

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.hidden)

    def featurize(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.obs_dim:
            raise ShapeMismatch(f"observation width {obs.shape[-1]} != {self.obs_dim}")
        return self.features.forward(obs)[0]

    def step(self, obs, h):
        h_new = self.gru.forward(self.featurize(obs), h)[0]
        return self.policy.forward(h_new)[0], h_new


def rpn_step(rpn: RPN, obs, h):
    """Return ``(logits, h')``; the greedy action is ``argmax(logits)``."""
    return rpn.step(obs, h)


class DiscretizedRPN:
    """An RPN whose feature and memory wires pass through quantized autoencoders.

    Either autoencoder may be ``None``, in which case that wire is continuous.
    """

    def __init__(self, rpn: RPN, q_h: QBN | None, q_o: QBN | None):
        self.rpn = rpn
        self.q_h = q_h
        self.q_o = q_o

    def copy(self) -> "DiscretizedRPN":
        return copy.deepcopy(self)

    def remove_qbns(self) -> RPN:
        return self.rpn

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"rpn.{k}": v for k, v in self.rpn.params.items()}
        if self.q_h is not None:
            out.update({f"qh.{k}": v for k, v in self.q_h.params.items()})
        if self.q_o is not None:
            out.update({f"qo.{k}": v for k, v in self.q_o.params.items()})
        return out

    def load(self, params) -> None:
        self.rpn.load({k[4:]: v for k, v in params.items() if k.startswith("rpn.")})
        if self.q_h is not None:
            self.q_h.load({k[3:]: v for k, v in params.items() if k.startswith("qh.")})
        if self.q_o is not None:
            self.q_o.load({k[3:]: v for k, v in params.items() if k.startswith("qo.")})

    # -- codes --------------------------------------------------------------

    def observation_code(self, obs) -> tuple[int, ...]:
        """The discrete observation for a raw observation (features then encoder)."""
        return self.q_o.code(self.rpn.featurize(obs))

    def hidden_code(self, h) -> tuple[int, ...]:
        return self.q_h.code(h)

    def _wire_obs(self, f):
        if self.q_o is None:
            return f, None
        code, _ = self.q_o.encode(f)
        return self.q_o.decode(code), code

    def _wire_hidden(self, h):
        if self.q_h is None:
            return h, None
        code, _ = self.q_h.encode(h)
        return self.q_h.decode(code), code

    def initial_state(self):
        """Continuous memory fed to the first step, and its code."""
        return self._wire_hidden(self.rpn.initial_state())

    def step(self, obs, h):
        """Return ``(logits, h', obs_code, hidden_code')``."""
        f, fcode = self._wire_obs(self.rpn.featurize(obs))
        h_new, hcode = self._wire_hidden(self.rpn.gru.forward(f, h)[0])
        return self.rpn.policy.forward(h_new)[0], h_new, fcode, hcode


def insert_qbns(rpn: RPN, q_h: QBN, q_o: QBN) -> DiscretizedRPN:
    if q_h.input_dim != rpn.hidden:
        raise ShapeMismatch(f"hidden QBN expects {q_h.input_dim} inputs, memory has {rpn.hidden}")
    if q_o.input_dim != rpn.feature_dim:
        raise ShapeMismatch(
            f"observation QBN expects {q_o.input_dim} inputs, features have {rpn.feature_dim}"
        )
    if q_h.kind is not QbnKind.HIDDEN or q_o.kind is not QbnKind.OBSERVATION:
        raise ValueError("QBN kinds do not match their wires")
    return DiscretizedRPN(rpn, q_h, q_o)


# ---------------------------------------------------------------------------
# Acting


class RpnPolicy:
    def __init__(self, rpn: RPN):
        self.rpn = rpn

    def reset(self) -> None:
        self.h = self.rpn.initial_state()

    def act(self, obs) -> int:
        logits, self.h = self.rpn.step(obs, self.h)
        return int(np.argmax(logits))


class DiscretizedPolicy:
    def __init__(self, drpn: DiscretizedRPN):
        self.drpn = drpn

    def reset(self) -> None:
        self.h, self.code = self.drpn.initial_state()

    def act(self, obs) -> int:
        logits, self.h, _, self.code = self.drpn.step(obs, self.h)
        return int(np.argmax(logits))


def as_policy(net) -> RpnPolicy | DiscretizedPolicy:
    return DiscretizedPolicy(net) if isinstance(net, DiscretizedRPN) else RpnPolicy(net)


# ---------------------------------------------------------------------------
# Sequence training


def _unroll(net: DiscretizedRPN, obs):
    """Forward a padded batch ``obs`` of shape (B, T, d); returns logits and caches."""
    rpn = net.rpn
    B, T, _ = obs.shape
    f, feat_cache = rpn.features.forward(obs)
    if net.q_o is not None:
        fq, qo_cache = net.q_o.forward(f)
    else:
        fq, qo_cache = f, None
    h, _ = net.initial_state()
    h = np.broadcast_to(h, (B, rpn.hidden)).copy()
    H = np.empty((B, T, rpn.hidden))
    steps = []
    for t in range(T):
        hp, gcache = rpn.gru.forward(fq[:, t], h)
        if net.q_h is not None:
            h, qcache = net.q_h.forward(hp)
        else:
            h, qcache = hp, None
        H[:, t] = h
        steps.append((gcache, qcache))
    logits, pi_cache = rpn.policy.forward(H)
    return logits, (feat_cache, qo_cache, steps, pi_cache)


def _backward(net: DiscretizedRPN, caches, grad_logits):
    feat_cache, qo_cache, steps, pi_cache = caches
    rpn = net.rpn
    dH, pi_grads = rpn.policy.backward(pi_cache, grad_logits)
    B, T, _ = dH.shape
    grads = {f"rpn.pi.{k}": v for k, v in pi_grads.items()}
    gru_acc: dict[str, np.ndarray] = {}
    qh_acc: dict[str, np.ndarray] = {}
    dfq = np.empty((B, T, rpn.feature_dim))
    g_next = np.zeros((B, rpn.hidden))
    for t in range(T - 1, -1, -1):
        gcache, qcache = steps[t]
        g = dH[:, t] + g_next
        if qcache is not None:
            g, qg = net.q_h.backward(qcache, g)
            for k, v in qg.items():
                qh_acc[k] = qh_acc.get(k, 0.0) + v
        gx, g_next, gg = rpn.gru.backward(gcache, g)
        for k, v in gg.items():
            gru_acc[k] = gru_acc.get(k, 0.0) + v
        dfq[:, t] = gx
    grads.update({f"rpn.gru.{k}": v for k, v in gru_acc.items()})
    grads.update({f"qh.{k}": v for k, v in qh_acc.items()})
    if qo_cache is not None:
        df, qo_grads = net.q_o.backward(qo_cache, dfq)
        grads.update({f"qo.{k}": v for k, v in qo_grads.items()})
    else:
        df = dfq
    _, feat_grads = rpn.features.backward(feat_cache, df)
    grads.update({f"rpn.feat.{k}": v for k, v in feat_grads.items()})
    grads.update({f"rpn.v.{k}": np.zeros_like(v) for k, v in rpn.value.params.items()})
    return grads


def cross_entropy(logits, labels, mask):
    """Mean masked cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = max(float(mask.sum()), 1.0)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = float(-(picked * mask).sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
    return loss, grad * (mask / n)[..., None]


def sequence_loss(net, obs, labels, mask):
    if isinstance(net, RPN):
        net = DiscretizedRPN(net, None, None)
    logits, _ = _unroll(net, obs)
    return cross_entropy(logits, labels, mask)[0]


def sequence_grads(net, obs, labels, mask):
    """Loss and parameter gradients of the masked cross-entropy over sequences."""
    wrapped = DiscretizedRPN(net, None, None) if isinstance(net, RPN) else net
    logits, caches = _unroll(wrapped, obs)
    loss, g = cross_entropy(logits, labels, mask)
    grads = _backward(wrapped, caches, g)
    if isinstance(net, RPN):
        grads = {k[4:]: v for k, v in grads.items()}
    return loss, grads


@dataclass
class Episode:
    obs: np.ndarray
    labels: np.ndarray
    ret: float


def _pad(episodes: list[Episode]):
    T = max(len(e.labels) for e in episodes)
    d = episodes[0].obs.shape[1]
    obs = np.zeros((len(episodes), T, d))
    labels = np.zeros((len(episodes), T), dtype=int)
    mask = np.zeros((len(episodes), T))
    for i, e in enumerate(episodes):
        n = len(e.labels)
        obs[i, :n] = e.obs
        labels[i, :n] = e.labels
        mask[i, :n] = 1.0
    return obs, labels, mask


def labeled_rollout(actor, labeler, env, seed: int) -> Episode:
    """Run ``actor`` in ``env`` while ``labeler`` names the action it would take."""
    obs = env.reset(seed)
    actor.reset()
    labeler.reset()
    xs, ys, total = [], [], 0.0
    while True:
        try:
            label = int(labeler.act(obs))
        except Exception as exc:  # noqa: BLE001 - surfaced as ExpertFailure
            raise ExpertFailure(f"expert failed on seed {seed}: {exc}") from exc
        if not 0 <= label < env.action_count:
            raise ExpertFailure(f"expert produced invalid action {label}")
        action = label if actor is labeler else int(actor.act(obs))
        xs.append(np.asarray(obs, dtype=float))
        ys.append(label)
        obs, reward, done = env.step(action)
        total += reward
        if done:
            break
    return Episode(np.array(xs), np.array(ys, dtype=int), total)


def _fit(net, params_of, episodes, epochs, batch, lr, max_norm, rng, opt=None):
    opt = opt or Adam(lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(episodes))
        losses = []
        for i in range(0, len(order), batch):
            obs, labels, mask = _pad([episodes[j] for j in order[i:i + batch]])
            loss, grads = sequence_grads(net, obs, labels, mask)
            grads = clip_grad_norm(grads, max_norm)
            net.load(opt.step(params_of(net), grads))
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history, opt


@dataclass
class CloneConfig:
    episodes: int = 16
    seed_base: int = 10_000
    hidden: int = 8
    epochs: int = 60
    dagger_rounds: int = 2
    dagger_epochs: int = 30
    batch: int = 8
    lr: float = 3e-3
    max_norm: float = 5.0
    seed: int = 0


def clone_train(env, expert, config: CloneConfig | None = None, rpn: RPN | None = None):
    """Behavior cloning with DAgger-style relabeling of the learner's own rollouts.

    Returns ``(rpn, loss_history)``.
    """
    config = config or CloneConfig()
    rng = np.random.default_rng(config.seed)
    if rpn is None:
        rpn = RPN(env.obs_dim, env.action_count, config.hidden, seed=config.seed)
    else:
        rpn = rpn.copy()
    seeds = iter(range(config.seed_base, config.seed_base + 10**6))
    data = [labeled_rollout(expert, expert, env, next(seeds)) for _ in range(config.episodes)]
    history, opt = _fit(rpn, lambda n: n.params, data, config.epochs, config.batch, config.lr,
                        config.max_norm, rng)
    if config.epochs == 0:
        return rpn, history
    for _ in range(config.dagger_rounds):
        learner = RpnPolicy(rpn)
        data += [labeled_rollout(learner, expert, env, next(seeds)) for _ in range(config.episodes)]
        h, opt = _fit(rpn, lambda n: n.params, data, config.dagger_epochs, config.batch,
                      config.lr, config.max_norm, rng, opt)
        history += h
    return rpn, history


def collect_activations(net: RPN, env, episodes: int, seed_base: int):
    """Memory vectors and observation features visited by the continuous policy."""
    hs, fs = [], []
    for seed in range(seed_base, seed_base + episodes):
        obs = env.reset(seed)
        h = net.initial_state()
        while True:
            f = net.featurize(obs)
            h = net.gru.forward(f, h)[0]
            fs.append(f)
            hs.append(h)
            obs, _, done = env.step(int(np.argmax(net.policy.forward(h)[0])))
            if done:
                break
    return np.array(hs), np.array(fs)


@dataclass
class FineTuneConfig:
    rounds: int = 3
    episodes: int = 8
    epochs: int = 10
    batch: int = 8
    lr: float = 1e-3
    max_norm: float = 5.0
    seed_base: int = 20_000
    eval_seeds: tuple[int, ...] = ()
    seed: int = 0


def fine_tune(drpn: DiscretizedRPN, teacher: RPN, env, config: FineTuneConfig | None = None):
    """Imitate ``teacher`` with the discretized network on its own rollouts.

    All weights (policy and both autoencoders) are trained jointly through
    straight-through gradients. The returned network is the best checkpoint
    by mean return on ``eval_seeds`` (ties keep the earlier one), or by
    imitation loss when no evaluation seeds are given. Returns
    ``(drpn, loss_history)``.
    """
    from .envs import evaluate_seeds

    config = config or FineTuneConfig()
    rng = np.random.default_rng(config.seed)
    net = drpn.copy()
    teacher_policy = RpnPolicy(teacher)

    def score(n, eps):
        if config.eval_seeds:
            return evaluate_seeds(DiscretizedPolicy(n), env, config.eval_seeds).mean
        obs, labels, mask = _pad(eps)
        return -sequence_loss(n, obs, labels, mask)

    seeds = iter(range(config.seed_base, config.seed_base + 10**6))
    data = [labeled_rollout(DiscretizedPolicy(net), teacher_policy, env, next(seeds))
            for _ in range(config.episodes)]
    obs, labels, mask = _pad(data)
    history = [sequence_loss(net, obs, labels, mask)]
    best, best_score = net.copy(), score(net, data)
    opt = None
    for _ in range(config.rounds):
        h, opt = _fit(net, lambda n: n.params, data, config.epochs, config.batch, config.lr,
                      config.max_norm, rng, opt)
        history += h
        s = score(net, data)
        if s > best_score:
            best, best_score = net.copy(), s
        data += [labeled_rollout(DiscretizedPolicy(net), teacher_policy, env, next(seeds))
                 for _ in range(config.episodes)]
    return best, history


# ---------------------------------------------------------------------------
# Trace collection


def collect_transitions(drpn: DiscretizedRPN, env, episodes: int, seed_base: int = 0,
                        seeds=None) -> list[Trace]:
    """One trace per episode of ``(h, a, f, h')`` code tuples.

    ``a`` is the action emitted after the transition, i.e. the label of
    ``h'``; each trace also records the label of its first state.
    """
    if seeds is None:
        if episodes < 1:
            raise ValueError("episodes must be >= 1")
        seeds = range(seed_base, seed_base + episodes)
    traces = []
    for seed in seeds:
        obs = env.reset(seed)
        h, code = drpn.initial_state()
        start_action = int(np.argmax(drpn.rpn.policy.forward(h)[0]))
        steps, total = [], 0.0
        while True:
            logits, h, fcode, hcode = drpn.step(obs, h)
            a = int(np.argmax(logits))
            steps.append(TransitionTuple(
                tuple(int(v) for v in code), a, tuple(int(v) for v in fcode),
                tuple(int(v) for v in hcode)))
            code = hcode
            obs, reward, done = env.step(a)
            total += reward
            if done:
                break
        traces.append(Trace(tuple(steps), total, start_action))
    return traces
