"""Desk-scale environments, scripted experts and a seeded evaluation harness.

Every environment follows the same small protocol::

    obs = env.reset(seed)
    obs, reward, done = env.step(action)

Policies evaluated by :func:`evaluate` expose ``reset()`` and ``act(obs)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import InvalidSpec, StepAfterDone


class Environment(Protocol):
    action_count: int
    obs_dim: int

    def reset(self, seed: int) -> np.ndarray: ...

    def step(self, action: int) -> tuple[np.ndarray, float, bool]: ...


class PolicyLike(Protocol):
    def reset(self) -> None: ...

    def act(self, obs: np.ndarray) -> int: ...


# ---------------------------------------------------------------------------
# CartPole


@dataclass(frozen=True)
class CartPoleConfig:
    gravity: float = 9.8
    mass_cart: float = 1.0
    mass_pole: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    tau: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12 * 2 * math.pi / 360
    max_steps: int = 500
    init_range: float = 0.05


def cartpole_derivatives(state, force, cfg: CartPoleConfig = CartPoleConfig()):
    """Return (x_acc, theta_acc) for the standard frictionless cart-pole."""
    _, _, theta, theta_dot = state
    total_mass = cfg.mass_cart + cfg.mass_pole
    polemass_length = cfg.mass_pole * cfg.half_length
    cos, sin = math.cos(theta), math.sin(theta)
    temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
    theta_acc = (cfg.gravity * sin - cos * temp) / (
        cfg.half_length * (4.0 / 3.0 - cfg.mass_pole * cos**2 / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos / total_mass
    return x_acc, theta_acc


class CartPole:
    """Cart-pole balancing with explicit Euler integration.

    Actions: 0 pushes left, 1 pushes right. Observation is
    ``(x, x_dot, theta, theta_dot)``; reward is 1 for every step taken.
    """

    action_count = 2
    obs_dim = 4
    feature_names = ("cart-position", "cart-velocity", "pole-angle", "pole-velocity")

    def __init__(self, config: CartPoleConfig | None = None):
        self.config = config or CartPoleConfig()
        self.state = np.zeros(4)
        self.steps = 0
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        r = self.config.init_range
        self.state = rng.uniform(-r, r, size=4)
        self.steps = 0
        self.done = False
        return self.state.copy()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise StepAfterDone("episode finished; call reset()")
        cfg = self.config
        force = cfg.force_mag if action == 1 else -cfg.force_mag
        x, x_dot, theta, theta_dot = self.state
        x_acc, theta_acc = cartpole_derivatives(self.state, force, cfg)
        x = x + cfg.tau * x_dot
        x_dot = x_dot + cfg.tau * x_acc
        theta = theta + cfg.tau * theta_dot
        theta_dot = theta_dot + cfg.tau * theta_acc
        self.state = np.array([x, x_dot, theta, theta_dot])
        self.steps += 1
        self.done = bool(
            abs(x) > cfg.x_threshold
            or abs(theta) > cfg.theta_threshold
            or self.steps >= cfg.max_steps
        )
        return self.state.copy(), 1.0, self.done


def cartpole(config: CartPoleConfig | None = None) -> CartPole:
    return CartPole(config)


class CartPoleExpert:
    """Push right iff ``3*theta + theta_dot > 0``."""

    def reset(self) -> None:
        pass

    def act(self, obs) -> int:
        return int(3.0 * obs[2] + obs[3] > 0.0)


def scripted_expert(env) -> PolicyLike:
    if isinstance(env, CartPole):
        return CartPoleExpert()
    if isinstance(env, ParityMemoryEnv):
        return ParityOracle()
    if isinstance(env, SyntheticMMEnv):
        from .automaton import MachinePolicy

        return MachinePolicy(env.spec.machine)
    raise ValueError(f"no scripted expert for {type(env).__name__}")


# ---------------------------------------------------------------------------
# Parity memory task


class ParityMemoryEnv:
    """Remember a cue bit shown on the first step and report it at the end.

    The first observation is ``[+1]`` or ``[-1]`` (bit 1 or 0); later
    observations are ``[0]``. Reward 1 is paid on the last step iff the action
    equals the bit. Every other step pays nothing.
    """

    action_count = 2
    obs_dim = 1

    def __init__(self, horizon: int = 3):
        if horizon < 2:
            raise ValueError("horizon must be at least 2")
        self.horizon = horizon
        self.bit = 0
        self.t = 0
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        self.bit = int(np.random.default_rng(seed).integers(2))
        self.t = 0
        self.done = False
        return np.array([1.0 if self.bit else -1.0])

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise StepAfterDone("episode finished; call reset()")
        self.t += 1
        self.done = self.t >= self.horizon
        reward = float(action == self.bit) if self.done else 0.0
        return np.array([0.0]), reward, self.done


def parity_memory_env(horizon: int = 3) -> ParityMemoryEnv:
    return ParityMemoryEnv(horizon)


class ParityOracle:
    def reset(self) -> None:
        self.bit = None

    def act(self, obs) -> int:
        if self.bit is None:
            self.bit = int(obs[0] > 0)
        return self.bit


# ---------------------------------------------------------------------------
# Synthetic Moore-machine environments


@dataclass
class SyntheticSpec:
    """Ground-truth machine plus a time-indexed reward schedule.

    The environment walks ``machine`` itself: at every step it picks one of
    the outgoing observations of its tracked state (seeded choice at decision
    points, lowest obs id elsewhere), emits that observation and moves on.
    The emitted vector is ``emission[o]`` when given, else the obs code. The
    agent's reward at step ``t`` is ``rewards[t].get(a, default_reward)`` so
    returns depend only on the emitted action sequence. ``redundant`` lists
    decision points whose branches must all earn the same return.
    """

    machine: object
    horizon: int
    rewards: list[dict[int, float]] = field(default_factory=list)
    default_reward: float = 0.0
    redundant: tuple[int, ...] = ()
    action_count: int = 2
    emission: dict[int, tuple[float, ...]] = field(default_factory=dict)

    def reward(self, t: int, action: int) -> float:
        if t < len(self.rewards):
            return self.rewards[t].get(action, self.default_reward)
        return self.default_reward

    def emit(self, o: int) -> np.ndarray:
        return np.asarray(self.emission.get(o, self.machine.obs_alphabet[o]), dtype=float)


def _world_choices(mm) -> dict[int, list[int]]:
    """Obs ids the world may emit from each state: one per distinct successor."""
    choices = {}
    for s in mm.state_ids:
        reps: dict[int, int] = {}
        for o, t, _ in mm.outgoing(s):
            reps.setdefault(t, o)
        if reps:
            choices[s] = sorted(reps.values())
    return choices


class SyntheticMMEnv:
    def __init__(self, spec: SyntheticSpec):
        validate_synthetic(spec)
        self.spec = spec
        self.action_count = spec.action_count
        self.obs_dim = len(spec.emit(min(spec.machine.obs_alphabet)))
        self._choices = _world_choices(spec.machine)
        self.done = True

    def _emit(self):
        mm = self.spec.machine
        choices = self._choices.get(self.world)
        if choices is None:
            # the world has nowhere to go; stay put with the first obs id
            self._next_obs = min(mm.obs_alphabet)
            self._next_world = self.world
        else:
            o = choices[0] if len(choices) == 1 else choices[int(self.rng.integers(len(choices)))]
            self._next_obs = o
            self._next_world = mm.transitions[(self.world, o)].target
        return self.spec.emit(self._next_obs)

    def reset(self, seed: int) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        self.world = self.spec.machine.start
        self.t = 0
        self.done = False
        return self._emit()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise StepAfterDone("episode finished; call reset()")
        reward = self.spec.reward(self.t, int(action))
        self.world = self._next_world
        self.t += 1
        self.done = self.t >= self.spec.horizon
        return self._emit(), reward, self.done


def _forced_return(spec: SyntheticSpec, world_path, force) -> float:
    """Return of ``spec.machine`` run on ``world_path``, with overrides.

    ``force`` maps a decision point to the obs id the agent is made to
    follow there regardless of what the world emitted.
    """
    from .automaton import step
    from .errors import DeadEnd

    mm = spec.machine
    state = mm.start
    total = 0.0
    for t, o in enumerate(world_path):
        try:
            state, action = step(mm, state, force.get(state, o))
        except DeadEnd:
            break
        total += spec.reward(t, action)
    return total


def _world_paths(spec: SyntheticSpec, choices, limit: int):
    """Enumerate every observation sequence the world can emit."""
    mm = spec.machine
    paths = [((), mm.start)]
    for _ in range(spec.horizon):
        nxt = []
        for path, s in paths:
            for o in choices.get(s, [min(mm.obs_alphabet)]):
                target = mm.transitions[(s, o)].target if s in choices else s
                nxt.append((path + (o,), target))
        if len(nxt) > limit:
            raise InvalidSpec(f"more than {limit} world paths; too many to certify")
        paths = nxt
    return [p for p, _ in paths]


def validate_synthetic(spec: SyntheticSpec, max_paths: int = 1 << 16) -> None:
    """Certify by exhaustive rollout that redundant branches earn equal returns."""
    mm = spec.machine
    if spec.horizon < 1:
        raise InvalidSpec("horizon must be positive")
    if not mm.obs_alphabet:
        raise InvalidSpec("the machine has no observations to emit")
    if any(not 0 <= r.action < spec.action_count for r in mm.states):
        raise InvalidSpec("a state action lies outside the action range")
    widths = {len(spec.emit(o)) for o in mm.obs_alphabet}
    if len(widths) != 1:
        raise InvalidSpec("emission vectors differ in length")
    dps = set(mm.decision_points())
    for d in spec.redundant:
        if d not in dps:
            raise InvalidSpec(f"state {d} is marked redundant but is not a decision point")
    choices = _world_choices(mm)
    paths = _world_paths(spec, choices, max_paths)
    for d in spec.redundant:
        for path in paths:
            returns = [_forced_return(spec, path, {d: o}) for o in choices[d]]
            if max(returns) - min(returns) > 1e-9:
                raise InvalidSpec(
                    f"branches of redundant decision point {d} earn different returns {returns}"
                )


def synthetic_mm_env(spec: SyntheticSpec) -> SyntheticMMEnv:
    return SyntheticMMEnv(spec)


_SPEC_KEYS = ("horizon", "actions", "default_reward", "reward", "redundant", "emission")


def load_synthetic_spec(text: str) -> SyntheticSpec:
    """Parse a machine file extended with environment lines.

    Extra line kinds: ``horizon <n>``, ``actions <n>``, ``default_reward <r>``,
    ``reward <t> <action> <r>``, ``redundant <state> ...`` and
    ``emission <obs> <x1> <x2> ...``. Everything else is machine syntax.
    """
    from .automaton import deserialize
    from .errors import ParseError

    machine_lines, extra = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tok = raw.split()
        if tok and tok[0] in _SPEC_KEYS:
            extra.append((lineno, tok))
            machine_lines.append("")
        else:
            machine_lines.append(raw)
    mm = deserialize("\n".join(machine_lines))
    horizon, actions, default = None, 1 + max(r.action for r in mm.states), 0.0
    rewards: dict[int, dict[int, float]] = {}
    redundant: list[int] = []
    emission: dict[int, tuple[float, ...]] = {}
    for lineno, tok in extra:
        try:
            key, args = tok[0], tok[1:]
            if key == "horizon" and len(args) == 1:
                horizon = int(args[0])
            elif key == "actions" and len(args) == 1:
                actions = int(args[0])
            elif key == "default_reward" and len(args) == 1:
                default = float(args[0])
            elif key == "reward" and len(args) == 3:
                rewards.setdefault(int(args[0]), {})[int(args[1])] = float(args[2])
            elif key == "redundant" and args:
                redundant += [int(a) for a in args]
            elif key == "emission" and len(args) >= 2:
                emission[int(args[0])] = tuple(float(a) for a in args[1:])
            else:
                raise ParseError(f"malformed {key!r} line", lineno)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if horizon is None:
        raise ParseError("missing horizon line", None)
    schedule = [dict(rewards.get(t, {})) for t in range(horizon)]
    return SyntheticSpec(mm, horizon, schedule, default, tuple(redundant), actions, emission)


def dump_synthetic_spec(spec: SyntheticSpec) -> str:
    from .automaton import serialize

    lines = [serialize(spec.machine).rstrip("\n"), f"horizon {spec.horizon}",
             f"actions {spec.action_count}", f"default_reward {spec.default_reward!r}"]
    for t, row in enumerate(spec.rewards):
        lines += [f"reward {t} {a} {r!r}" for a, r in sorted(row.items())]
    if spec.redundant:
        lines.append("redundant " + " ".join(str(d) for d in spec.redundant))
    for o, vec in sorted(spec.emission.items()):
        lines.append(f"emission {o} " + " ".join(repr(float(v)) for v in vec))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalReport:
    returns: tuple[float, ...]
    seeds: tuple[int, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))

    def to_dict(self) -> dict:
        return {"returns": list(self.returns), "seeds": list(self.seeds),
                "mean": self.mean, "std": self.std}


def rollout(policy: PolicyLike, env: Environment, seed: int, max_steps: int | None = None) -> float:
    obs = env.reset(seed)
    policy.reset()
    total = 0.0
    for _ in itertools.count() if max_steps is None else range(max_steps):
        obs, reward, done = env.step(policy.act(obs))
        total += reward
        if done:
            break
    return total


def evaluate_seeds(policy: PolicyLike, env: Environment, seeds: Sequence[int]) -> EvalReport:
    seeds = tuple(int(s) for s in seeds)
    return EvalReport(tuple(rollout(policy, env, s) for s in seeds), seeds)


def evaluate(policy: PolicyLike, env: Environment, episodes: int, seed_base: int = 0) -> EvalReport:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    return evaluate_seeds(policy, env, range(seed_base, seed_base + episodes))


def make_env(name: str):
    """Construct an environment from its CLI name."""
    if name == "cartpole":
        return cartpole()
    if name == "parity":
        return parity_memory_env()
    if name.startswith("parity:"):
        return parity_memory_env(int(name.split(":", 1)[1]))
    if name == "synthetic-redundant":
        from .fixtures import redundant_branch_spec

        return synthetic_mm_env(redundant_branch_spec())
    if name.startswith("synthetic:"):
        with open(name.split(":", 1)[1], encoding="utf-8") as fh:
            return synthetic_mm_env(load_synthetic_spec(fh.read()))
    raise ValueError(f"unknown environment {name!r}")
