"""Small hand-built machines and synthetic environment specs.

These back the test-suite, the acceptance checks and the built-in
``synthetic-redundant`` CLI environment.
"""

from __future__ import annotations

import numpy as np

from .automaton import MooreMachine, StateRecord, Trace, Transition, TransitionTuple
from .envs import SyntheticSpec


def ternary_digits(n: int, width: int) -> tuple[int, ...]:
    """Balanced-ish ternary encoding of ``n`` (digits mapped 0,1,2 -> 0,1,-1)."""
    digits = []
    for _ in range(width):
        n, r = divmod(n, 3)
        digits.append((0, 1, -1)[r])
    if n:
        raise ValueError("width too small")
    return tuple(digits)


def make_machine(actions, arcs, start=0, n_obs=None, nh=4, no=4) -> MooreMachine:
    """Machine from ``actions[i]`` labels and ``(src, obs, dst, count)`` arcs."""
    if n_obs is None:
        n_obs = 1 + max((o for _, o, _, _ in arcs), default=-1)
    return MooreMachine(
        states=tuple(StateRecord(i, a, ternary_digits(i, nh)) for i, a in enumerate(actions)),
        start=start,
        obs_alphabet={o: ternary_digits(o, no) for o in range(n_obs)},
        transitions={(s, o): Transition(t, c) for s, o, t, c in arcs},
        nh=nh,
        no=no,
    )


def random_machine(rng: np.random.Generator, max_states: int = 12, max_obs: int = 4,
                   n_actions: int = 3, density: float = 0.7) -> MooreMachine:
    n = int(rng.integers(1, max_states + 1))
    k = int(rng.integers(1, max_obs + 1))
    actions = [int(rng.integers(n_actions)) for _ in range(n)]
    arcs = []
    for s in range(n):
        for o in range(k):
            if rng.random() < density:
                arcs.append((s, o, int(rng.integers(n)), int(rng.integers(1, 6))))
    return make_machine(actions, arcs, n_obs=k)


def figure_machine() -> MooreMachine:
    """Seven states, nine observations, a single decision point at state 2.

    0 -> 1 -> 2 is a plain sequence; 2 branches to 3 or 4, both rejoin at 5;
    5 reaches 6 under three parallel observations and 6 loops back to 2.
    """
    arcs = [
        (0, 0, 1, 4),
        (1, 1, 2, 4),
        (2, 2, 3, 6),
        (2, 3, 4, 2),
        (3, 4, 5, 6),
        (4, 4, 5, 2),
        (5, 5, 6, 3),
        (5, 6, 6, 3),
        (5, 7, 6, 2),
        (6, 8, 2, 8),
    ]
    return make_machine([0, 1, 1, 0, 1, 0, 1], arcs, n_obs=9)


def walk(mm: MooreMachine, obs_ids, start_action=True) -> Trace:
    """Trace produced by feeding ``obs_ids`` to ``mm`` (every arc must exist)."""
    s = mm.start
    steps = []
    for o in obs_ids:
        t = mm.transitions[(s, o)].target
        steps.append(
            TransitionTuple(mm.code_of(s), mm.action_of(t), mm.obs_alphabet[o], mm.code_of(t))
        )
        s = t
    return Trace(tuple(steps), 0.0, mm.action_of(mm.start) if start_action else None)


def random_walk_traces(mm: MooreMachine, rng: np.random.Generator, episodes: int,
                       length: int) -> list[Trace]:
    traces = []
    for _ in range(episodes):
        s, obs = mm.start, []
        for _ in range(length):
            arcs = mm.outgoing(s)
            if not arcs:
                break
            o, s, _ = arcs[int(rng.integers(len(arcs)))]
            obs.append(o)
        traces.append(walk(mm, obs))
    return traces


def redundant_branch_spec(prefix: int = 3, branch_len: int = 4, tail: int = 3) -> SyntheticSpec:
    """One decision point whose two branches earn identical returns.

    Rewards pay 1 for action 1 on prefix and tail steps. Inside the branch
    every action pays 1, so the two branches (which act differently) tie.
    """
    actions, arcs = [], []
    # state 0 is the start; states 1..prefix form the approach, the last is the DP
    actions.append(1)
    for i in range(1, prefix + 1):
        actions.append(1)
        arcs.append((i - 1, 0, i, 1))
    dp = prefix
    branch_ends = []
    for b, act in enumerate((0, 1)):
        first = len(actions)
        for j in range(branch_len):
            actions.append(act if j % 2 == 0 else 1 - act)
            if j == 0:
                arcs.append((dp, 1 + b, first, 1))
            else:
                arcs.append((first + j - 1, 0, first + j, 1))
        branch_ends.append(first + branch_len - 1)
    join = len(actions)
    for end in branch_ends:
        arcs.append((end, 0, join, 1))
    actions.append(1)
    prev = join
    for _ in range(tail - 1):
        actions.append(1)
        arcs.append((prev, 0, len(actions) - 1, 1))
        prev = len(actions) - 1
    mm = make_machine(actions, arcs, n_obs=3, nh=4, no=2)
    horizon = prefix + branch_len + tail
    rewards = []
    for t in range(horizon):
        if prefix <= t < prefix + branch_len:
            rewards.append({0: 1.0, 1: 1.0})
        else:
            rewards.append({1: 1.0})
    return SyntheticSpec(mm, horizon, rewards, 0.0, (dp,))


def multi_redundant_spec(n_points: int = 2, total: float = 21.0) -> SyntheticSpec:
    """A chain with ``n_points`` redundant two-way branches and return ``total``."""
    actions, arcs = [1], []
    cur = 0
    dps = []
    for _ in range(n_points):
        dps.append(cur)
        ends = []
        for b in range(2):
            actions.append(b)
            arcs.append((cur, 1 + b, len(actions) - 1, 1))
            ends.append(len(actions) - 1)
        actions.append(1)
        join = len(actions) - 1
        for e in ends:
            arcs.append((e, 0, join, 1))
        cur = join
    horizon = int(total)
    # pad with a plain chain until the horizon is reached
    steps_used = 2 * n_points
    while steps_used < horizon:
        actions.append(1)
        arcs.append((cur, 0, len(actions) - 1, 1))
        cur = len(actions) - 1
        steps_used += 1
    mm = make_machine(actions, arcs, n_obs=3, nh=6, no=2)
    rewards = []
    branch_steps = {2 * i for i in range(n_points)}
    for t in range(horizon):
        rewards.append({0: 1.0, 1: 1.0} if t in branch_steps else {1: 1.0})
    return SyntheticSpec(mm, horizon, rewards, 0.0, tuple(dps))


def parity_machine(horizon: int = 3) -> MooreMachine:
    """Optimal machine for the parity task: remember the cue, report it last."""
    # obs ids: 0 -> [-1], 1 -> [0], 2 -> [+1]
    actions = [0]
    arcs = []
    for bit, cue in ((1, 2), (0, 0)):
        prev = 0
        for t in range(horizon):
            actions.append(bit)
            sid = len(actions) - 1
            arcs.append((prev, cue if t == 0 else 1, sid, 1))
            prev = sid
    mm = MooreMachine(
        states=tuple(StateRecord(i, a, ternary_digits(i, 3)) for i, a in enumerate(actions)),
        start=0,
        obs_alphabet={0: (-1,), 1: (0,), 2: (1,)},
        transitions={(s, o): Transition(t, c) for s, o, t, c in arcs},
        nh=3,
        no=1,
    )
    return mm
