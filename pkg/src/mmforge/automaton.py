"""Moore machines extracted from quantized recurrent policies.

A machine has ternary-coded states, each labeled with an action, a ternary
observation alphabet, and a partial transition map whose entries remember
how often they were observed. Running a machine follows the usual Moore
convention: start in ``start``, and for every incoming observation move to
the next state and emit that state's action.
"""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AlphabetMismatch,
    ConflictingTransition,
    DeadEnd,
    EmptyInput,
    ParseError,
    UnknownObservation,
)

Code = tuple[int, ...]


class FallbackRule(enum.Enum):
    MOST_FREQUENT = "most-frequent"
    FAIL = "fail"


@dataclass(frozen=True)
class StateRecord:
    id: int
    action: int
    code: Code


@dataclass(frozen=True)
class Transition:
    target: int
    count: int


@dataclass(frozen=True)
class TransitionTuple:
    """One discretized step: state code, emitted action, obs code, next code."""

    h: Code
    a: int
    f: Code
    h_next: Code


@dataclass(frozen=True)
class Trace:
    steps: tuple[TransitionTuple, ...]
    ret: float = 0.0
    # action label of the first state; the steps only label entered states
    start_action: int | None = None

    def states(self) -> list[Code]:
        if not self.steps:
            return []
        return [self.steps[0].h] + [s.h_next for s in self.steps]


@dataclass(frozen=True)
class MachineStats:
    decision_points: int
    states: int
    observations: int
    transitions: int
    mean_return: float | None = None
    episodes_evaluated: int = 0
    returns: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "decision_points": self.decision_points,
            "states": self.states,
            "observations": self.observations,
            "transitions": self.transitions,
            "mean_return": self.mean_return,
            "episodes_evaluated": self.episodes_evaluated,
            "returns": list(self.returns),
        }


@dataclass(frozen=True, eq=False)
class MooreMachine:
    states: tuple[StateRecord, ...]
    start: int
    obs_alphabet: Mapping[int, Code]
    transitions: Mapping[tuple[int, int], Transition]
    nh: int
    no: int

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(sorted(self.states, key=lambda r: r.id)))
        object.__setattr__(self, "obs_alphabet", dict(sorted(self.obs_alphabet.items())))
        object.__setattr__(self, "transitions", dict(sorted(self.transitions.items())))
        self.validate()

    def validate(self) -> None:
        ids = self.state_ids
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate state id")
        if self.start not in self._records:
            raise ValueError(f"start state {self.start} is not a state")
        for rec in self.states:
            _check_code(rec.code, self.nh, f"state {rec.id}")
        for o, code in self.obs_alphabet.items():
            _check_code(code, self.no, f"obs {o}")
        for (s, o), tr in self.transitions.items():
            if s not in self._records or tr.target not in self._records:
                raise ValueError(f"transition ({s}, {o}) references an unknown state")
            if o not in self.obs_alphabet:
                raise ValueError(f"transition ({s}, {o}) uses an unknown observation")
            if tr.count < 1:
                raise ValueError(f"transition ({s}, {o}) has count {tr.count}")

    def __eq__(self, other):
        if not isinstance(other, MooreMachine):
            return NotImplemented
        return (
            self.states == other.states
            and self.start == other.start
            and self.obs_alphabet == other.obs_alphabet
            and self.transitions == other.transitions
            and (self.nh, self.no) == (other.nh, other.no)
        )

    __hash__ = None

    # -- lookups ------------------------------------------------------------

    @cached_property
    def _records(self) -> dict[int, StateRecord]:
        return {r.id: r for r in self.states}

    @cached_property
    def _outgoing(self) -> dict[int, list[tuple[int, int, int]]]:
        out: dict[int, list[tuple[int, int, int]]] = {r.id: [] for r in self.states}
        for (s, o), tr in self.transitions.items():
            out[s].append((o, tr.target, tr.count))
        return out

    @cached_property
    def _code_index(self) -> dict[Code, int]:
        return {code: o for o, code in self.obs_alphabet.items()}

    @cached_property
    def _alphabet_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(list(self.obs_alphabet), dtype=int)
        codes = np.array(list(self.obs_alphabet.values()), dtype=int).reshape(len(ids), self.no)
        return ids, codes

    @property
    def state_ids(self) -> list[int]:
        return [r.id for r in self.states]

    def action_of(self, state: int) -> int:
        return self._records[state].action

    def code_of(self, state: int) -> Code:
        return self._records[state].code

    def outgoing(self, state: int) -> list[tuple[int, int, int]]:
        """``(obs, target, count)`` arcs leaving ``state`` in obs-id order."""
        return self._outgoing[state]

    def successors(self, state: int) -> set[int]:
        return {t for _, t, _ in self._outgoing[state]}

    def most_frequent_arc(self, state: int) -> tuple[int, int, int] | None:
        arcs = self._outgoing[state]
        if not arcs:
            return None
        return max(arcs, key=lambda a: (a[2], -a[0]))

    def bind(self, code: Sequence[int]) -> int:
        """Map an observation code to an obs id, nearest by Hamming distance."""
        code = tuple(int(v) for v in code)
        o = self._code_index.get(code)
        if o is not None:
            return o
        ids, codes = self._alphabet_matrix
        if len(ids) == 0:
            raise UnknownObservation("machine has an empty observation alphabet")
        dist = (codes != np.asarray(code, dtype=int)).sum(axis=1)
        # ids are sorted, so argmin breaks ties by lowest obs id
        return int(ids[int(np.argmin(dist))])

    # -- derived machines ---------------------------------------------------

    def with_transitions(self, transitions: Mapping[tuple[int, int], Transition]) -> "MooreMachine":
        return replace(self, transitions=dict(transitions))

    def without(self, keys: Iterable[tuple[int, int]]) -> "MooreMachine":
        drop = set(keys)
        return self.with_transitions({k: v for k, v in self.transitions.items() if k not in drop})

    def reachable(self) -> list[int]:
        seen = {self.start}
        order = [self.start]
        for s in order:
            for _, t, _ in self._outgoing[s]:
                if t not in seen:
                    seen.add(t)
                    order.append(t)
        return order

    def restrict_to_reachable(self) -> "MooreMachine":
        keep = set(self.reachable())
        return replace(
            self,
            states=tuple(r for r in self.states if r.id in keep),
            transitions={k: v for k, v in self.transitions.items() if k[0] in keep},
        )

    def decision_points(self) -> list[int]:
        return decision_points(self)

    def stats(self) -> MachineStats:
        return stats(self)

    def step(self, state: int, obs: int, fallback: FallbackRule = FallbackRule.MOST_FREQUENT):
        return step(self, state, obs, fallback)


def _check_code(code, length, what):
    if len(code) != length:
        raise ValueError(f"{what}: code length {len(code)} != {length}")
    if any(v not in (-1, 0, 1) for v in code):
        raise ValueError(f"{what}: code {code} is not ternary")


# ---------------------------------------------------------------------------
# Construction


def _as_code(vec) -> Code:
    code = tuple(int(v) for v in vec)
    if any(v not in (-1, 0, 1) for v in code):
        raise ValueError(f"non-ternary code {code}")
    return code


def build_from_traces(traces: Sequence[Trace]) -> MooreMachine:
    steps = [s for tr in traces for s in tr.steps]
    if not steps:
        raise EmptyInput("no transition tuples")
    nh, no = len(steps[0].h), len(steps[0].f)
    state_ids: dict[Code, int] = {}
    obs_ids: dict[Code, int] = {}
    labels: dict[int, int] = {}
    weak_labels: dict[int, int] = {}
    trans: dict[tuple[int, int], list] = {}

    def sid(code):
        code = _as_code(code)
        if len(code) != nh:
            raise ValueError("hidden code length changes within the traces")
        return state_ids.setdefault(code, len(state_ids))

    for tr in traces:
        if not tr.steps:
            continue
        first = sid(tr.steps[0].h)
        if tr.start_action is not None:
            weak_labels.setdefault(first, tr.start_action)
        for st in tr.steps:
            s = sid(st.h)
            f = _as_code(st.f)
            if len(f) != no:
                raise ValueError("observation code length changes within the traces")
            o = obs_ids.setdefault(f, len(obs_ids))
            t = sid(st.h_next)
            a = int(st.a)
            entry = trans.get((s, o))
            if entry is None:
                trans[(s, o)] = [t, 1]
            elif entry[0] != t:
                raise ConflictingTransition(
                    f"state {s} under obs {o} leads to both {entry[0]} and {t}"
                )
            else:
                entry[1] += 1
            if labels.setdefault(t, a) != a:
                raise ConflictingTransition(
                    f"state {t} is entered with actions {labels[t]} and {a}"
                )
            weak_labels.setdefault(s, a)
    start = state_ids[_as_code(next(tr for tr in traces if tr.steps).steps[0].h)]
    codes = {i: c for c, i in state_ids.items()}
    records = tuple(
        StateRecord(i, labels.get(i, weak_labels.get(i, 0)), codes[i]) for i in range(len(codes))
    )
    return MooreMachine(
        states=records,
        start=start,
        obs_alphabet={i: c for c, i in obs_ids.items()},
        transitions={k: Transition(t, n) for k, (t, n) in trans.items()},
        nh=nh,
        no=no,
    )


# ---------------------------------------------------------------------------
# Execution


def step(mm: MooreMachine, state: int, obs: int, fallback: FallbackRule = FallbackRule.MOST_FREQUENT):
    """Advance one observation; returns ``(next_state, action)``."""
    tr = mm.transitions.get((state, obs))
    if tr is not None:
        return tr.target, mm.action_of(tr.target)
    if fallback is FallbackRule.FAIL:
        raise UnknownObservation(f"no transition from state {state} under obs {obs}")
    arc = mm.most_frequent_arc(state)
    if arc is None:
        raise DeadEnd(f"state {state} has no outgoing transitions")
    return arc[1], mm.action_of(arc[1])


def _identity_encoder(obs) -> Code:
    return tuple(int(v) for v in np.rint(np.asarray(obs, dtype=float)))


class MachinePolicy:
    """Adapter that lets a machine act in an environment.

    ``obs_encoder`` maps a raw observation to a ternary code; without one the
    raw observation is taken to be the code itself. If ``record`` is set,
    ``visits`` accumulates how often each arc was actually taken.
    """

    def __init__(self, mm: MooreMachine, fallback: FallbackRule = FallbackRule.MOST_FREQUENT,
                 obs_encoder: Callable | None = None, record: bool = False):
        self.mm = mm
        self.fallback = fallback
        self.encode = obs_encoder or _identity_encoder
        self.visits: Counter | None = Counter() if record else None
        self.state = mm.start

    def reset(self) -> None:
        self.state = self.mm.start

    def act(self, obs) -> int:
        o = self.mm.bind(self.encode(obs))
        nxt, action = step(self.mm, self.state, o, self.fallback)
        if self.visits is not None:
            key = (self.state, o)
            if key not in self.mm.transitions:
                key = (self.state, self.mm.most_frequent_arc(self.state)[0])
            self.visits[key] += 1
        self.state = nxt
        return action


def run_policy(mm: MooreMachine, env, episodes: int = 20,
               fallback: FallbackRule = FallbackRule.MOST_FREQUENT,
               obs_encoder: Callable | None = None, seed_base: int = 0,
               seeds: Sequence[int] | None = None) -> MachineStats:
    from .envs import evaluate_seeds

    if seeds is None:
        seeds = range(seed_base, seed_base + episodes)
    report = evaluate_seeds(MachinePolicy(mm, fallback, obs_encoder), env, seeds)
    return replace(stats(mm), mean_return=report.mean,
                   episodes_evaluated=len(report.returns), returns=report.returns)


# ---------------------------------------------------------------------------
# Analysis


def decision_points(mm: MooreMachine) -> list[int]:
    return [s for s in mm.state_ids if len(mm.successors(s)) >= 2]


def stats(mm: MooreMachine) -> MachineStats:
    return MachineStats(
        decision_points=len(decision_points(mm)),
        states=len(mm.states),
        observations=len({o for _, o in mm.transitions}),
        transitions=len(mm.transitions),
    )


def _completed_rows(mm: MooreMachine) -> dict[int, tuple]:
    """Successor of every (state, obs) under the most-frequent fallback.

    ``None`` stands for a dead end (a state with no outgoing transitions).
    """
    obs = list(mm.obs_alphabet)
    rows = {}
    for s in mm.state_ids:
        arc = mm.most_frequent_arc(s)
        if arc is None:
            rows[s] = (None,) * len(obs)
            continue
        rows[s] = tuple(
            mm.transitions[(s, o)].target if (s, o) in mm.transitions else arc[1] for o in obs
        )
    return rows


def minimize(mm: MooreMachine) -> MooreMachine:
    """Quotient by partition refinement of the fallback-completed machine."""
    rows = _completed_rows(mm)
    ids = mm.state_ids
    block = {s: mm.action_of(s) for s in ids}
    n_blocks = len(set(block.values()))
    while True:
        sigs = {
            s: (block[s], tuple(None if t is None else block[t] for t in rows[s])) for s in ids
        }
        numbering: dict = {}
        new_block = {s: numbering.setdefault(sigs[s], len(numbering)) for s in ids}
        if len(numbering) == n_blocks:
            block = new_block
            break
        block, n_blocks = new_block, len(numbering)

    # renumber blocks by their smallest member
    members: dict[int, list[int]] = {}
    for s in ids:
        members.setdefault(block[s], []).append(s)
    order = sorted(members.values(), key=min)
    new_id = {}
    for i, group in enumerate(order):
        for s in group:
            new_id[s] = i
    obs = list(mm.obs_alphabet)
    records, transitions = [], {}
    for i, group in enumerate(order):
        rep = group[0]
        records.append(StateRecord(i, mm.action_of(rep), mm.code_of(rep)))
        if rows[rep][0] is None:
            continue
        observed: dict[int, int] = {}
        for s in group:
            for o, _, c in mm.outgoing(s):
                observed[o] = observed.get(o, 0) + c
        row = {o: new_id[t] for o, t in zip(obs, rows[rep])}
        arcs = {o: Transition(row[o], c) for o, c in observed.items()}
        best = max(arcs.items(), key=lambda kv: (kv[1].count, -kv[0]))
        if any(row[o] != best[1].target for o in obs if o not in arcs):
            # the quotient's own fallback would disagree; spell the row out
            arcs = {o: Transition(row[o], observed.get(o, 1)) for o in obs}
        for o, tr in arcs.items():
            transitions[(i, o)] = tr
    return MooreMachine(
        states=tuple(records),
        start=new_id[mm.start],
        obs_alphabet=dict(mm.obs_alphabet),
        transitions=transitions,
        nh=mm.nh,
        no=mm.no,
    )


_DEAD = "dead-end"


def equivalent(a: MooreMachine, b: MooreMachine, depth: int,
               fallback: FallbackRule = FallbackRule.MOST_FREQUENT) -> bool:
    """Compare emitted action sequences for every obs string up to ``depth``.

    Strings are enumerated level by level; strings that drive both machines
    into the same pair of states are interchangeable from then on, so each
    level keeps one representative per state pair. A dead end emits a marker
    and ends the string.
    """
    if dict(a.obs_alphabet) != dict(b.obs_alphabet):
        raise AlphabetMismatch("machines use different observation alphabets")
    frontier = {(a.start, b.start)}
    for _ in range(depth):
        nxt = set()
        for sa, sb in frontier:
            for o in a.obs_alphabet:
                ra = _try_step(a, sa, o, fallback)
                rb = _try_step(b, sb, o, fallback)
                if (ra is _DEAD) != (rb is _DEAD):
                    return False
                if ra is _DEAD:
                    continue
                if ra[1] != rb[1]:
                    return False
                nxt.add((ra[0], rb[0]))
        if not nxt or nxt == frontier:
            # later levels would repeat an already checked frontier
            break
        frontier = nxt
    return True


def _try_step(mm, s, o, fallback):
    try:
        return step(mm, s, o, fallback)
    except DeadEnd:
        return _DEAD


# ---------------------------------------------------------------------------
# Text formats


_TRIT = {1: "+", 0: "0", -1: "-"}
_TRIT_INV = {v: k for k, v in _TRIT.items()}


def code_to_str(code: Code) -> str:
    return "".join(_TRIT[v] for v in code)


def str_to_code(text: str) -> Code:
    return tuple(_TRIT_INV[ch] for ch in text)


def serialize(mm: MooreMachine) -> str:
    lines = [f"mm v1 Nh={mm.nh} No={mm.no}", f"start {mm.start}"]
    lines += [f"state {r.id} action {r.action} code {code_to_str(r.code)}" for r in mm.states]
    lines += [f"obs {o} code {code_to_str(c)}" for o, c in mm.obs_alphabet.items()]
    lines += [
        f"trans {s} {o} {tr.target} count {tr.count}" for (s, o), tr in mm.transitions.items()
    ]
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> MooreMachine:
    header = None
    start = None
    states: dict[int, StateRecord] = {}
    obs: dict[int, Code] = {}
    trans: dict[tuple[int, int], Transition] = {}
    trans_lines: dict[tuple[int, int], int] = {}
    start_line = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if header is None:
                if tok[:2] != ["mm", "v1"] or len(tok) != 4:
                    raise ParseError("expected header 'mm v1 Nh=<int> No=<int>'", lineno)
                if not tok[2].startswith("Nh=") or not tok[3].startswith("No="):
                    raise ParseError("malformed header", lineno)
                header = (int(tok[2][3:]), int(tok[3][3:]))
            elif tok[0] == "start" and len(tok) == 2:
                start, start_line = int(tok[1]), lineno
            elif tok[0] == "state" and len(tok) == 6 and tok[2] == "action" and tok[4] == "code":
                sid = int(tok[1])
                if sid in states:
                    raise ParseError(f"duplicate state {sid}", lineno)
                code = _parse_code(tok[5], header[0], lineno)
                states[sid] = StateRecord(sid, int(tok[3]), code)
            elif tok[0] == "obs" and len(tok) == 4 and tok[2] == "code":
                oid = int(tok[1])
                if oid in obs:
                    raise ParseError(f"duplicate obs {oid}", lineno)
                obs[oid] = _parse_code(tok[3], header[1], lineno)
            elif tok[0] == "trans" and len(tok) == 6 and tok[4] == "count":
                key = (int(tok[1]), int(tok[2]))
                if key in trans:
                    raise ParseError(f"duplicate transition key {key}", lineno)
                count = int(tok[5])
                if count < 1:
                    raise ParseError("transition count must be >= 1", lineno)
                trans[key] = Transition(int(tok[3]), count)
                trans_lines[key] = lineno
            else:
                raise ParseError(f"unrecognized line {line!r}", lineno)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if header is None:
        raise ParseError("missing header", 1)
    if start is None:
        raise ParseError("missing start line", None)
    if start not in states:
        raise ParseError(f"start state {start} is not declared", start_line)
    for key, tr in trans.items():
        ln = trans_lines[key]
        if key[0] not in states or tr.target not in states:
            raise ParseError(f"transition {key} references an undeclared state", ln)
        if key[1] not in obs:
            raise ParseError(f"transition {key} references an undeclared observation", ln)
    return MooreMachine(tuple(states.values()), start, obs, trans, header[0], header[1])


def _parse_code(text, length, lineno):
    try:
        code = str_to_code(text)
    except KeyError:
        raise ParseError(f"bad ternary code {text!r}", lineno) from None
    if len(code) != length:
        raise ParseError(f"code {text!r} has length {len(code)}, expected {length}", lineno)
    return code


def trace_to_json(trace: Trace) -> str:
    obj = {
        "return": trace.ret,
        "steps": [
            {"h": list(s.h), "a": s.a, "f": list(s.f), "hn": list(s.h_next)} for s in trace.steps
        ],
    }
    if trace.start_action is not None:
        obj["start_action"] = trace.start_action
    return json.dumps(obj, separators=(",", ":"))


def write_traces(traces: Iterable[Trace]) -> str:
    return "".join(trace_to_json(t) + "\n" for t in traces)


def read_traces(text: str) -> list[Trace]:
    traces = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            steps = tuple(
                TransitionTuple(_as_code(s["h"]), int(s["a"]), _as_code(s["f"]), _as_code(s["hn"]))
                for s in obj["steps"]
            )
            traces.append(Trace(steps, float(obj.get("return", 0.0)), obj.get("start_action")))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"bad trace record: {exc}", lineno) from None
    return traces


def replay(mm: MooreMachine, trace: Trace) -> list[tuple[int, int, int, int]]:
    """Replay a trace with the Fail rule; returns (state, obs, next, action) per step."""
    index = {r.code: r.id for r in mm.states}
    out = []
    for st in trace.steps:
        s = index.get(tuple(st.h))
        o = mm._code_index.get(tuple(st.f))
        if s is None or o is None:
            raise UnknownObservation(f"trace step {st} uses codes the machine does not know")
        nxt, act = step(mm, s, o, FallbackRule.FAIL)
        out.append((s, o, nxt, act))
    return out
