"""Readable views of Moore machines.

A view never edits the machine. It is a graph over *view nodes*, pairs
``(state, copy)``, built from the paths recorded traces take through the
machine. Copies appear when a loop that runs exactly once per entry is
unrolled. The reductions then keep only the nodes a reader needs (branch
points, the start, terminals, boundary endpoints) and draw everything in
between as annotated arcs:

* ``Plain``    one observed transition
* ``Abstract`` several observations leading to the same node
* ``Macro``    a fixed run through non-branching nodes (dotted, with length)
* ``Boundary`` warm-up or termination steps folded into one arc

Every arc remembers the machine-level hops it stands for, so the view can be
replayed against traces.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

from .automaton import MooreMachine, Trace, replay, serialize, deserialize
from .errors import IndexOutOfRange, ReplayMismatch, UnknownObservation

Node = tuple[int, int]


def node_label(n: Node) -> str:
    return str(n[0]) + "'" * n[1]


def parse_node(text: str) -> Node:
    base = text.rstrip("'")
    return int(base), len(text) - len(base)


# ---------------------------------------------------------------------------
# Visit counts


@dataclass
class VisitCounts:
    states: Counter = field(default_factory=Counter)
    transitions: Counter = field(default_factory=Counter)
    terminal: Counter = field(default_factory=Counter)


def _state_paths(mm: MooreMachine, traces) -> list[tuple[list[int], list[int]]]:
    paths = []
    for trace in traces:
        if not trace.steps:
            paths.append(([mm.start], []))
            continue
        try:
            steps = replay(mm, trace)
        except UnknownObservation as exc:
            raise ReplayMismatch(str(exc)) from None
        if steps[0][0] != mm.start:
            raise ReplayMismatch("trace does not begin in the start state")
        for (s, o, nxt, act), st in zip(steps, trace.steps):
            if act != st.a or mm.code_of(nxt) != tuple(st.h_next):
                raise ReplayMismatch(f"trace step {st} disagrees with the machine")
        for prev, cur in zip(steps, steps[1:]):
            if prev[2] != cur[0]:
                raise ReplayMismatch("trace steps do not chain")
        paths.append(([steps[0][0]] + [s[2] for s in steps], [s[1] for s in steps]))
    return paths


def visit_counts(mm: MooreMachine, traces) -> VisitCounts:
    """Exact occurrence counts of states and transitions along replayed traces."""
    counts = VisitCounts()
    for states, obs in _state_paths(mm, traces):
        counts.states.update(states)
        counts.transitions.update(zip(states, obs))
        counts.terminal[states[-1]] += 1
    return counts


# ---------------------------------------------------------------------------
# View graph


@dataclass
class _Graph:
    start: Node
    paths: list[tuple[list[Node], list[int]]]
    # built from the transition table rather than recorded traces
    synthetic: bool = False

    def hops(self) -> dict[tuple[Node, Node], Counter]:
        out: dict[tuple[Node, Node], Counter] = defaultdict(Counter)
        for nodes, obs in self.paths:
            for u, o, v in zip(nodes, obs, nodes[1:]):
                out[(u, v)][o] += 1
        return dict(out)

    def nodes(self) -> list[Node]:
        return sorted({n for nodes, _ in self.paths for n in nodes} | {self.start})

    def succ(self) -> dict[Node, set[Node]]:
        out: dict[Node, set[Node]] = defaultdict(set)
        for u, v in self.hops():
            out[u].add(v)
        return out

    def pred(self) -> dict[Node, set[Node]]:
        out: dict[Node, set[Node]] = defaultdict(set)
        for u, v in self.hops():
            out[v].add(u)
        return out

    def positions(self) -> dict[Node, set[int]]:
        out: dict[Node, set[int]] = defaultdict(set)
        for nodes, _ in self.paths:
            for i, n in enumerate(nodes):
                out[n].add(i)
        return out


@dataclass
class Hop:
    src: Node
    dst: Node
    obs: tuple[int, ...]


@dataclass
class ViewArc:
    kind: str  # Plain | Macro | Abstract | Boundary
    src: Node
    dst: Node
    hops: list[Hop]
    length: int | None = None
    obs_count: int | None = None
    obs: int | None = None
    hidden_path: list[int] = field(default_factory=list)
    action_sequence: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "src": node_label(self.src), "dst": node_label(self.dst)}
        if self.kind in ("Macro", "Boundary"):
            d["length"] = self.length
        if self.kind == "Abstract":
            d["obs_count"] = self.obs_count
        if self.kind == "Plain":
            d["obs"] = self.obs
        if self.kind in ("Macro", "Boundary"):
            d["hidden_path"] = list(self.hidden_path)
            d["action_sequence"] = list(self.action_sequence)
        d["hops"] = [[node_label(h.src), node_label(h.dst), list(h.obs)] for h in self.hops]
        return d

    @classmethod
    def from_dict(cls, d) -> "ViewArc":
        hops = [Hop(parse_node(a), parse_node(b), tuple(o)) for a, b, o in d["hops"]]
        return cls(d["kind"], parse_node(d["src"]), parse_node(d["dst"]), hops,
                   d.get("length"), d.get("obs_count"), d.get("obs"),
                   list(d.get("hidden_path", [])), list(d.get("action_sequence", [])))


@dataclass
class ReducedView:
    source_machine: MooreMachine
    nodes: list[Node]
    arcs: list[ViewArc]
    graph: _Graph | None = None
    forced: frozenset = frozenset()
    excluded: frozenset = frozenset()
    boundary: list[ViewArc] = field(default_factory=list)

    def decision_points(self) -> list[Node]:
        succ: dict[Node, set[Node]] = defaultdict(set)
        for a in self.arcs:
            succ[a.src].add(a.hops[0].dst)
        return [n for n in self.nodes if len(succ[n]) >= 2]

    def to_dict(self) -> dict:
        return {
            "nodes": [node_label(n) for n in self.nodes],
            "arcs": [a.to_dict() for a in self.arcs],
            "source_machine": serialize(self.source_machine),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ReducedView":
        d = json.loads(text)
        return cls(deserialize(d["source_machine"]), [parse_node(n) for n in d["nodes"]],
                   [ViewArc.from_dict(a) for a in d["arcs"]])


def _plain_arcs(graph: _Graph, keep=lambda u, v: True) -> list[ViewArc]:
    arcs = []
    for (u, v), obs in sorted(graph.hops().items()):
        if keep(u, v):
            for o in sorted(obs):
                arcs.append(ViewArc("Plain", u, v, [Hop(u, v, (o,))], obs=o))
    return arcs


def base_view(mm: MooreMachine, traces=None) -> ReducedView:
    """Unreduced view: every visited node kept, one Plain arc per transition.

    Without traces, a single pseudo-path per transition is used so the view
    covers the whole machine (no unrolling or boundaries are possible then).
    """
    if traces is None:
        paths = [([(s, 0), (tr.target, 0)], [o]) for (s, o), tr in mm.transitions.items()]
        paths.append(([(mm.start, 0)], []))
        graph = _Graph((mm.start, 0), paths, synthetic=True)
    else:
        paths = [([(s, 0) for s in states], obs) for states, obs in _state_paths(mm, traces)]
        graph = _Graph((mm.start, 0), paths)
    return ReducedView(mm, graph.nodes(), _plain_arcs(graph), graph)


# ---------------------------------------------------------------------------
# Loop unrolling


def _simple_loops(graph: _Graph) -> list[tuple[Node, list[Node]]]:
    """Loops ``head -> n1 -> ... -> nk -> head`` with non-branching interiors."""
    succ, pred = graph.succ(), graph.pred()
    loops = []
    for head in graph.nodes():
        if head in succ.get(head, ()):
            loops.append((head, []))
        for first in sorted(succ.get(head, ())):
            interior, cur = [], first
            while cur != head and len(succ.get(cur, ())) == 1 and len(pred.get(cur, ())) == 1 \
                    and cur not in interior:
                interior.append(cur)
                cur = next(iter(succ[cur]))
            if cur == head and interior:
                loops.append((head, interior))
    loops.sort(key=lambda lp: (len(lp[1]), lp[0]))
    return loops


def _unroll(graph: _Graph, head: Node, interior: list[Node]) -> _Graph | None:
    """Rewrite closing visits of ``head`` to a fresh copy, or None if ineligible."""
    k = len(interior)
    loop_body = interior + [head]
    first = interior[0] if interior else head
    new_copy = (head[0], 1 + max(n[1] for n in graph.nodes() if n[0] == head[0]))
    counts = Counter()
    new_paths = []
    for nodes, obs in graph.paths:
        nodes = list(nodes)
        i = 0
        while i < len(nodes):
            if nodes[i] != head:
                i += 1
                continue
            end = i + k + 1
            ahead = nodes[i + 1:end + 1]
            if ahead != loop_body[:len(ahead)]:
                return None
            if end < len(nodes):
                nodes[end] = new_copy
                counts["closed"] += 1
                if end + 1 < len(nodes) and nodes[end + 1] == first:
                    return None
            i = end + 1
        new_paths.append((nodes, obs))
    if not counts["closed"]:
        return None
    out = _Graph(graph.start, new_paths, graph.synthetic)
    hops = out.hops()
    last = interior[-1] if interior else head
    if (last, head) in hops:
        return None
    return out


def unroll_once_loops(view: ReducedView) -> ReducedView:
    """Unroll loops traversed exactly once per entry, innermost first.

    A loop qualifies when every trace entering its head runs the loop body
    once and then leaves. This implies every hop on the loop is taken as
    often as the loop is entered, and it also rules out entries that skip
    the loop or repeat it, which an aggregate count check alone would miss.
    """
    graph = view.graph
    if graph is None or graph.synthetic:
        return view
    changed = True
    while changed:
        changed = False
        for head, interior in _simple_loops(graph):
            rewritten = _unroll(graph, head, interior)
            if rewritten is not None:
                graph = rewritten
                changed = True
                break
    return replace(view, nodes=graph.nodes(), arcs=_plain_arcs(graph), graph=graph)


# ---------------------------------------------------------------------------
# Sequences and parallel arcs


def _retained(graph: _Graph, forced, excluded) -> set[Node]:
    hops = {k: v for k, v in graph.hops().items() if k[0] not in excluded and k[1] not in excluded}
    succ: dict[Node, set[Node]] = defaultdict(set)
    for u, v in hops:
        succ[u].add(v)
    nodes = [n for n in graph.nodes() if n not in excluded]
    keep = {graph.start} | set(forced)
    keep |= {n for n in nodes if len(succ[n]) != 1}
    keep &= set(nodes)
    # a cycle of non-branching nodes with nothing retained gets its smallest node kept
    changed = True
    while changed:
        changed = False
        for n in nodes:
            if n in keep:
                continue
            seen, cur = [], n
            while cur not in keep and cur not in seen:
                seen.append(cur)
                cur = next(iter(succ[cur]))
            if cur not in keep:
                keep.add(min(seen[seen.index(cur):]))
                changed = True
    return keep


def _sequence_arcs(view: ReducedView, graph, keep, excluded) -> list[ViewArc]:
    mm = view.source_machine
    hops = graph.hops()
    succ: dict[Node, list[Node]] = defaultdict(list)
    for u, v in sorted(hops):
        if u not in excluded and v not in excluded:
            succ[u].append(v)
    arcs = []
    for u in sorted(keep):
        for v in succ[u]:
            first = Hop(u, v, tuple(sorted(hops[(u, v)])))
            if v in keep:
                arcs += [ViewArc("Plain", u, v, [Hop(u, v, (o,))], obs=o) for o in first.obs]
                continue
            path, chain, cur = [], [first], v
            while cur not in keep:
                path.append(cur)
                nxt = succ[cur][0]
                chain.append(Hop(cur, nxt, tuple(sorted(hops[(cur, nxt)]))))
                cur = nxt
            arcs.append(ViewArc(
                "Macro", u, cur, chain, length=len(path),
                hidden_path=[n[0] for n in path],
                action_sequence=[mm.action_of(n[0]) for n in path],
            ))
    return arcs


def reduce_sequences(view: ReducedView) -> ReducedView:
    """Collapse maximal non-branching runs between retained nodes into Macro arcs."""
    graph = view.graph
    keep = _retained(graph, view.forced, view.excluded)
    arcs = _sequence_arcs(view, graph, keep, view.excluded) + list(view.boundary)
    return replace(view, nodes=sorted(keep), arcs=arcs)


def merge_parallel(view: ReducedView) -> ReducedView:
    """Merge Plain arcs sharing endpoints into one Abstract arc per pair."""
    groups: dict[tuple[Node, Node], list[ViewArc]] = defaultdict(list)
    rest = []
    for a in view.arcs:
        if a.kind in ("Plain", "Abstract"):
            groups[(a.src, a.dst)].append(a)
        else:
            rest.append(a)
    merged = []
    for (u, v), arcs in groups.items():
        obs = sorted({h.obs[i] for a in arcs for h in a.hops for i in range(len(h.obs))})
        if len(obs) == 1:
            merged.append(ViewArc("Plain", u, v, [Hop(u, v, (obs[0],))], obs=obs[0]))
        else:
            merged.append(ViewArc("Abstract", u, v, [Hop(u, v, tuple(obs))], obs_count=len(obs)))
    arcs = sorted(merged + rest, key=lambda a: (a.src, a.dst, a.kind, a.hidden_path))
    return replace(view, arcs=arcs)


# ---------------------------------------------------------------------------
# Boundaries


def mark_boundaries(view: ReducedView, warmup_end: int = 0,
                    termination_start: int | None = None) -> ReducedView:
    """Fold warm-up and termination steps into Boundary arcs.

    A node is warm-up if every visit happens before step ``warmup_end``, and
    termination if every visit happens at or after ``termination_start``.
    The start node and the last node of each trace always stay.
    """
    graph = view.graph
    longest = max(len(obs) for _, obs in graph.paths)
    if warmup_end < 0 or warmup_end > longest:
        raise IndexOutOfRange(f"warmup_end {warmup_end} outside [0, {longest}]")
    if termination_start is not None and not warmup_end <= termination_start <= longest:
        raise IndexOutOfRange(
            f"termination_start {termination_start} outside [{warmup_end}, {longest}]"
        )
    if warmup_end == 0 and termination_start is None:
        return view
    if graph.synthetic:
        raise IndexOutOfRange("boundaries need recorded traces")
    positions = graph.positions()
    finals = {nodes[-1] for nodes, _ in graph.paths}
    warm = {n for n, ps in positions.items() if max(ps) < warmup_end}
    term = set()
    if termination_start is not None:
        term = {n for n, ps in positions.items() if min(ps) >= termination_start}
    collapsed = (warm | term) - {graph.start} - finals
    if not collapsed:
        return view
    mm = view.source_machine
    found: dict[tuple, ViewArc] = {}
    forced = set(view.forced)
    for nodes, obs in graph.paths:
        i = 0
        while i < len(nodes):
            if nodes[i] not in collapsed:
                i += 1
                continue
            j = i
            while nodes[j] in collapsed:
                j += 1
            src, dst = nodes[i - 1], nodes[j]
            hops = [Hop(nodes[p], nodes[p + 1], (obs[p],)) for p in range(i - 1, j)]
            key = (src, dst, tuple((h.src, h.dst, h.obs) for h in hops))
            if key not in found:
                inner = nodes[i:j]
                found[key] = ViewArc("Boundary", src, dst, hops, length=j - i + 1,
                                     hidden_path=[n[0] for n in inner],
                                     action_sequence=[mm.action_of(n[0]) for n in inner])
            forced |= {src, dst}
            i = j
    boundary = sorted(found.values(), key=lambda a: (a.src, a.dst, a.length, a.hidden_path))
    return merge_parallel(reduce_sequences(replace(
        view, forced=frozenset(forced), excluded=frozenset(collapsed), boundary=boundary)))


# ---------------------------------------------------------------------------
# Composition, expansion, replay


@dataclass
class Annotations:
    warmup_end: int = 0
    termination_start: int | None = None


def reduce_all(mm: MooreMachine, traces=None, annotations: Annotations | None = None) -> ReducedView:
    """Unroll once-run loops, then reduce sequences, parallel arcs and boundaries."""
    annotations = annotations or Annotations()
    view = base_view(mm, traces)
    view = unroll_once_loops(view)
    view = merge_parallel(reduce_sequences(view))
    return mark_boundaries(view, annotations.warmup_end, annotations.termination_start)


def expand(view: ReducedView) -> set[tuple[int, int, int]]:
    """Machine transitions ``(state, obs, target)`` the view stands for."""
    return {(h.src[0], o, h.dst[0]) for a in view.arcs for h in a.hops for o in h.obs}


def replay_view(view: ReducedView, obs_ids) -> list[int]:
    """Actions produced by walking the view's arcs on an observation sequence.

    The walk may stop part way through an arc when the observations run out.
    """
    mm = view.source_machine
    by_src: dict[Node, list[ViewArc]] = defaultdict(list)
    for a in view.arcs:
        by_src[a.src].append(a)
    obs_ids = list(obs_ids)

    def walk(node, i):
        if i == len(obs_ids):
            return []
        for arc in by_src.get(node, ()):
            acts, j = [], i
            for hop in arc.hops:
                if j == len(obs_ids):
                    return acts
                if obs_ids[j] not in hop.obs:
                    break
                acts.append(mm.action_of(hop.dst[0]))
                j += 1
            else:
                rest = walk(arc.dst, j)
                if rest is not None:
                    return acts + rest
        return None

    result = walk((mm.start, 0), 0)
    if result is None:
        raise ReplayMismatch("the view has no path for this observation sequence")
    return result


def replay_trace_actions(view: ReducedView, trace: Trace) -> list[int]:
    mm = view.source_machine
    return replay_view(view, [s[1] for s in replay(mm, trace)])


# ---------------------------------------------------------------------------
# DOT


def _q(text) -> str:
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(obj, name: str = "mm") -> str:
    """Graphviz text for a machine or a reduced view."""
    lines = [f"digraph {_q(name)} {{", "  rankdir=LR;", "  node [shape=circle];"]
    if isinstance(obj, MooreMachine):
        dps = set(obj.decision_points())
        for r in obj.states:
            attrs = [f"label={_q(f'S{r.id} a{r.action}')}"]
            if r.id in dps:
                attrs.append("shape=doublecircle")
            if r.id == obj.start:
                attrs.append("style=bold")
            lines.append(f"  {_q(r.id)} [{', '.join(attrs)}];")
        for (s, o), tr in obj.transitions.items():
            lines.append(f"  {_q(s)} -> {_q(tr.target)} [label={_q(o)}];")
    else:
        mm = obj.source_machine
        dps = set(obj.decision_points())
        for n in obj.nodes:
            attrs = [f"label={_q(f'S{node_label(n)} a{mm.action_of(n[0])}')}"]
            if n in dps:
                attrs.append("shape=doublecircle")
            if n == (mm.start, 0):
                attrs.append("style=bold")
            lines.append(f"  {_q(node_label(n))} [{', '.join(attrs)}];")
        for a in obj.arcs:
            if a.kind == "Plain":
                attrs = f"label={_q(a.obs)}"
            elif a.kind == "Abstract":
                attrs = f"label={_q(f'{a.obs_count} obs')}"
            elif a.kind == "Macro":
                attrs = f"label={_q(a.length)}, style=dotted"
            else:
                attrs = f"label={_q(f'||{a.length}')}, color=\"black:black\""
            lines.append(f"  {_q(node_label(a.src))} -> {_q(node_label(a.dst))} [{attrs}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
