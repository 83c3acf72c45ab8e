"""Happens-before, partial-order computations, cuts and progress measures.

Ordered actions are identified by ``(process, seq)`` where ``seq`` is the
position on the process's timeline.  Message edges pair the k-th send on a
channel with its k-th receive, so the order is derived from timelines alone
and survives payload changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

from .kernel import (DB, Action, ComputationFragment, GlobalState, Internal,
                     KernelError, NotEnabled, ProcessId, Receive, Send, System,
                     UpdateAction, fragment_from_trace, step)
from .model import RelayPartition, relays_from_timelines


class CycleDetected(ValueError):
    pass


class LimitExceeded(RuntimeError):
    pass


class _Enough(Exception):
    pass


@dataclass(frozen=True)
class OrderedAction:
    process: ProcessId
    seq: int
    label: Action


@dataclass(frozen=True)
class Cut:
    frontier: tuple  # sorted ((ProcessId, count), ...)

    @classmethod
    def of(cls, counts: dict) -> "Cut":
        return cls(tuple(sorted((p, n) for p, n in counts.items() if n)))

    def count(self, p: ProcessId) -> int:
        return dict(self.frontier).get(p, 0)

    def contains(self, node) -> bool:
        p, seq = node
        return seq < self.count(p)

    def to_json(self) -> dict:
        return {str(p): n for p, n in self.frontier}


@dataclass(frozen=True, order=True)
class ProgressMeasure:
    cut: int
    sort: int

    def to_json(self) -> dict:
        return {"cut": self.cut, "sort": self.sort}


class PoComputation:
    """Actions of a finite computation ordered by happens-before."""

    def __init__(self, system: System, start: GlobalState, timelines: dict):
        self.system = system
        self.start = start
        self.timelines = {p: tuple(acts) for p, acts in sorted(timelines.items()) if acts}
        self.nodes = [(p, i) for p, acts in self.timelines.items() for i in range(len(acts))]
        self.index = {n: k for k, n in enumerate(self.nodes)}
        preds: list[list[int]] = [[] for _ in self.nodes]
        sends: dict = {}
        for p, acts in self.timelines.items():
            for i, a in enumerate(acts):
                if i:
                    preds[self.index[(p, i)]].append(self.index[(p, i - 1)])
                if isinstance(a, Send):
                    sends.setdefault((a.src, a.dst), []).append((p, i))
        self.message_edges: list[tuple] = []
        for p, acts in self.timelines.items():
            k: dict = {}
            for i, a in enumerate(acts):
                if isinstance(a, Receive):
                    ch = (a.src, a.at)
                    j = k.get(ch, 0)
                    k[ch] = j + 1
                    lst = sends.get(ch, [])
                    if j >= len(lst):
                        raise CycleDetected(f"receive {(p, i)} has no matching send")
                    preds[self.index[(p, i)]].append(self.index[lst[j]])
                    self.message_edges.append((lst[j], (p, i)))
        self.preds = preds

    @classmethod
    def from_fragment(cls, fragment: ComputationFragment) -> "PoComputation":
        tl: dict = {}
        for a in fragment.trace:
            tl.setdefault(a.proc, []).append(a)
        return cls(fragment.system, fragment.start, tl)

    def label(self, node) -> Action:
        p, i = node
        return self.timelines[p][i]

    def ordered_actions(self) -> list[OrderedAction]:
        return [OrderedAction(p, i, self.label((p, i))) for p, i in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def topo(self) -> list[int]:
        n = len(self.nodes)
        succ: list[list[int]] = [[] for _ in range(n)]
        indeg = [0] * n
        for v, ps in enumerate(self.preds):
            for u in ps:
                succ[u].append(v)
                indeg[v] += 1
        ready = sorted(v for v in range(n) if indeg[v] == 0)
        out = []
        import heapq
        heapq.heapify(ready)
        while ready:
            v = heapq.heappop(ready)
            out.append(v)
            for w in succ[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    heapq.heappush(ready, w)
        if len(out) != n:
            raise CycleDetected("happens-before has a cycle")
        self.succ = succ
        return out

    @cached_property
    def ancestors(self) -> list[int]:
        anc = [0] * len(self.nodes)
        for v in self.topo:
            m = 0
            for u in self.preds[v]:
                m |= anc[u] | (1 << u)
            anc[v] = m
        return anc

    def is_acyclic(self) -> bool:
        try:
            self.topo
        except CycleDetected:
            return False
        return True

    def happens_before(self, a, b) -> bool:
        return bool(self.ancestors[self.index[b]] >> self.index[a] & 1)

    @cached_property
    def relays(self) -> RelayPartition:
        versions = getattr(self.system, "worker_versions", None)
        return relays_from_timelines({p: list(v) for p, v in self.timelines.items()}, versions)

    @cached_property
    def colors(self) -> dict:
        col = {n: "neutral" for n in self.nodes}
        for r in self.relays:
            if r.color == "neutral":
                continue
            for aid in r.actions:
                if aid == r.client_send and r.worker_recv is None:
                    continue
                col[aid] = r.color
        return col

    def color(self, node) -> str:
        return self.colors[node]

    def topo_trace(self) -> list[Action]:
        return [self.label(self.nodes[v]) for v in self.topo]

    def linearize(self) -> ComputationFragment:
        return fragment_from_trace(self.system, self.topo_trace(), self.start)

    @cached_property
    def db_timeline(self) -> list:
        return [(DB, i) for i in range(len(self.timelines.get(DB, ())))]

    def closure(self, seeds: Iterable) -> set:
        mask = 0
        for n in seeds:
            k = self.index[n]
            mask |= self.ancestors[k] | (1 << k)
        return {self.nodes[k] for k in range(len(self.nodes)) if mask >> k & 1}

    def cut_of(self, included: set) -> Cut:
        counts: dict = {}
        for p, i in included:
            counts[p] = max(counts.get(p, 0), i + 1)
        return Cut.of(counts)


def induce_po(fragment: ComputationFragment) -> PoComputation:
    return PoComputation.from_fragment(fragment)


def happens_before(po: PoComputation, a, b) -> bool:
    return po.happens_before(a, b)


def message_bridge(po: PoComputation, a, b) -> list | None:
    """A chain of edges from ``a`` to ``b``; message edges in it witness the
    communication that orders actions of distinct processes."""
    if not po.happens_before(a, b):
        return None
    path = [b]
    cur = b
    while cur != a:
        k = po.index[cur]
        for u in po.preds[k]:
            un = po.nodes[u]
            if un == a or po.happens_before(a, un):
                cur = un
                break
        path.append(cur)
    path.reverse()
    msgs = set(po.message_edges)
    return [(x, y) for x, y in zip(path, path[1:]) if (x, y) in msgs]


def linearizations(po: PoComputation, limit: int = 10_000, replay: bool = True,
                   strict: bool = True) -> list:
    """All topological orders of ``po``; replayed into fragments by default.

    With ``strict`` more than ``limit`` orders raise; otherwise the first
    ``limit`` are returned.
    """
    po.topo  # raises on cycles
    n = len(po.nodes)
    indeg = [len(set(ps)) for ps in po.preds]
    succ = [[] for _ in range(n)]
    for v, ps in enumerate(po.preds):
        for u in set(ps):
            succ[u].append(v)
    out: list = []
    order: list[int] = []

    def rec():
        if len(order) == n:
            if len(out) >= limit:
                if strict:
                    raise LimitExceeded(f"more than {limit} linearizations")
                raise _Enough
            out.append(list(order))
            return
        for v in range(n):
            if indeg[v] == 0 and v not in placed:
                placed.add(v)
                order.append(v)
                for w in succ[v]:
                    indeg[w] -= 1
                rec()
                for w in succ[v]:
                    indeg[w] += 1
                order.pop()
                placed.discard(v)

    placed: set = set()
    try:
        rec()
    except _Enough:
        pass
    if not replay:
        return [[po.nodes[v] for v in o] for o in out]
    return [fragment_from_trace(po.system, [po.label(po.nodes[v]) for v in o], po.start) for o in out]


def is_consistent_cut(po: PoComputation, cut: Cut) -> bool:
    for n in po.nodes:
        if cut.contains(n):
            for u in po.preds[po.index[n]]:
                if not cut.contains(po.nodes[u]):
                    return False
    for p, k in cut.frontier:
        if k > len(po.timelines.get(p, ())):
            return False
    return True


def included(po: PoComputation, cut: Cut) -> set:
    return {n for n in po.nodes if cut.contains(n)}


def red_client_receives(po: PoComputation) -> list:
    return [n for n in po.nodes
            if n[0].role == "client" and isinstance(po.label(n), Receive) and po.color(n) == "red"]


def global_update_cut(po: PoComputation) -> Cut:
    """Downward closure of every red client receive."""
    return po.cut_of(po.closure(red_client_receives(po)))


def _update_consistent(po: PoComputation, cut: Cut) -> bool:
    for n in po.nodes:
        c = po.color(n)
        inside = cut.contains(n)
        if (c == "red" and not inside) or (c == "blue" and inside):
            return False
    return is_consistent_cut(po, cut)


def update_consistent_cut(po: PoComputation) -> Cut | None:
    """Some consistent cut with every red action in and every blue action out."""
    cand = global_update_cut(po)
    if _update_consistent(po, cand):
        return cand
    reds = [n for n in po.nodes if po.color(n) == "red"]
    cand = po.cut_of(po.closure(reds))
    if _update_consistent(po, cand):
        return cand
    return None


def cut_measure(po: PoComputation) -> int:
    inside = po.closure(red_client_receives(po))
    return sum(1 for n in inside if po.color(n) == "blue")


def sort_measure(po: PoComputation) -> int:
    """Inversions on the database timeline: blue actions before each red one."""
    blues = 0
    total = 0
    for n in po.db_timeline:
        c = po.color(n)
        if c == "blue":
            blues += 1
        elif c == "red":
            total += blues
    return total


def progress_measure(po: PoComputation) -> ProgressMeasure:
    return ProgressMeasure(cut_measure(po), sort_measure(po))


def has_atomic_update_po(po: PoComputation) -> bool:
    ups = [n for n in po.nodes if isinstance(po.label(n), UpdateAction)]
    return not any(po.happens_before(a, b) for a in ups for b in ups if a != b)


def resimulate(system: System, start: GlobalState, timelines: dict) -> PoComputation:
    """Recompute message payloads of a rearranged computation.

    Client sends are kept verbatim; receives take whatever sits at the
    channel head; every other action is the unique local move of the same
    shape.  Raises NotEnabled if the arrangement cannot execute.
    """
    skel = PoComputation(system, start, timelines)
    state = start
    new_tl = {p: list(acts) for p, acts in skel.timelines.items()}
    for v in skel.topo:
        p, i = skel.nodes[v]
        a = new_tl[p][i]
        if isinstance(a, Receive):
            head = system.channel(state, a.src, a.at)
            if not head:
                raise NotEnabled(a, "channel empty during resimulation")
            a = Receive(a.at, a.src, head[0])
        elif not (isinstance(a, Send) and p.role == "client"):
            local = system.local(state, p)
            match = [m for m, _ in system.lts(p).moves(local) if _same_shape(m, a)]
            if len(match) != 1:
                raise NotEnabled(a, f"{len(match)} moves of this shape")
            a = match[0]
        state = step(system, state, a)
        new_tl[p][i] = a
    return PoComputation(system, start, new_tl)


def _same_shape(m: Action, a: Action) -> bool:
    if type(m) is not type(a):
        return False
    if isinstance(a, Send):
        return m.dst == a.dst
    if isinstance(a, Internal):
        return m.tag == a.tag
    return True
