"""Constructive demonstration that payload-blind updaters admit inconsistency.

A mixed-mode trace of any service is relabeled, message by message, into a
trace of a two-valued adversarial service in which an old worker's request
is answered with 1 once a new worker has written.  A payload-blind
controller cannot tell the two traces apart, yet no atomic-update
computation of the adversarial service ever answers 1.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .checker import ConsistencyVerdict, check_by_oracle
from .control import Controller, is_mixed_mode
from .kernel import (DB, Action, ComputationFragment, Internal, Message,
                     Receive, Send, UpdateAction, action_to_json,
                     fragment_from_trace, run, successors)
from .model import MicroserviceSystem, Scenario


class ShapeMismatch(ValueError):
    pass


class NotOblivious(ValueError):
    pass


class NoMixedModeFound(RuntimeError):
    pass


def adversarial_scenario(n_clients: int, n_workers: int, n_requests: int | Sequence[int] = 1,
                         order=None) -> Scenario:
    if n_clients < 1 or n_workers < 1:
        raise ValueError("need at least one client and one worker")
    counts = [n_requests] * n_clients if isinstance(n_requests, int) else list(n_requests)
    return Scenario(
        name=f"adversarial-{n_clients}x{n_workers}",
        client_ids=tuple(f"c{i}" for i in range(n_clients)),
        scripts=tuple((0,) * k for k in counts),
        n_workers=n_workers,
        db_kind="adversarial",
        annotation_mode="declared",
        backward="none",
        forward="none",
        update_order=tuple(order) if order is not None else None,
    )


def build_adversarial_system(n_clients: int, n_workers: int, n_requests: int | Sequence[int] = 1,
                             order=None) -> MicroserviceSystem:
    return MicroserviceSystem(adversarial_scenario(n_clients, n_workers, n_requests, order))


@dataclass
class RemapHistory:
    lastsnd: dict = field(default_factory=dict)
    lastrcv: dict = field(default_factory=dict)
    updated: dict = field(default_factory=dict)

    def snd(self, p, q) -> int:
        return self.lastsnd.get((p, q), 0)

    def rcv(self, p, q) -> int:
        return self.lastrcv.get((p, q), 0)


def value_remap(trace: Iterable[Action]) -> list[Action]:
    """Relabel every message value into {0, 1}; shapes and control are kept."""
    h = RemapHistory()
    out: list[Action] = []
    for a in trace:
        if isinstance(a, UpdateAction):
            if a.at.role != "worker":
                raise ShapeMismatch(f"update at {a.at}")
            h.updated[a.at] = 1
            out.append(a)
            continue
        if isinstance(a, Internal):
            out.append(a)
            continue
        if isinstance(a, Send):
            p, q = a.src, a.dst
            if p.role == "client" and q.role == "worker":
                v = 0
            elif p.role == "worker" and q == DB:
                v = h.updated.get(p, 0)
            elif p == DB and q.role == "worker":
                others = any(val == 1 for (d, w), val in h.lastrcv.items() if d == DB and w != q)
                v = 1 if h.snd(q, DB) == 0 and others else 0
            elif p.role == "worker" and q.role == "client":
                v = h.rcv(p, DB)
            else:
                raise ShapeMismatch(f"send on {p}->{q} outside the microservice topology")
            h.lastsnd[(p, q)] = v
            out.append(Send(p, q, Message(v, a.msg.control)))
            continue
        if isinstance(a, Receive):
            p, q = a.at, a.src
            if not ((p.role == "client" and q.role == "worker") or (p.role == "worker" and q.role == "client")
                    or (p == DB and q.role == "worker") or (p.role == "worker" and q == DB)):
                raise ShapeMismatch(f"receive on {q}->{p} outside the microservice topology")
            v = h.snd(q, p)
            h.lastrcv[(p, q)] = v
            out.append(Receive(p, q, Message(v, a.msg.control)))
            continue
        raise ShapeMismatch(f"unknown action {a!r}")
    return out


def shape(a: Action):
    """An action with its message value erased."""
    if isinstance(a, Send):
        return ("send", a.src, a.dst, a.msg.control)
    if isinstance(a, Receive):
        return ("recv", a.at, a.src, a.msg.control)
    if isinstance(a, Internal):
        return ("internal", a.at, a.tag)
    return ("update", a.at)


def redrive(controller: Controller, sys_a, trace_a: Sequence[Action], sys_b, trace_b: Sequence[Action]) -> list:
    """Drive the controller over two equal-shape traces side by side.

    Returns the step indices where the permitted enabled shape sets differ
    or the traced action itself is refused.
    """
    if [shape(a) for a in trace_a] != [shape(b) for b in trace_b]:
        raise ShapeMismatch("traces differ in shape")
    ca, cb = controller.start(sys_a), controller.start(sys_b)
    sa, sb = sys_a.initial_state(), sys_b.initial_state()
    from .kernel import step
    diffs = []
    for i, (a, b) in enumerate(zip(trace_a, trace_b)):
        pa = {shape(x) for x, _ in successors(sys_a, sa) if controller.permit(ca, x, sa)}
        pb = {shape(x) for x, _ in successors(sys_b, sb) if controller.permit(cb, x, sb)}
        ua, ub = _unstamped(a), _unstamped(b)
        if pa != pb or not controller.permit(ca, ua, sa) or not controller.permit(cb, ub, sb):
            diffs.append(i)
        sa, sb = step(sys_a, sa, a), step(sys_b, sb, b)
        controller.observe(ca, a)
        controller.observe(cb, b)
    return diffs


def _unstamped(a: Action) -> Action:
    if isinstance(a, Send) and a.src.role == "client":
        return Send(a.src, a.dst, a.msg.unstamped())
    return a


@dataclass
class ExhaustiveResult:
    states: int
    max_actions: int
    only_zero: bool
    counterexample: list | None = None

    def to_json(self) -> dict:
        d = {"states": self.states, "maxActions": self.max_actions, "onlyZeroResponses": self.only_zero}
        if self.counterexample is not None:
            d["counterexample"] = [action_to_json(a) for a in self.counterexample]
        return d


def atomic_responses_exhaustive(system: MicroserviceSystem, max_actions: int = 30) -> ExhaustiveResult:
    """Breadth-first over every atomic-update computation up to ``max_actions``,
    checking each client receive carries 0."""
    start = system.initial_state()
    n = len(system.workers)

    def n_updated(s):
        return sum(1 for w in system.workers if system.local(s, w)[0] == 1)

    root = (start, 0)
    parent = {root: None}
    frontier = [root]
    for depth in range(max_actions):
        nxt = []
        for node in frontier:
            state, phase = node
            for a, s2 in successors(system, state):
                if isinstance(a, Send) and a.src.role == "client" and a.msg.control:
                    continue
                if isinstance(a, UpdateAction):
                    if phase == 2:
                        continue
                    if phase == 0 and any(system.local(state, w)[1] != 0 for w in system.workers):
                        continue
                    np = 2 if n_updated(s2) == n else 1
                elif phase == 1:
                    continue
                else:
                    np = phase
                child = (s2, np)
                if isinstance(a, Receive) and a.at.role == "client" and a.msg.payload != 0:
                    path = [a]
                    cur = node
                    while parent[cur] is not None:
                        cur, act = parent[cur]
                        path.append(act)
                    return ExhaustiveResult(len(parent), max_actions, False, path[::-1])
                if child not in parent:
                    parent[child] = (node, a)
                    nxt.append(child)
        frontier = nxt
        if not frontier:
            break
    return ExhaustiveResult(len(parent), max_actions, True)


@dataclass
class ImpossibilityReport:
    controller: str
    seed: int
    source: ComputationFragment
    remapped: ComputationFragment
    redrive_differences: list
    one_response: bool
    verdict: ConsistencyVerdict
    exhaustive: ExhaustiveResult

    @property
    def contradiction(self) -> bool:
        return (not self.redrive_differences and self.one_response
                and self.verdict.overall == "inconsistent" and self.exhaustive.only_zero)

    def to_json(self) -> dict:
        return {
            "controller": self.controller,
            "seed": self.seed,
            "sourceTrace": [action_to_json(a) for a in self.source.trace],
            "remappedTrace": [action_to_json(a) for a in self.remapped.trace],
            "redrivePermitted": not self.redrive_differences,
            "redriveDifferences": self.redrive_differences,
            "clientResponseOne": self.one_response,
            "oracle": self.verdict.to_json(),
            "exhaustive": self.exhaustive.to_json(),
            "contradiction": self.contradiction,
        }

    def summary(self) -> str:
        lines = [
            f"controller: {self.controller} (seed {self.seed})",
            f"source trace: {len(self.source)} actions, mixed mode",
            f"remapped trace replays on the adversarial service: yes",
            f"controller permits remapped trace step for step: {'yes' if not self.redrive_differences else 'no'}",
            f"some client receives 1: {'yes' if self.one_response else 'no'}",
            f"oracle verdict on remapped trace: {self.verdict.overall}",
            f"atomic computations up to {self.exhaustive.max_actions} actions answer only 0: "
            f"{'yes' if self.exhaustive.only_zero else 'no'} ({self.exhaustive.states} states)",
            f"contradiction: {'yes' if self.contradiction else 'no'}",
        ]
        return "\n".join(lines)


def demonstrate(controller: Controller, scenario: Scenario, seeds: Iterable[int] = range(200),
                max_steps: int = 1000, max_actions: int = 30, exhaustive_size=(2, 2, 2),
                bound: int | None = None) -> ImpossibilityReport:
    """Search a mixed-mode run, relabel it and assemble the contradiction."""
    if not controller.oblivious:
        raise NotOblivious(f"{controller.name} consults payload semantics")
    system = MicroserviceSystem(scenario)
    counts = [len(s) for s in scenario.scripts]
    target = build_adversarial_system(len(counts), scenario.n_workers, counts, scenario.update_order)
    for seed in seeds:
        frag = run(system, controller, seed, max_steps)
        if not is_mixed_mode(frag.trace, system):
            continue
        remapped = value_remap(frag.trace)
        if not any(isinstance(a, Receive) and a.at.role == "client" and a.msg.payload == 1 for a in remapped):
            continue
        rfrag = fragment_from_trace(target, remapped)
        diffs = redrive(controller, system, frag.trace, target, remapped)
        verdict = check_by_oracle(target, rfrag, bound)
        nc, nw, nr = exhaustive_size
        exh = atomic_responses_exhaustive(build_adversarial_system(nc, nw, nr), max_actions)
        return ImpossibilityReport(controller.name, seed, frag, rfrag, diffs, True, verdict, exh)
    raise NoMixedModeFound(f"{controller.name} produced no usable mixed-mode run; consistent by avoidance")
