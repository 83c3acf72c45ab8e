"""Deciding update consistency of concrete fragments.

The oracle searches controller-free computations of the same system in
which every worker update happens in one contiguous block, looking for one
that a given client cannot tell apart from the observed fragment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any

from .causality import induce_po
from .kernel import (DB, Action, ComputationFragment, GlobalState, Internal,
                     Receive, Send, UpdateAction, fragment_from_trace,
                     project_client_messages, successors)
from .model import MicroserviceSystem, client_equivalent

DEFAULT_BOUND = 2_000_000

PRE, BLOCK, POST = 0, 1, 2


def default_bound() -> int:
    env = os.environ.get("MIXMODE_BOUND")
    return int(env) if env else DEFAULT_BOUND


@dataclass
class ClientVerdict:
    status: str  # ConsistentVia, Inconsistent, Unknown
    witness: Any = None
    states: int = 0
    reason: str = ""
    alarm: bool = False

    def to_json(self) -> dict:
        from .kernel import action_to_json
        d = {"status": self.status, "states": self.states}
        if self.reason:
            d["reason"] = self.reason
        if self.alarm:
            d["alarm"] = True
        if isinstance(self.witness, list):
            d["witness"] = [action_to_json(a) for a in self.witness]
        elif hasattr(self.witness, "to_json"):
            d["witness"] = self.witness.to_json()
        return d


@dataclass
class ConsistencyVerdict:
    per_client: dict = field(default_factory=dict)

    @property
    def overall(self) -> str:
        st = [v.status for v in self.per_client.values()]
        if all(s == "ConsistentVia" for s in st):
            return "consistent"
        if "Inconsistent" in st:
            return "inconsistent"
        return "unknown"

    @property
    def consistent(self) -> bool:
        return self.overall == "consistent"

    def to_json(self) -> dict:
        return {"overall": self.overall,
                "perClient": {str(c): v.to_json() for c, v in sorted(self.per_client.items())}}


class _BoundHit(Exception):
    pass


# Non-client, non-update actions that are the only move of their process and
# commute with everything else; exploring one of them alone loses no witness.
def _is_ample(a: Action) -> bool:
    if isinstance(a, Internal):
        return a.at == DB
    if isinstance(a, Send):
        return a.src.role in ("worker", "database")
    if isinstance(a, Receive):
        return a.at.role == "worker" and a.src == DB
    return False


def _plain_send(a: Action) -> bool:
    return not (isinstance(a, Send) and a.src.role == "client" and a.msg.control)


def search_witness(system: MicroserviceSystem, fragment: ComputationFragment, c, bound: int,
                   por: bool = True):
    """Depth-first search for an atomic-update computation c-equivalent to
    ``fragment``.  Returns (trace or None, states visited); raises _BoundHit."""
    target = fragment.end
    proj = project_client_messages(fragment.trace, c)
    n_workers = len(system.workers)
    visited: set = set()
    start = fragment.start
    path: list = []

    def updated_count(state):
        return sum(1 for w in system.workers if system.local(state, w)[0] == 1)

    init_phase = PRE if updated_count(start) < n_workers else POST
    if init_phase == POST and updated_count(start) != n_workers:
        return None, 0
    stack = [(start, 0, init_phase, None)]
    # iterative DFS; entries hold an iterator over successors after expansion
    frames = []

    def expand(state, pos, phase):
        succ = successors(system, state)
        out = []
        for a, s2 in succ:
            if not _plain_send(a):
                continue
            if isinstance(a, UpdateAction):
                if phase == POST:
                    continue
                # starting the block needs every worker idle
                if phase == PRE and any(system.local(state, w)[1] != 0 for w in system.workers):
                    continue
                nphase = POST if updated_count(s2) == n_workers else BLOCK
                out.append((a, s2, pos, nphase))
                continue
            if phase == BLOCK:
                continue
            if a.proc == c:
                if pos >= len(proj):
                    continue
                kind = "send" if isinstance(a, Send) else "recv"
                if (kind, a.msg.payload) != proj[pos]:
                    continue
                out.append((a, s2, pos + 1, phase))
            else:
                out.append((a, s2, pos, phase))
        if por and phase != BLOCK:
            for item in out:
                if _is_ample(item[0]):
                    return [item]
        return out

    key0 = (start, 0, init_phase)
    visited.add(key0)
    if start == target and not proj and init_phase == POST:
        return [], 1
    frames.append(iter(expand(start, 0, init_phase)))
    while frames:
        nxt = next(frames[-1], None)
        if nxt is None:
            frames.pop()
            if path:
                path.pop()
            continue
        a, s2, pos, phase = nxt
        key = (s2, pos, phase)
        if key in visited:
            continue
        visited.add(key)
        if len(visited) > bound:
            raise _BoundHit(len(visited))
        path.append(a)
        if phase == POST and pos == len(proj) and s2 == target:
            return list(path), len(visited)
        frames.append(iter(expand(s2, pos, phase)))
    return None, len(visited)


def check_by_oracle(system: MicroserviceSystem, fragment: ComputationFragment,
                    bound: int | None = None, clients=None, por: bool = True) -> ConsistencyVerdict:
    bound = default_bound() if bound is None else bound
    verdict = ConsistencyVerdict()
    for c in (clients if clients is not None else system.clients):
        try:
            witness, n = search_witness(system, fragment, c, bound, por)
        except _BoundHit as e:
            verdict.per_client[c] = ClientVerdict("Unknown", states=e.args[0], reason="bound exhausted")
            continue
        if witness is None:
            verdict.per_client[c] = ClientVerdict("Inconsistent", find_violation(fragment, only=c), n)
        else:
            verdict.per_client[c] = ClientVerdict("ConsistentVia", witness, n)
    return verdict


def witness_is_sound(system, fragment: ComputationFragment, c, witness: list) -> bool:
    """The witness replays, has one contiguous update block and is c-equivalent."""
    try:
        wf = fragment_from_trace(system, witness, fragment.start)
    except Exception:
        return False
    ups = [i for i, a in enumerate(witness) if isinstance(a, UpdateAction)]
    if ups and ups[-1] - ups[0] + 1 != len(ups):
        return False
    return client_equivalent(fragment, wf, c)


def check_by_rewrite(fragment: ComputationFragment, algorithm: str,
                     annotations=None) -> ConsistencyVerdict:
    from .rewrite import rewrite_to_atomic
    po = induce_po(fragment)
    verdict = ConsistencyVerdict()
    for c in fragment.system.clients:
        rep = rewrite_to_atomic(po, c, algorithm, annotations)
        if rep.outcome == "AtomicReached":
            verdict.per_client[c] = ClientVerdict("ConsistentVia", rep, len(rep.steps))
        else:
            verdict.per_client[c] = ClientVerdict("Unknown", rep, len(rep.steps), reason=rep.reason,
                                                  alarm=True)
    return verdict


@dataclass(frozen=True)
class Violation:
    client: Any
    earlier: tuple  # (index in projection, payload)
    later: tuple

    def to_json(self) -> dict:
        from .kernel import _thaw
        return {"client": str(self.client),
                "earlier": {"index": self.earlier[0], "payload": _thaw(self.earlier[1])},
                "later": {"index": self.later[0], "payload": _thaw(self.later[1])}}


def find_violation(fragment: ComputationFragment, only=None) -> Violation | None:
    """A client observation of new behavior strictly before an old one."""
    system = fragment.system
    sem = system.semantics
    for c in system.clients:
        if only is not None and c != only:
            continue
        first_new = None
        for i, (kind, payload) in enumerate(project_client_messages(fragment.trace, c)):
            if kind != "recv":
                continue
            cls = sem.classify(payload)
            if cls == "new" and first_new is None:
                first_new = (i, payload)
            elif cls == "old" and first_new is not None:
                return Violation(c, first_new, (i, payload))
    return None
