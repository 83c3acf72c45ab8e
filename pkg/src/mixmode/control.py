"""Update managers and shells.

A controller is consulted by :func:`mixmode.kernel.run` on every enabled
action.  Shells are modeled as interception hooks rather than as separate
processes: the manager's routing decision is the choice of destination
worker (and translation) for a client's send, request numbers and update
tags travel in message control metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

from .kernel import (DB, Action, GlobalState, Internal, Receive, Send,
                     UpdateAction, worker)
from .model import Annotations, MicroserviceSystem, extract_relays


class NoEligibleWorker(RuntimeError):
    pass


@dataclass(frozen=True)
class RoutingDecision:
    """One admissible way to route a request.

    ``kind`` is one of AssignOld, AssignNew, AssignTranslatedOld,
    AssignTranslatedNew or Defer.
    """

    kind: str
    worker: int | None = None
    translation: str | None = None
    reason: str = ""

    @property
    def version(self) -> int | None:
        if self.kind in ("AssignOld", "AssignTranslatedOld"):
            return 0
        if self.kind in ("AssignNew", "AssignTranslatedNew"):
            return 1
        return None


DEFER = RoutingDecision("Defer")


@dataclass
class ControllerState:
    algorithm: str
    system: MicroserviceSystem
    worker_version: dict
    client_tag: dict
    order: tuple
    next_update: int = 0
    next_request_number: int = 0
    db_notified_updating: bool = False
    pending_numbers: set = field(default_factory=set)
    history: list = field(default_factory=list)  # (kind, op): kind in new/B/F
    routing_log: list = field(default_factory=list)
    annotations: Annotations | None = None
    policy: str = "coin"

    @property
    def active(self) -> bool:
        return not all(self.worker_version.values())

    def snapshot(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "workerVersion": {f"w{k}": ("new" if v else "old") for k, v in sorted(self.worker_version.items())},
            "clientTag": {f"c{k}": ("updated" if v else "old") for k, v in sorted(self.client_tag.items())},
            "nextRequestNumber": self.next_request_number,
            "dbNotifiedUpdating": self.db_notified_updating,
            "history": len(self.history),
        }


@lru_cache(maxsize=64)
def annotations_for(system: MicroserviceSystem) -> Annotations:
    ann = Annotations(system)
    if system.scenario.annotation_mode == "verified":
        ann.check_translations()
    return ann


class Controller:
    name = "abstract"
    oblivious = False
    numbered = False
    drained_updates = True
    uses_annotations = False

    def __init__(self, policy: str | None = None):
        self.policy = policy

    def start(self, system: MicroserviceSystem) -> ControllerState:
        sc = system.scenario
        cs = ControllerState(
            algorithm=self.name,
            system=system,
            worker_version={w.index: v for w, v in zip(system.workers, system.worker_versions)},
            client_tag={c.index: False for c in system.clients},
            order=tuple(i for i in sc.order),
            db_notified_updating=self.numbered,
            policy=self.policy or sc.policy,
        )
        if self.uses_annotations:
            cs.annotations = annotations_for(system)
        self.last_state = cs
        return cs

    # -- routing -------------------------------------------------------------

    def options(self, cs: ControllerState, request, cidx: int) -> list[RoutingDecision]:
        raise NotImplementedError

    def _assign(self, cs, version: int, translation: str | None, reason: str) -> list[RoutingDecision]:
        out = []
        for w, v in sorted(cs.worker_version.items()):
            if v != version:
                continue
            if translation is None:
                kind = "AssignNew" if v else "AssignOld"
            else:
                kind = "AssignTranslatedNew" if v else "AssignTranslatedOld"
            out.append(RoutingDecision(kind, w, translation, reason))
        return out

    def _any(self, cs, reason: str) -> list[RoutingDecision]:
        return self._assign(cs, 0, None, reason) + self._assign(cs, 1, None, reason)

    def admissible(self, cs: ControllerState, request, cidx: int) -> list[RoutingDecision]:
        if not cs.active:
            opts = self._any(cs, "update complete")
        else:
            opts = self.options(cs, request, cidx)
        if cs.policy == "prefer-old" and any(o.version == 0 for o in opts):
            opts = [o for o in opts if o.version == 0]
        elif cs.policy == "prefer-new" and any(o.version == 1 for o in opts):
            opts = [o for o in opts if o.version == 1]
        return opts

    def _old_op(self, cs, request, cidx):
        return cs.system.semantics.op(0, cs.system.scenario.client_ids[cidx], request)

    def _batch(self, cs, version, seq, cidx):
        name = cs.system.scenario.client_ids[cidx]
        return ("batch", tuple(cs.system.semantics.op(version, name, r) for r in seq))

    def _left_commutes_all(self, cs, op, kinds: Iterable[str]) -> bool:
        kinds = set(kinds)
        return all(cs.annotations.left_commutes(op, h) for k, h in cs.history if k in kinds)

    # -- controller protocol -------------------------------------------------

    def _decision_for(self, cs, action: Send) -> RoutingDecision | None:
        x = action.msg.ctl("x")
        for o in self.admissible(cs, action.msg.payload, action.src.index):
            if o.worker == action.dst.index and o.translation == x:
                return o
        return None

    def permit(self, cs: ControllerState, action: Action, gstate: GlobalState) -> bool:
        sys = cs.system
        if isinstance(action, Internal):
            return True
        if isinstance(action, UpdateAction):
            if cs.next_update >= len(cs.order) or action.at.index != cs.order[cs.next_update]:
                return False
            if self.drained_updates:
                return all(not sys.channel(gstate, c, action.at) for c in sys.clients)
            return True
        if isinstance(action, Send):
            if action.src.role == "client":
                return self._decision_for(cs, action) is not None
            return True
        if not self.numbered:
            return True
        if action.at == DB:
            return bool(cs.pending_numbers) and action.msg.ctl("no") == min(cs.pending_numbers)
        if action.at.role == "worker" and action.src.role == "client":
            heads = [sys.channel(gstate, c, action.at) for c in sys.clients]
            nos = [h[0].ctl("no") for h in heads if h]
            return action.msg.ctl("no") == min(nos)
        return True

    def stamp(self, cs: ControllerState, action: Action) -> Action:
        if self.numbered and isinstance(action, Send) and action.src.role == "client":
            return Send(action.src, action.dst, action.msg.with_control(no=cs.next_request_number))
        return action

    def observe(self, cs: ControllerState, action: Action) -> None:
        if isinstance(action, UpdateAction):
            cs.worker_version[action.at.index] = 1
            cs.next_update += 1
            return
        if isinstance(action, Send) and action.src.role == "client":
            d = self._decision_for(cs, Send(action.src, action.dst, action.msg.unstamped()))
            no = action.msg.ctl("no")
            if self.numbered:
                cs.pending_numbers.add(no)
                cs.next_request_number += 1
            if self.uses_annotations and d is not None:
                sys = cs.system
                name = sys.scenario.client_ids[action.src.index]
                r = action.msg.payload
                if d.kind == "AssignNew":
                    cs.history.append(("new", sys.semantics.op(1, name, r)))
                elif d.kind == "AssignTranslatedNew":
                    cs.history.append(("B", self._batch(cs, 1, sys.translations.backward(r), action.src.index)))
                elif d.kind == "AssignTranslatedOld":
                    cs.history.append(("F", self._batch(cs, 0, sys.translations.forward(r), action.src.index)))
            cs.routing_log.append({"reqNo": no, "client": str(action.src),
                                   "decision": d.kind if d else "Unlisted",
                                   "worker": str(action.dst), "reason": d.reason if d else ""})
            return
        if isinstance(action, Receive):
            if action.at == DB and self.numbered:
                cs.pending_numbers.discard(action.msg.ctl("no"))
            elif action.at.role == "client" and action.msg.ctl("upd"):
                cs.client_tag[action.at.index] = True


class Uncontrolled(Controller):
    """Rolling update with no request control: any worker, any time it idles."""

    name = "uncontrolled"
    oblivious = True
    drained_updates = False

    def options(self, cs, request, cidx):
        return self._any(cs, "uncontrolled")


class Ordered(Controller):
    name = "ordered"
    oblivious = True

    def options(self, cs, request, cidx):
        if cs.client_tag[cidx]:
            return self._assign(cs, 1, None, "updated client")
        return self._any(cs, "non-updated client")


class Commutativity(Controller):
    name = "comm"
    numbered = True
    uses_annotations = True

    def options(self, cs, request, cidx):
        if cs.client_tag[cidx]:
            return self._assign(cs, 1, None, "updated client")
        if self._left_commutes_all(cs, self._old_op(cs, request, cidx), {"new"}):
            return self._any(cs, "left-commutes over prior new-version transactions")
        return self._assign(cs, 1, None, "does not left-commute")


class BackwardsCompat(Controller):
    name = "bcompat"
    uses_annotations = True

    def options(self, cs, request, cidx):
        if cs.client_tag[cidx]:
            return self._assign(cs, 1, None, "updated client")
        if cs.system.translations.backward(request) is not None:
            return (self._assign(cs, 1, "B", "backwards-compatible")
                    + self._assign(cs, 0, None, "backwards-compatible"))
        return self._assign(cs, 0, None, "not backwards-compatible")


class ForwardsCompat(Controller):
    name = "fcompat"
    uses_annotations = True

    def options(self, cs, request, cidx):
        if cs.client_tag[cidx]:
            return self._assign(cs, 1, None, "updated client")
        if cs.system.translations.forward(request) is not None:
            return (self._assign(cs, 0, "F", "forwards-compatible")
                    + self._assign(cs, 1, None, "forwards-compatible"))
        return self._assign(cs, 1, None, "not forwards-compatible")


class CommForwards(Controller):
    name = "comm-f"
    numbered = True
    uses_annotations = True

    def options(self, cs, request, cidx):
        if cs.client_tag[cidx]:
            return self._assign(cs, 1, None, "updated client")
        if cs.system.translations.forward(request) is not None:
            return (self._assign(cs, 0, "F", "forwards-compatible")
                    + self._assign(cs, 1, None, "forwards-compatible"))
        if self._left_commutes_all(cs, self._old_op(cs, request, cidx), {"new", "F"}):
            return self._any(cs, "left-commutes over new-version requests and translations")
        return self._assign(cs, 1, None, "neither compatible nor left-commuting")


class CommBackwards(Controller):
    name = "comm-b"
    numbered = True
    uses_annotations = True

    def options(self, cs, request, cidx):
        if cs.client_tag[cidx]:
            return self._assign(cs, 1, None, "updated client")
        if self._left_commutes_all(cs, self._old_op(cs, request, cidx), {"new"}):
            return self._any(cs, "left-commutes over untranslated new-version requests")
        seq = cs.system.translations.backward(request)
        if seq is not None and self._left_commutes_all(cs, self._batch(cs, 1, seq, cidx), {"new", "B"}):
            return (self._assign(cs, 1, "B", "translation left-commutes")
                    + self._assign(cs, 1, None, "translation left-commutes"))
        return self._assign(cs, 1, None, "no commuting option")


CONTROLLERS = {cls.name: cls for cls in (Uncontrolled, Ordered, Commutativity, BackwardsCompat,
                                           ForwardsCompat, CommForwards, CommBackwards)}


def controller_for(name: str, policy: str | None = None) -> Controller:
    try:
        return CONTROLLERS[name](policy)
    except KeyError:
        raise ValueError(f"unknown algorithm {name!r}; expected one of {', '.join(CONTROLLERS)}") from None


def route_request(controller: Controller, cs: ControllerState, request, cidx: int,
                  rng=None) -> RoutingDecision:
    """Pick one admissible routing for ``request`` from client ``cidx``.

    Without ``rng`` the first admissible option is taken.  Defer means the
    required worker version does not exist yet.
    """
    opts = controller.admissible(cs, request, cidx)
    if not opts:
        if not any(v == 0 for v in cs.worker_version.values()) and not cs.active:
            raise NoEligibleWorker("no live worker")
        return DEFER
    return rng.choice(opts) if rng is not None else opts[0]


def db_admission(cs: ControllerState, pending: Sequence[int | None]) -> int | None:
    """Index into ``pending`` of the op to admit, or None to defer.

    ``pending`` lists the request numbers of ops at the database's channel
    heads (None for unnumbered).
    """
    if not cs.db_notified_updating:
        return 0 if pending else None
    if not cs.pending_numbers:
        return None
    want = min(cs.pending_numbers)
    for i, no in enumerate(pending):
        if no == want:
            return i
    return None


# -- trace predicates ----------------------------------------------------------

def _initial_versions(system):
    if system is not None:
        return {w.index: v for w, v in zip(system.workers, system.worker_versions)}
    return {}


def is_mixed_mode(trace: Sequence[Action], system: MicroserviceSystem | None = None) -> bool:
    """Some updated worker's db op precedes a non-updated worker's db op."""
    ver = _initial_versions(system)
    seen_new = False
    for a in trace:
        if isinstance(a, UpdateAction):
            ver[a.at.index] = 1
        elif isinstance(a, Send) and a.dst == DB:
            if ver.get(a.src.index, 0):
                seen_new = True
            elif seen_new:
                return True
    return False


def relay_colors(trace: Sequence[Action], system=None, observed: bool = False) -> dict:
    rp = extract_relays(trace, system)
    per: dict = {}
    for r in rp.complete:
        if observed:
            rsp = trace_action(trace, r.worker_send_rsp)
            color = "blue" if rsp.msg.ctl("upd") else "red"
        else:
            color = r.color
        per.setdefault(r.client, []).append((r.relay_id[1], color))
    return {c: [col for _, col in sorted(v)] for c, v in per.items()}


def trace_action(trace: Sequence[Action], aid) -> Action:
    p, seq = aid
    k = -1
    for a in trace:
        if a.proc == p:
            k += 1
            if k == seq:
                return a
    raise IndexError(aid)


def is_ordered(trace: Sequence[Action], system=None, observed: bool = False) -> bool:
    """Per client, relay colors read red* blue*.

    With ``observed`` the color is what the client can see (the update tag);
    translated relays then count as the version they imitate.
    """
    for cols in relay_colors(trace, system, observed).values():
        if "blue" in cols and "red" in cols[cols.index("blue"):]:
            return False
    return True


def is_quiescent(trace: Sequence[Action]) -> bool:
    busy: dict = {}
    for a in trace:
        if isinstance(a, Receive) and a.at.role == "worker" and a.src.role == "client":
            busy[a.at] = True
        elif isinstance(a, Send) and a.src.role == "worker" and a.dst.role == "client":
            busy[a.src] = False
        elif isinstance(a, UpdateAction) and busy.get(a.at):
            return False
    return True


def is_atomic(trace: Sequence[Action]) -> bool:
    idx = [i for i, a in enumerate(trace) if isinstance(a, UpdateAction)]
    return not idx or idx[-1] - idx[0] + 1 == len(idx)
