"""Scalable-microservice systems: clients, interchangeable workers, one database.

Scenarios are plain JSON-compatible configurations; :func:`build_system`
turns one into a :class:`MicroserviceSystem` whose workers carry both
instruction versions behind an ``updated`` bit.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Sequence

from .kernel import (DB, Action, ComputationFragment, GlobalState, Internal,
                     Message, ProcessId, Receive, Send, System, UpdateAction,
                     client, worker)
from .semantics import Semantics, semantics_for

ALGORITHMS = ("uncontrolled", "ordered", "comm", "bcompat", "fcompat", "comm-f", "comm-b")
POLICIES = ("coin", "prefer-old", "prefer-new")


class InvalidScenario(ValueError):
    def __init__(self, problems: Sequence[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class MalformedTrace(ValueError):
    pass


class IncompleteRelay(ValueError):
    pass


class BoundExceeded(RuntimeError):
    pass


def freeze(v):
    if isinstance(v, list):
        return tuple(freeze(x) for x in v)
    if isinstance(v, dict):
        return {k: freeze(x) for k, x in v.items()}
    return v


def thaw(v):
    if isinstance(v, tuple):
        return [thaw(x) for x in v]
    if isinstance(v, dict):
        return {k: thaw(x) for k, x in v.items()}
    return v


@dataclass(frozen=True)
class Scenario:
    name: str
    client_ids: tuple[str, ...]
    scripts: tuple[tuple, ...]
    n_workers: int
    db_kind: str
    db_initial: Any = None
    annotation_mode: str = "verified"
    left_commutes: Any = "builtin"
    backward: Any = "builtin"
    forward: Any = "builtin"
    algorithm: str = "uncontrolled"
    update_order: tuple[int, ...] | None = None
    policy: str = "coin"

    @classmethod
    def from_json(cls, data: dict) -> "Scenario":
        problems = []
        try:
            clients = data["clients"]
            ids = tuple(str(c["id"]) for c in clients)
            scripts = tuple(tuple(freeze(r) for r in c["script"]) for c in clients)
        except (KeyError, TypeError):
            raise InvalidScenario("clients: expected a list of {id, script}") from None
        workers = data.get("workers", {})
        n = workers.get("count") if isinstance(workers, dict) else None
        db = data.get("db", {})
        ann = data.get("annotations", {})
        upd = data.get("update", {})
        if not isinstance(n, int):
            problems.append("workers.count: expected an integer")
            n = 0
        order = upd.get("order")
        sc = cls(
            name=str(data.get("name", "scenario")),
            client_ids=ids,
            scripts=scripts,
            n_workers=n,
            db_kind=db.get("kind", "noop"),
            db_initial=freeze(db.get("initial")),
            annotation_mode=ann.get("mode", "verified"),
            left_commutes=freeze(ann.get("leftCommutes", "builtin")),
            backward=freeze(ann.get("B", "builtin")),
            forward=freeze(ann.get("F", "builtin")),
            algorithm=upd.get("algorithm", "uncontrolled"),
            update_order=tuple(order) if order is not None else None,
            policy=upd.get("policy", "coin"),
        )
        sc.validate(problems)
        return sc

    def to_json(self) -> dict:
        out = {
            "v": 1,
            "name": self.name,
            "clients": [{"id": i, "script": thaw(s)} for i, s in zip(self.client_ids, self.scripts)],
            "workers": {"count": self.n_workers},
            "db": {"kind": self.db_kind, "initial": thaw(self.db_initial)},
            "annotations": {"mode": self.annotation_mode, "leftCommutes": thaw(self.left_commutes),
                            "B": thaw(self.backward), "F": thaw(self.forward)},
            "update": {"algorithm": self.algorithm, "policy": self.policy,
                       "order": list(self.update_order) if self.update_order is not None else None},
        }
        return out

    def with_(self, **kw) -> "Scenario":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return Scenario(**d)

    def validate(self, problems: list[str] | None = None) -> None:
        problems = [] if problems is None else problems
        if self.n_workers < 1:
            problems.append("workers.count: need at least one worker")
        if not self.client_ids:
            problems.append("clients: need at least one client")
        if len(set(self.client_ids)) != len(self.client_ids):
            problems.append("clients: duplicate ids")
        try:
            sem = semantics_for(self.db_kind)
        except ValueError as e:
            problems.append(f"db.kind: {e}")
            sem = None
        if sem is not None:
            for cid, script in zip(self.client_ids, self.scripts):
                for k, r in enumerate(script):
                    if not sem.valid_request(r):
                        problems.append(f"clients[{cid}].script[{k}]: not a {self.db_kind} request: {r!r}")
        if self.annotation_mode not in ("declared", "verified"):
            problems.append("annotations.mode: expected declared or verified")
        if self.algorithm not in ALGORITHMS:
            problems.append(f"update.algorithm: expected one of {', '.join(ALGORITHMS)}")
        if self.policy not in POLICIES:
            problems.append(f"update.policy: expected one of {', '.join(POLICIES)}")
        if self.update_order is not None and sorted(self.update_order) != list(range(self.n_workers)):
            problems.append("update.order: must be a permutation of worker indices")
        for key, val in (("B", self.backward), ("F", self.forward)):
            if val not in ("builtin", "none") and not isinstance(val, tuple):
                problems.append(f"annotations.{key}: expected builtin, none or a list of [request, [requests]]")
        if problems:
            raise InvalidScenario(problems)

    @property
    def order(self) -> tuple[int, ...]:
        return self.update_order if self.update_order is not None else tuple(range(self.n_workers))


# -- process transition systems ------------------------------------------------

IDLE = -1


class ClientLts:
    """Local state ``(next request index, worker awaited or -1)``."""

    def __init__(self, me: ProcessId, script: tuple, n_workers: int, translations):
        self.me = me
        self.script = script
        self.n_workers = n_workers
        self.initial = (0, IDLE)
        self._options = []
        for r in script:
            opts = [()]
            if translations.backward(r) is not None:
                opts.append((("x", "B"),))
            if translations.forward(r) is not None:
                opts.append((("x", "F"),))
            self._options.append(opts)

    def moves(self, local):
        idx, waiting = local
        if waiting != IDLE or idx >= len(self.script):
            return ()
        r = self.script[idx]
        return [(Send(self.me, worker(w), Message(r, ctl)), (idx, w))
                for w in range(self.n_workers) for ctl in self._options[idx]]

    def accept(self, local, src, msg):
        idx, waiting = local
        if waiting != IDLE and src == worker(waiting):
            return (idx + 1, IDLE)
        return None


class WorkerLts:
    """Local state ``(version, phase, client, request message, result)``.

    Phase 0 waits for a request, 1 must send the database op, 2 waits for the
    result, 3 must respond.  Scratch fields reset when the relay ends.
    """

    def __init__(self, me: ProcessId, system: "MicroserviceSystem", version: int = 0):
        self.me = me
        self.sys = system
        self.initial = (version, 0, IDLE, None, None)

    def db_op(self, version: int, cidx: int, msg: Message):
        sys = self.sys
        name = sys.scenario.client_ids[cidx]
        x = msg.ctl("x")
        if x is None:
            return sys.semantics.op(version, name, msg.payload)
        seq = sys.translations.backward(msg.payload) if x == "B" else sys.translations.forward(msg.payload)
        return ("batch", tuple(sys.semantics.op(version, name, r) for r in seq))

    def moves(self, local):
        ver, phase, cidx, req, res = local
        if phase == 0:
            return [(UpdateAction(self.me), (1, 0, IDLE, None, None))] if ver == 0 else ()
        if phase == 1:
            ctl = tuple(kv for kv in req.control if kv[0] in ("no", "x"))
            op = Message(self.db_op(ver, cidx, req), ctl)
            return [(Send(self.me, DB, op), (ver, 2, cidx, req, None))]
        if phase == 3:
            x = req.ctl("x")
            looks_new = (ver == 1 and x != "B") or (ver == 0 and x == "F")
            ctl = (("upd", 1),) if looks_new else ()
            return [(Send(self.me, client(cidx), Message(res, ctl)), (ver, 0, IDLE, None, None))]
        return ()

    def accept(self, local, src, msg):
        ver, phase, cidx, req, res = local
        if phase == 0 and src.role == "client":
            return (ver, 1, src.index, msg, None)
        if phase == 2 and src == DB:
            return (ver, 3, cidx, req, msg.payload)
        return None


class DatabaseLts:
    """Local state ``(phase, store, worker, pending)``; transactions are atomic."""

    def __init__(self, semantics: Semantics, store):
        self.sem = semantics
        self.initial = (0, store, IDLE, None)

    def moves(self, local):
        phase, store, w, pending = local
        if phase == 1:
            new_store, result = self.sem.apply(store, pending.payload, w)
            return [(Internal(DB, "apply"), (2, new_store, w, result))]
        if phase == 2:
            return [(Send(DB, worker(w), Message(pending)), (0, store, IDLE, None))]
        return ()

    def accept(self, local, src, msg):
        phase, store, w, pending = local
        if phase == 0 and src.role == "worker":
            return (1, store, src.index, msg)
        return None


class Translations:
    """Backward/forward translation maps resolved from annotations."""

    def __init__(self, scenario: Scenario, semantics: Semantics):
        self.sem = semantics
        self._b = self._resolve(scenario.backward, semantics.backward)
        self._f = self._resolve(scenario.forward, semantics.forward)

    @staticmethod
    def _resolve(spec, builtin):
        if spec == "builtin":
            return builtin
        if spec == "none":
            return lambda r: None
        table = {freeze(k): tuple(freeze(x) for x in v) for k, v in spec}
        return table.get

    def backward(self, request):
        return self._b(request)

    def forward(self, request):
        return self._f(request)


class MicroserviceSystem(System):
    def __init__(self, scenario: Scenario, extra_workers: Sequence[int] = ()):
        """``extra_workers`` lists initial versions of virtual workers appended
        after the scenario's workers; rewrites use them as fresh workers."""
        self.scenario = scenario
        self.semantics = semantics_for(scenario.db_kind)
        self.translations = Translations(scenario, self.semantics)
        self.worker_versions = (0,) * scenario.n_workers + tuple(extra_workers)
        self.n_clients = len(scenario.client_ids)
        self.n_workers = len(self.worker_versions)
        self.clients = tuple(client(i) for i in range(self.n_clients))
        self.workers = tuple(worker(i) for i in range(self.n_workers))
        self.real_workers = self.workers[:scenario.n_workers]
        self.procs = self.clients + self.workers + (DB,)
        self.channels = (tuple((c, w) for c in self.clients for w in self.workers)
                         + tuple((w, DB) for w in self.workers)
                         + tuple((DB, w) for w in self.workers)
                         + tuple((w, c) for w in self.workers for c in self.clients))
        self._index()

    def lts_for(self, p: ProcessId):
        if p.role == "client":
            return ClientLts(p, self.scenario.scripts[p.index], self.n_workers, self.translations)
        if p.role == "worker":
            return WorkerLts(p, self, self.worker_versions[p.index])
        return DatabaseLts(self.semantics, self.semantics.initial(self.scenario.db_initial))

    def extended(self, versions: Sequence[int]) -> "MicroserviceSystem":
        return MicroserviceSystem(self.scenario, self.worker_versions[self.scenario.n_workers:] + tuple(versions))

    def is_complete(self, state: GlobalState) -> bool:
        for c in self.clients:
            idx, waiting = self.local(state, c)
            if waiting != IDLE or idx < len(self.scenario.scripts[c.index]):
                return False
        for w in self.workers:
            ver, phase, *_ = self.local(state, w)
            if ver != 1 or phase != 0:
                return False
        return self.local(state, DB)[0] == 0 and state.drained()

    def updated(self, state: GlobalState, w: ProcessId) -> bool:
        return self.local(state, w)[0] == 1

    def client_name(self, c: ProcessId) -> str:
        return self.scenario.client_ids[c.index]

    def signature(self):
        return (self.procs, self.channels, self.worker_versions,
                json.dumps(self.scenario.to_json(), sort_keys=True))

    def __eq__(self, other):
        return isinstance(other, MicroserviceSystem) and self.signature() == other.signature()

    def __hash__(self):
        return hash(self.signature())


def build_system(scenario: Scenario | dict) -> MicroserviceSystem:
    if isinstance(scenario, dict):
        scenario = Scenario.from_json(scenario)
    scenario.validate()
    return MicroserviceSystem(scenario)


# -- relays ---------------------------------------------------------------------

ActionId = tuple  # (ProcessId, seq)


@dataclass(frozen=True)
class DbTransaction:
    relay_id: tuple
    actions: tuple
    op: Any
    result: Any
    color: str


@dataclass
class Relay:
    relay_id: tuple  # (client index, request index)
    client: ProcessId
    worker: ProcessId | None = None
    client_send: ActionId | None = None
    worker_recv: ActionId | None = None
    worker_send_op: ActionId | None = None
    db_actions: list = field(default_factory=list)
    worker_recv_res: ActionId | None = None
    worker_send_rsp: ActionId | None = None
    client_recv: ActionId | None = None
    color: str = "neutral"
    request: Any = None
    translated: str | None = None
    op: Any = None
    result: Any = None

    @property
    def complete(self) -> bool:
        return self.client_recv is not None and len(self.db_actions) >= 2

    @property
    def actions(self) -> tuple:
        seq = [self.client_send, self.worker_recv, self.worker_send_op, *self.db_actions,
               self.worker_recv_res, self.worker_send_rsp, self.client_recv]
        return tuple(a for a in seq if a is not None)

    @property
    def db_start(self) -> int | None:
        return self.db_actions[0][1] if self.db_actions else None


@dataclass
class RelayPartition:
    complete: list
    incomplete: list
    by_action: dict

    def __iter__(self):
        return iter(self.complete + self.incomplete)

    def all(self) -> list:
        return sorted(self.complete + self.incomplete, key=lambda r: r.relay_id)


def timelines_of(trace: Iterable[Action], procs: Iterable[ProcessId] = ()) -> dict:
    tl = {p: [] for p in procs}
    for a in trace:
        tl.setdefault(a.proc, []).append(a)
    return tl


def relays_from_timelines(timelines: dict, worker_versions: Sequence[int] | None = None) -> RelayPartition:
    """Partition per-process action sequences into relays.

    Message pairing uses channel order: the k-th send on a channel matches
    the k-th receive.  Update actions stay outside every relay.
    """
    sends: dict = {}
    for p, acts in timelines.items():
        for i, a in enumerate(acts):
            if isinstance(a, Send):
                sends.setdefault((a.src, a.dst), []).append((p, i))
    recv_count: dict = {}

    def partner(a: Receive):
        ch = (a.src, a.at)
        k = recv_count.get(ch, 0)
        recv_count[ch] = k + 1
        lst = sends.get(ch, [])
        if k >= len(lst):
            raise MalformedTrace(f"receive on {a.src}->{a.at} without matching send")
        return lst[k]

    relays: dict = {}
    by_action: dict = {}
    # clients define relay identity
    for p, acts in timelines.items():
        if p.role != "client":
            continue
        k = 0
        for i, a in enumerate(acts):
            if isinstance(a, Send):
                r = Relay((p.index, k), p, worker=a.dst, client_send=(p, i), request=a.msg.payload,
                          translated=a.msg.ctl("x"))
                relays[r.relay_id] = r
                by_action[(p, i)] = r
                k += 1
    # pair receives in a fixed process order so channel counters stay consistent
    partners: dict = {}
    for p in sorted(timelines):
        for i, a in enumerate(timelines[p]):
            if isinstance(a, Receive):
                partners[(p, i)] = partner(a)
    for p in sorted(timelines):
        if p.role != "worker":
            continue
        version = worker_versions[p.index] if worker_versions is not None and p.index < len(worker_versions) else 0
        current = None
        for i, a in enumerate(timelines[p]):
            aid = (p, i)
            if isinstance(a, UpdateAction):
                version = 1
                continue
            if isinstance(a, Receive) and a.src.role == "client":
                current = by_action.get(partners[aid])
                if current is None:
                    raise MalformedTrace(f"{p} received a request that no client sent")
                current.worker_recv = aid
                current.color = "blue" if version else "red"
            elif current is None:
                raise MalformedTrace(f"{p} acted outside a relay at seq {i}")
            elif isinstance(a, Send) and a.dst == DB:
                current.worker_send_op = aid
                current.op = a.msg.payload
            elif isinstance(a, Receive) and a.src == DB:
                current.worker_recv_res = aid
            elif isinstance(a, Send) and a.dst.role == "client":
                current.worker_send_rsp = aid
                by_action[aid] = current
                current = None
                continue
            else:
                raise MalformedTrace(f"unexpected worker action {a}")
            by_action[aid] = current
    op_owner = {}
    for r in relays.values():
        if r.worker_send_op is not None:
            op_owner[r.worker_send_op] = r
    current = None
    for i, a in enumerate(timelines.get(DB, [])):
        aid = (DB, i)
        if isinstance(a, Receive):
            current = op_owner.get(partners[aid])
            if current is None:
                raise MalformedTrace("database received an op no worker sent")
        if current is None:
            raise MalformedTrace(f"database acted outside a transaction at seq {i}")
        current.db_actions.append(aid)
        by_action[aid] = current
        if isinstance(a, Send):
            current.result = a.msg.payload
            current = None
    for p, acts in timelines.items():
        if p.role != "client":
            continue
        for i, a in enumerate(acts):
            if isinstance(a, Receive):
                rsp = partners[(p, i)]
                r = by_action.get(rsp)
                if r is None:
                    raise MalformedTrace(f"{p} received a response outside any relay")
                r.client_recv = (p, i)
                by_action[(p, i)] = r
    complete = sorted((r for r in relays.values() if r.complete), key=lambda r: r.relay_id)
    incomplete = sorted((r for r in relays.values() if not r.complete), key=lambda r: r.relay_id)
    for r in incomplete:
        if r.worker_recv is None:
            r.color = "neutral"
    return RelayPartition(complete, incomplete, by_action)


def extract_relays(trace: Iterable[Action], system: MicroserviceSystem | None = None) -> RelayPartition:
    versions = system.worker_versions if system is not None else None
    return relays_from_timelines(timelines_of(trace), versions)


def db_transaction(relay: Relay) -> DbTransaction:
    if not relay.complete:
        raise IncompleteRelay(f"relay {relay.relay_id} is incomplete")
    return DbTransaction(relay.relay_id, tuple(relay.db_actions), relay.op, relay.result, relay.color)


# -- equivalence ------------------------------------------------------------------

def state_view(system: System, state: GlobalState, procs: Iterable[ProcessId]) -> tuple:
    keep = set(procs)
    locs = tuple((p, l) for p, l in zip(system.procs, state.locals) if p in keep)
    chans = tuple((ch, c) for ch, c in zip(system.channels, state.chans)
                  if c or (ch[0] in keep and ch[1] in keep))
    return locs, tuple(x for x in chans if x[1])


def client_equivalent(frag_a: ComputationFragment, frag_b: ComputationFragment, c: ProcessId,
                      procs: Iterable[ProcessId] | None = None) -> bool:
    """Same start state, same (c, M)-projection and same end state.

    ``procs`` restricts the state comparison, which lets a fragment over a
    system with virtual rewrite workers be compared with the original.
    """
    from .kernel import project_client_messages
    if procs is None:
        procs = [p for p in frag_a.system.procs if p in set(frag_b.system.procs)]
    procs = list(procs)
    if state_view(frag_a.system, frag_a.start, procs) != state_view(frag_b.system, frag_b.start, procs):
        return False
    if project_client_messages(frag_a.trace, c) != project_client_messages(frag_b.trace, c):
        return False
    return state_view(frag_a.system, frag_a.end, procs) == state_view(frag_b.system, frag_b.end, procs)


# -- commutativity ------------------------------------------------------------------

DEFAULT_STATE_BOUND = 100_000


def op_universe(system: MicroserviceSystem) -> list[list[list]]:
    """Per client, per script entry: every database op that entry may produce."""
    sem, tr = system.semantics, system.translations
    out = []
    for cidx, script in enumerate(system.scenario.scripts):
        name = system.scenario.client_ids[cidx]
        per = []
        for r in script:
            ops = []
            for v in (0, 1):
                ops.append(sem.op(v, name, r))
                for seq in (tr.backward(r), tr.forward(r)):
                    if seq is not None:
                        ops.append(("batch", tuple(sem.op(v, name, x) for x in seq)))
            uniq = []
            for o in ops:
                if o not in uniq:
                    uniq.append(o)
            per.append(uniq)
        out.append(per)
    return out


def reachable_stores(system: MicroserviceSystem, bound: int = DEFAULT_STATE_BOUND) -> list:
    """Database stores reachable by executing script prefixes in any interleaving."""
    universe = op_universe(system)
    init = system.lts(DB).initial[1]
    start = (init, (0,) * len(universe))
    seen = {start}
    stores = {init: None}
    queue = deque([start])
    while queue:
        store, pos = queue.popleft()
        for c, per in enumerate(universe):
            if pos[c] >= len(per):
                continue
            nxt_pos = pos[:c] + (pos[c] + 1,) + pos[c + 1:]
            senders = range(system.n_workers) if system.semantics.kind == "adversarial" else (0,)
            for op in per[pos[c]]:
                for w in senders:
                    s2, _ = system.semantics.apply(store, op, w)
                    node = (s2, nxt_pos)
                    if node not in seen:
                        seen.add(node)
                        if len(seen) > bound:
                            raise BoundExceeded(f"more than {bound} reachable states")
                        stores.setdefault(s2, None)
                        queue.append(node)
    return list(stores)


def commutes_at(sem: Semantics, store, a, b, wa: int = 0, wb: int = 1) -> bool:
    s1, rb1 = sem.apply(store, b, wb)
    s1, ra1 = sem.apply(s1, a, wa)
    s2, ra2 = sem.apply(store, a, wa)
    s2, rb2 = sem.apply(s2, b, wb)
    return s1 == s2 and ra1 == ra2 and rb1 == rb2


def verify_commutes(system: MicroserviceSystem, op_a, op_b, bound: int = DEFAULT_STATE_BOUND,
                    stores: list | None = None) -> bool:
    """Does ``op_a`` left-commute over ``op_b`` on every reachable store."""
    if stores is None:
        stores = reachable_stores(system, bound)
    return all(commutes_at(system.semantics, s, op_a, op_b) for s in stores)


class Annotations:
    """Commutativity and translation knowledge consulted by controllers.

    In verified mode every answer is checked against bounded exploration,
    and a declared claim that fails verification raises InvalidScenario.
    """

    def __init__(self, system: MicroserviceSystem, bound: int = DEFAULT_STATE_BOUND):
        self.system = system
        self.sem = system.semantics
        self.mode = system.scenario.annotation_mode
        self.bound = bound
        self._cache: dict = {}
        self._stores = None
        lc = system.scenario.left_commutes
        self._kind_pairs = None if lc == "builtin" else {tuple(p) for p in lc}

    @property
    def stores(self):
        if self._stores is None:
            self._stores = reachable_stores(self.system, self.bound)
        return self._stores

    def declared(self, a, b) -> bool:
        if self._kind_pairs is None:
            return self.sem.declared_commutes(a, b)
        return (self.sem.op_kind(a), self.sem.op_kind(b)) in self._kind_pairs

    def verified(self, a, b) -> bool:
        return verify_commutes(self.system, a, b, stores=self.stores)

    def left_commutes(self, a, b) -> bool:
        key = (a, b)
        if key in self._cache:
            return self._cache[key]
        d = self.declared(a, b)
        if self.mode == "verified":
            v = self.verified(a, b)
            if d and not v:
                raise InvalidScenario(f"annotations.leftCommutes: {a!r} over {b!r} fails verification")
            d = v
        self._cache[key] = d
        return d

    def check_translations(self) -> None:
        """Verified mode: each B/F translation must reproduce the target version's
        result and store on every reachable store."""
        sys = self.system
        tr = sys.translations
        for cidx, script in enumerate(sys.scenario.scripts):
            name = sys.scenario.client_ids[cidx]
            for r in script:
                for seq, ver, target in ((tr.backward(r), 1, 0), (tr.forward(r), 0, 1)):
                    if seq is None:
                        continue
                    batch = ("batch", tuple(self.sem.op(ver, name, x) for x in seq))
                    plain = self.sem.op(target, name, r)
                    for s in self.stores:
                        if self.sem.apply(s, batch, 0) != self.sem.apply(s, plain, 0):
                            raise InvalidScenario(f"annotations: translation of {r!r} is not compatible")
