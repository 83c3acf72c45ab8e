"""Executable semantics for communicating transition systems over FIFO channels.

A system is a fixed set of processes, each with its own labeled transition
system, plus a set of one-way channels.  Global states are immutable tuples
aligned with ``system.procs`` and ``system.channels`` so they hash cheaply and
can be shared between runs.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol, Sequence

ROLES = ("client", "worker", "database", "manager")


class KernelError(Exception):
    pass


class NotEnabled(KernelError):
    def __init__(self, action: "Action", reason: str = ""):
        super().__init__(f"action not enabled: {action}" + (f" ({reason})" if reason else ""))
        self.action = action


class UnknownChannel(KernelError):
    pass


class Deadlock(KernelError):
    def __init__(self, fragment: "ComputationFragment", message: str = "no enabled permitted action"):
        super().__init__(message)
        self.fragment = fragment


class ControllerReject(Deadlock):
    pass


@dataclass(frozen=True, order=True)
class ProcessId:
    role: str
    index: int

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def __str__(self) -> str:
        if self.role == "database":
            return "d"
        return f"{self.role[0]}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "ProcessId":
        if text == "d":
            return DB
        m = re.fullmatch(r"([cwm])(\d+)", text)
        if not m:
            raise ValueError(f"bad process id {text!r}")
        role = {"c": "client", "w": "worker", "m": "manager"}[m.group(1)]
        return cls(role, int(m.group(2)))


DB = ProcessId("database", 0)


def client(i: int) -> ProcessId:
    return ProcessId("client", i)


def worker(i: int) -> ProcessId:
    return ProcessId("worker", i)


@dataclass(frozen=True, slots=True)
class Message:
    """A message value plus shell metadata.

    ``control`` is a sorted tuple of ``(key, value)`` pairs.  Keys in use:
    ``x`` (translation applied, "B"/"F"), ``no`` (request number), ``upd``
    (response reveals new-version behavior).
    """

    payload: Any
    control: tuple = ()

    def ctl(self, key: str, default=None):
        for k, v in self.control:
            if k == key:
                return v
        return default

    def with_control(self, **kv) -> "Message":
        d = dict(self.control)
        for k, v in kv.items():
            if v is None:
                d.pop(k, None)
            else:
                d[k] = v
        return Message(self.payload, tuple(sorted(d.items())))

    def unstamped(self) -> "Message":
        if self.ctl("no") is None:
            return self
        return self.with_control(no=None)


@dataclass(frozen=True, slots=True)
class Send:
    src: ProcessId
    dst: ProcessId
    msg: Message

    @property
    def proc(self) -> ProcessId:
        return self.src


@dataclass(frozen=True, slots=True)
class Receive:
    at: ProcessId
    src: ProcessId
    msg: Message

    @property
    def proc(self) -> ProcessId:
        return self.at


@dataclass(frozen=True, slots=True)
class Internal:
    at: ProcessId
    tag: str

    @property
    def proc(self) -> ProcessId:
        return self.at


@dataclass(frozen=True, slots=True)
class UpdateAction:
    at: ProcessId

    def __post_init__(self):
        if self.at.role != "worker":
            raise ValueError("update actions belong to workers only")

    @property
    def proc(self) -> ProcessId:
        return self.at


Action = Send | Receive | Internal | UpdateAction


def is_observable(a: Action) -> bool:
    return isinstance(a, (Send, Receive))


def is_controllable(a: Action) -> bool:
    return isinstance(a, (Send, Receive, UpdateAction))


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    return v


def _thaw(v):
    if isinstance(v, tuple):
        return [_thaw(x) for x in v]
    if isinstance(v, frozenset):
        return sorted((_thaw(x) for x in v), key=repr)
    if isinstance(v, ProcessId):
        return str(v)
    return v


def action_to_json(a: Action) -> dict:
    if isinstance(a, Send):
        return {"kind": "send", "from": str(a.src), "to": str(a.dst),
                "payload": _thaw(a.msg.payload), "control": dict(a.msg.control)}
    if isinstance(a, Receive):
        return {"kind": "recv", "from": str(a.src), "to": str(a.at),
                "payload": _thaw(a.msg.payload), "control": dict(a.msg.control)}
    if isinstance(a, Internal):
        return {"kind": "internal", "at": str(a.at), "tag": a.tag}
    return {"kind": "update", "at": str(a.at)}


def action_from_json(d: dict) -> Action:
    kind = d["kind"]
    if kind in ("send", "recv"):
        msg = Message(_freeze(d["payload"]), tuple(sorted(d.get("control", {}).items())))
        src, dst = ProcessId.parse(d["from"]), ProcessId.parse(d["to"])
        return Send(src, dst, msg) if kind == "send" else Receive(dst, src, msg)
    if kind == "internal":
        return Internal(ProcessId.parse(d["at"]), d["tag"])
    if kind == "update":
        return UpdateAction(ProcessId.parse(d["at"]))
    raise ValueError(f"unknown action kind {kind!r}")


def action_key(a: Action) -> str:
    return json.dumps(action_to_json(a), sort_keys=True, default=str)


class ProcessLts(Protocol):
    """Local transition relation of one process.

    ``moves`` lists the sends, internal and update actions available in a
    local state; ``accept`` answers whether a received message is taken and
    returns the successor local state (or ``None``).
    """

    initial: Any

    def moves(self, local) -> Sequence[tuple[Action, Any]]: ...

    def accept(self, local, src: ProcessId, msg: Message): ...


@dataclass(frozen=True)
class GlobalState:
    locals: tuple
    chans: tuple

    def drained(self) -> bool:
        return all(not c for c in self.chans)


class System:
    """A communicating transition system.

    Subclasses supply ``procs``, ``channels`` and ``lts_for``.
    """

    procs: tuple[ProcessId, ...]
    channels: tuple[tuple[ProcessId, ProcessId], ...]

    def _index(self):
        self.pidx = {p: i for i, p in enumerate(self.procs)}
        self.cidx = {c: i for i, c in enumerate(self.channels)}
        self.ltss = tuple(self.lts_for(p) for p in self.procs)
        self.inbound = {p: tuple(c for c in self.channels if c[1] == p) for p in self.procs}

    def lts_for(self, p: ProcessId) -> ProcessLts:
        raise NotImplementedError

    def lts(self, p: ProcessId) -> ProcessLts:
        return self.ltss[self.pidx[p]]

    def initial_state(self) -> GlobalState:
        return GlobalState(tuple(l.initial for l in self.ltss), tuple(() for _ in self.channels))

    def local(self, state: GlobalState, p: ProcessId):
        return state.locals[self.pidx[p]]

    def channel(self, state: GlobalState, src: ProcessId, dst: ProcessId) -> tuple:
        try:
            return state.chans[self.cidx[(src, dst)]]
        except KeyError:
            raise UnknownChannel(f"no channel {src}->{dst}") from None


def step(system: System, state: GlobalState, action: Action) -> GlobalState:
    p = action.proc
    if p not in system.pidx:
        raise NotEnabled(action, "unknown process")
    pi = system.pidx[p]
    lts = system.ltss[pi]
    local = state.locals[pi]
    if isinstance(action, Receive):
        ci = system.cidx.get((action.src, action.at))
        if ci is None:
            raise UnknownChannel(f"no channel {action.src}->{action.at}")
        chan = state.chans[ci]
        if not chan or chan[0] != action.msg:
            raise NotEnabled(action, "message not at channel head")
        nxt = lts.accept(local, action.src, action.msg)
        if nxt is None:
            raise NotEnabled(action, "receiver refuses message")
        chans = state.chans[:ci] + (chan[1:],) + state.chans[ci + 1:]
        return GlobalState(_replace(state.locals, pi, nxt), chans)
    if isinstance(action, Send):
        ci = system.cidx.get((action.src, action.dst))
        if ci is None:
            raise UnknownChannel(f"no channel {action.src}->{action.dst}")
        # the manager's request number is stamped onto client sends after the choice
        probe = Send(action.src, action.dst, action.msg.unstamped()) if p.role == "client" else action
        for a, nxt in lts.moves(local):
            if a == probe:
                chans = state.chans[:ci] + (state.chans[ci] + (action.msg,),) + state.chans[ci + 1:]
                return GlobalState(_replace(state.locals, pi, nxt), chans)
        raise NotEnabled(action)
    for a, nxt in lts.moves(local):
        if a == action:
            return GlobalState(_replace(state.locals, pi, nxt), state.chans)
    raise NotEnabled(action)


def _replace(t: tuple, i: int, v) -> tuple:
    return t[:i] + (v,) + t[i + 1:]


def successors(system: System, state: GlobalState) -> list[tuple[Action, GlobalState]]:
    """Enabled actions paired with successor states, in process order."""
    out = []
    for pi, p in enumerate(system.procs):
        lts = system.ltss[pi]
        local = state.locals[pi]
        for a, nxt in lts.moves(local):
            if isinstance(a, Send):
                ci = system.cidx[(a.src, a.dst)]
                chans = state.chans[:ci] + (state.chans[ci] + (a.msg,),) + state.chans[ci + 1:]
                out.append((a, GlobalState(_replace(state.locals, pi, nxt), chans)))
            else:
                out.append((a, GlobalState(_replace(state.locals, pi, nxt), state.chans)))
        for ch in system.inbound[p]:
            ci = system.cidx[ch]
            chan = state.chans[ci]
            if chan:
                nxt = lts.accept(local, ch[0], chan[0])
                if nxt is not None:
                    chans = state.chans[:ci] + (chan[1:],) + state.chans[ci + 1:]
                    out.append((Receive(p, ch[0], chan[0]),
                                GlobalState(_replace(state.locals, pi, nxt), chans)))
    return out


def enabled_actions(system: System, state: GlobalState) -> list[Action]:
    acts = [a for a, _ in successors(system, state)]
    acts.sort(key=lambda a: (a.proc, action_key(a)))
    return acts


@dataclass(frozen=True)
class ComputationFragment:
    system: System
    start: GlobalState
    steps: tuple[tuple[Action, GlobalState], ...] = ()

    @property
    def trace(self) -> list[Action]:
        return [a for a, _ in self.steps]

    @property
    def end(self) -> GlobalState:
        return self.steps[-1][1] if self.steps else self.start

    def __len__(self) -> int:
        return len(self.steps)


def fragment_from_trace(system: System, trace: Iterable[Action],
                        start: GlobalState | None = None) -> ComputationFragment:
    state = system.initial_state() if start is None else start
    s0 = state
    steps = []
    for a in trace:
        state = step(system, state, a)
        steps.append((a, state))
    return ComputationFragment(system, s0, tuple(steps))


class Controller(Protocol):
    def start(self, system: System) -> Any: ...

    def permit(self, cstate, action: Action, gstate: GlobalState) -> bool: ...

    def stamp(self, cstate, action: Action) -> Action: ...

    def observe(self, cstate, action: Action) -> None: ...


def run(system: System, controller, seed: int, max_steps: int,
        policy=None) -> ComputationFragment:
    """Drive ``system`` under ``controller`` with a seeded uniform scheduler.

    The run stops after ``max_steps`` steps or when nothing is enabled.  It
    raises :class:`Deadlock` when it gets stuck before every script has
    finished, every worker updated and every channel drained.
    """
    if max_steps < 0:
        raise ValueError("max_steps must be >= 0")
    rng = random.Random(seed)
    cstate = controller.start(system)
    state = system.initial_state()
    start = state
    steps: list[tuple[Action, GlobalState]] = []
    while len(steps) < max_steps:
        succ = successors(system, state)
        if not succ:
            if not system.is_complete(state):
                raise Deadlock(ComputationFragment(system, start, tuple(steps)))
            break
        allowed = [(a, s) for a, s in succ if controller.permit(cstate, a, state)]
        if policy is not None and allowed:
            allowed = policy(cstate, allowed, state)
        if not allowed:
            frag = ComputationFragment(system, start, tuple(steps))
            if any(is_controllable(a) for a, _ in succ):
                raise ControllerReject(frag, "controller refuses every enabled action")
            raise Deadlock(frag)
        allowed.sort(key=lambda t: (t[0].proc, action_key(t[0])))
        a, _ = rng.choice(allowed)
        a = controller.stamp(cstate, a)
        state = step(system, state, a)
        controller.observe(cstate, a)
        steps.append((a, state))
    return ComputationFragment(system, start, tuple(steps))


def project(trace: Iterable[Action], p: ProcessId) -> list[Action]:
    return [a for a in trace if a.proc == p]


def project_client_messages(trace: Iterable[Action], c: ProcessId) -> list[tuple[str, Any]]:
    """(c, M)-projection: direction and payload only."""
    out = []
    for a in trace:
        if a.proc != c:
            continue
        if isinstance(a, Send):
            out.append(("send", a.msg.payload))
        elif isinstance(a, Receive):
            out.append(("recv", a.msg.payload))
    return out


def replay(system: System, fragment: ComputationFragment) -> bool:
    state = fragment.start
    for a, s in fragment.steps:
        try:
            state = step(system, state, a)
        except KernelError:
            return False
        if state != s:
            return False
    return True


def replay_trace(system: System, trace: Iterable[Action], start: GlobalState | None = None) -> bool:
    try:
        fragment_from_trace(system, trace, start)
    except KernelError:
        return False
    return True


def _shape(a: Action) -> str:
    if isinstance(a, Send):
        return "S" + a.dst.role[0]
    if isinstance(a, Receive):
        return "R" + a.src.role[0]
    if isinstance(a, UpdateAction):
        return "u"
    return "i"


_SHAPES = {
    "client": re.compile(r"(SwRw)*(Sw)?"),
    "worker": re.compile(r"(u*Rci*Sdi*Rdi*Sc)*u*(Rci*(Sdi*(Rdi*)?)?)?"),
    "database": re.compile(r"(Rwi*Sw)*(Rwi*)?"),
}
_FULL = {
    "client": re.compile(r"(SwRw)*"),
    "worker": re.compile(r"(u*Rci*Sdi*Rdi*Sc)*u*"),
    "database": re.compile(r"(Rwi*Sw)*"),
}


def spec_conformance(trace: Iterable[Action], p: ProcessId, complete: bool = False) -> bool:
    """Check that ``p``'s actions follow its role's specification shape.

    With ``complete=False`` a trailing unfinished cycle is accepted, since
    finite fragments are prefixes of the specification language.  Workers
    must also receive replies from the process they sent to.
    """
    if p.role not in _SHAPES:
        raise ValueError("conformance is defined for clients, workers and the database")
    acts = project(trace, p)
    word = "".join(_shape(a) for a in acts)
    pat = (_FULL if complete else _SHAPES)[p.role]
    # shape letters are 1-2 chars; re-tokenize to avoid accidental matches
    if not pat.fullmatch(word):
        return False
    if p.role == "client":
        peer = None
        for a in acts:
            if isinstance(a, Send):
                peer = a.dst
            elif isinstance(a, Receive) and a.src != peer:
                return False
    if p.role == "worker":
        peer = None
        for a in acts:
            if isinstance(a, Receive) and a.src.role == "client":
                peer = a.src
            elif isinstance(a, Send) and a.dst.role == "client" and a.dst != peer:
                return False
    if p.role == "database":
        peer = None
        for a in acts:
            if isinstance(a, Receive):
                peer = a.src
            elif isinstance(a, Send) and a.dst != peer:
                return False
    return True


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, frozenset):
        return sorted((_jsonable(x) for x in v), key=repr)
    if isinstance(v, Message):
        return {"payload": _jsonable(v.payload), "control": dict(v.control)}
    if isinstance(v, ProcessId):
        return str(v)
    return v


def state_to_json(system: System, state: GlobalState) -> dict:
    return {
        "locals": {str(p): _jsonable(l) for p, l in zip(system.procs, state.locals)},
        "channels": {f"{a}->{b}": _jsonable(c) for (a, b), c in zip(system.channels, state.chans) if c},
    }


def state_hash(system: System, state: GlobalState) -> str:
    blob = json.dumps(state_to_json(system, state), sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()
