"""Client rewrites that turn a controlled computation into an atomic one.

Each step edits process timelines of a po-computation and re-executes the
result with :func:`mixmode.causality.resimulate`, so payloads downstream of a
change are recomputed rather than copied.  Replacement steps add virtual
workers that exist only in the rewritten computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .causality import (CycleDetected, PoComputation, ProgressMeasure,
                        global_update_cut, has_atomic_update_po,
                        progress_measure, resimulate)
from .kernel import (DB, GlobalState, Internal, KernelError, Message,
                     ProcessId, Receive, Send, fragment_from_trace,
                     project_client_messages, worker)
from .model import Annotations, MicroserviceSystem, Relay, state_view


class RewriteError(Exception):
    pass


class NotAdjacent(RewriteError):
    pass


class NotCommutative(RewriteError):
    pass


class NoTranslation(RewriteError):
    pass


class NotEligible(RewriteError):
    def __init__(self, clause: str, detail: str = ""):
        super().__init__(f"{clause}: {detail}" if detail else clause)
        self.clause = clause


class Stuck(RewriteError):
    pass


@dataclass(frozen=True)
class RewriteStep:
    kind: str  # CommutativeSwap, BackwardReplace, ForwardRelayReplace
    relays: tuple
    fresh_worker: ProcessId | None = None

    def to_json(self) -> dict:
        d = {"kind": self.kind, "relays": [list(r) for r in self.relays]}
        if self.fresh_worker is not None:
            d["freshWorker"] = str(self.fresh_worker)
        return d


@dataclass
class StepVerdict:
    checks: dict
    measure_required: bool = True

    @property
    def ok(self) -> bool:
        return all(v for k, v in self.checks.items() if k != "measure" or self.measure_required)

    def to_json(self) -> dict:
        return {"checks": dict(self.checks), "measureRequired": self.measure_required, "ok": self.ok}


@dataclass
class StepRecord:
    step: RewriteStep
    before: ProgressMeasure
    after: ProgressMeasure
    verdict: StepVerdict
    result: PoComputation | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"step": self.step.to_json(), "before": self.before.to_json(),
                "after": self.after.to_json(), "verdict": self.verdict.to_json()}


@dataclass
class RewriteReport:
    client: ProcessId
    initial: ProgressMeasure
    steps: list = field(default_factory=list)
    final_po: PoComputation | None = None
    outcome: str = "AtomicReached"
    reason: str = ""

    @property
    def nonmonotone_steps(self) -> int:
        return sum(1 for s in self.steps if not s.verdict.checks.get("measure", True))

    def to_json(self) -> dict:
        return {"client": str(self.client), "initial": self.initial.to_json(),
                "outcome": self.outcome, "reason": self.reason,
                "final": progress_measure(self.final_po).to_json() if self.final_po else None,
                "steps": [s.to_json() for s in self.steps]}


# -- helpers ---------------------------------------------------------------------

def base_procs(system) -> list:
    if isinstance(system, MicroserviceSystem):
        return list(system.clients) + list(system.real_workers) + [DB]
    return list(system.procs)


def lift_state(src, dst, state: GlobalState) -> GlobalState:
    """Embed a global state into a system with extra (idle) processes."""
    if src is dst:
        return state
    locs = {p: l for p, l in zip(src.procs, state.locals)}
    chans = {c: v for c, v in zip(src.channels, state.chans)}
    init = dst.initial_state()
    return GlobalState(
        tuple(locs.get(p, l) for p, l in zip(dst.procs, init.locals)),
        tuple(chans.get(c, ()) for c in dst.channels),
    )


def relay_by_id(po: PoComputation, rid) -> Relay:
    for r in po.relays:
        if r.relay_id == tuple(rid):
            return r
    raise KeyError(rid)


def db_block(relay: Relay) -> tuple[int, int]:
    idx = [i for _, i in relay.db_actions]
    return idx[0], idx[-1]


def red_db_relays(po: PoComputation) -> list:
    return sorted((r for r in po.relays.complete if r.color == "red"), key=lambda r: r.db_start)


def _placeholder() -> Message:
    return Message(None)


# -- rewrite steps ---------------------------------------------------------------

def commutative_swap(po: PoComputation, bd: Relay, rd: Relay, annotations: Annotations | None = None,
                     force: bool = False) -> PoComputation:
    """Exchange an adjacent blue/red pair of database transactions."""
    if bd.color != "blue" or rd.color != "red":
        raise NotAdjacent("expected a blue transaction followed by a red one")
    if not (bd.complete and rd.complete):
        raise NotAdjacent("both relays must be complete")
    b0, b1 = db_block(bd)
    r0, r1 = db_block(rd)
    if b1 + 1 != r0:
        raise NotAdjacent(f"blue block ends at {b1}, red block starts at {r0}")
    if not force:
        if annotations is None or not annotations.left_commutes(rd.op, bd.op):
            raise NotCommutative(f"{rd.op!r} does not left-commute over {bd.op!r}")
    tl = {p: list(a) for p, a in po.timelines.items()}
    dbt = tl[DB]
    tl[DB] = dbt[:b0] + dbt[r0:r1 + 1] + dbt[b0:b1 + 1] + dbt[r1 + 1:]
    return resimulate(po.system, po.start, tl)


def _replace_relay(po: PoComputation, relay: Relay, fresh_version: int) -> tuple[PoComputation, ProcessId]:
    old_sys = po.system
    new_sys = old_sys.extended([fresh_version])
    fresh = worker(new_sys.n_workers - 1)
    start = lift_state(old_sys, new_sys, po.start)
    tl = {p: list(a) for p, a in po.timelines.items()}
    c = relay.client
    ci = relay.client_send[1]
    send = tl[c][ci]
    tl[c][ci] = Send(c, fresh, send.msg.with_control(x=None))
    tl[c][relay.client_recv[1]] = Receive(c, fresh, _placeholder())
    w = relay.worker
    drop = {relay.worker_recv[1], relay.worker_send_op[1], relay.worker_recv_res[1], relay.worker_send_rsp[1]}
    tl[w] = [a for i, a in enumerate(tl[w]) if i not in drop]
    tl[fresh] = [Receive(fresh, c, _placeholder()), Send(fresh, DB, _placeholder()),
                 Receive(fresh, DB, _placeholder()), Send(fresh, c, _placeholder())]
    for _, i in relay.db_actions:
        a = tl[DB][i]
        if isinstance(a, Receive):
            tl[DB][i] = Receive(DB, fresh, _placeholder())
        elif isinstance(a, Send):
            tl[DB][i] = Send(DB, fresh, _placeholder())
    return resimulate(new_sys, start, tl), fresh


def backward_replace(po: PoComputation, relay: Relay) -> PoComputation:
    """Service a blue relay's untranslated request on a fresh old worker."""
    if relay.translated != "B":
        raise NoTranslation(f"relay {relay.relay_id} does not service a backward translation")
    if relay.color != "blue":
        raise NotEligible("blue", f"relay {relay.relay_id} is {relay.color}")
    if not any(r.db_start > relay.db_start for r in red_db_relays(po)):
        raise NotEligible("later-red", "no red database transaction follows it")
    return _replace_relay(po, relay, 0)[0]


def forward_eligibility(po: PoComputation, relay: Relay, adjacent: bool = True) -> list[str]:
    """Failed clauses for a forward replacement (empty means eligible)."""
    failed = []
    if relay.color != "red":
        failed.append("red")
    if relay.translated != "F":
        failed.append("forwards-compatible")
    if not relay.complete:
        failed.append("complete")
        return failed
    cut = global_update_cut(po)
    reds_in_cut = [r for r in red_db_relays(po) if cut.contains(r.db_actions[-1])]
    if not reds_in_cut or reds_in_cut[-1].relay_id != relay.relay_id:
        failed.append("last-in-cut")
    start = relay.db_start
    colors = [po.color((DB, i)) for i in range(start)]
    if adjacent:
        if not colors or colors[-1] != "blue":
            failed.append("follows-updated")
    elif "blue" not in colors:
        failed.append("follows-updated")
    return failed


def forward_relay_replace(po: PoComputation, relay: Relay, adjacent: bool = True,
                          check: bool = True) -> PoComputation:
    """Re-service a red forwards-translated relay on a fresh updated worker.

    The original worker simply skips the relay; since worker scratch state is
    reset after every relay its state afterwards is unchanged.
    """
    if check:
        failed = forward_eligibility(po, relay, adjacent)
        if failed:
            raise NotEligible(failed[0], f"relay {relay.relay_id}")
    out, fresh = _replace_relay(po, relay, 1)
    w = relay.worker
    before = [a for a in po.timelines[w]]
    after = list(out.timelines.get(w, ()))
    assert len(after) == len(before) - 4
    return out


# -- verification -------------------------------------------------------------------

def _linear(po: PoComputation):
    return fragment_from_trace(po.system, po.topo_trace(), po.start)


def verify_step(before: PoComputation, after: PoComputation, client: ProcessId,
                all_clients: bool = False, reference=None) -> StepVerdict:
    """Itemized validity of one rewrite step.

    ``reference`` (a fragment) replaces ``before`` for the projection and
    state comparisons, which lets a whole chain be checked against the run.
    """
    checks: dict = {}
    checks["acyclic"] = after.is_acyclic()
    try:
        lin_after = _linear(after) if checks["acyclic"] else None
        checks["replay"] = lin_after is not None
    except KernelError:
        lin_after = None
        checks["replay"] = False
    lin_before = reference if reference is not None else _linear(before)
    procs = base_procs(lin_before.system)
    checks["start"] = (state_view(lin_before.system, lin_before.start, procs)
                       == state_view(after.system, after.start, procs))
    if lin_after is None:
        checks["projection"] = False
        checks["endState"] = False
    else:
        clients = [p for p in procs if p.role == "client"] if all_clients else [client]
        checks["projection"] = all(project_client_messages(lin_before.trace, c)
                                   == project_client_messages(lin_after.trace, c) for c in clients)
        checks["endState"] = (state_view(lin_before.system, lin_before.end, procs)
                              == state_view(after.system, lin_after.end, procs))
    try:
        checks["measure"] = progress_measure(after) < progress_measure(before)
    except CycleDetected:
        checks["measure"] = False
    return StepVerdict(checks)


# -- strategies -----------------------------------------------------------------------

def _leftmost_inversion(po: PoComputation):
    blocks = sorted((r for r in po.relays.complete), key=lambda r: r.db_start)
    for a, b in zip(blocks, blocks[1:]):
        if a.color == "blue" and b.color == "red" and db_block(a)[1] + 1 == db_block(b)[0]:
            return a, b
    return None


def _swap_step(po, ann, force=False):
    pair = _leftmost_inversion(po)
    if pair is None:
        return None
    bd, rd = pair
    if not force and not ann.left_commutes(rd.op, bd.op):
        raise Stuck(f"red {rd.relay_id} does not left-commute over blue {bd.relay_id}")
    return RewriteStep("CommutativeSwap", (bd.relay_id, rd.relay_id)), commutative_swap(po, bd, rd, ann, force)


def _backward_step(po):
    reds = red_db_relays(po)
    if not reds:
        return None
    last_red = reds[-1].db_start
    cands = sorted((r for r in po.relays.complete
                    if r.color == "blue" and r.translated == "B" and r.db_start < last_red),
                   key=lambda r: r.db_start)
    if not cands:
        return None
    r = cands[0]
    out = backward_replace(po, r)
    return RewriteStep("BackwardReplace", (r.relay_id,), worker(out.system.n_workers - 1)), out


def _forward_last_step(po):
    reds = red_db_relays(po)
    if not reds:
        return None
    r = reds[-1]
    failed = forward_eligibility(po, r, adjacent=False)
    if failed:
        raise Stuck(f"last red relay {r.relay_id} not replaceable: {', '.join(failed)}")
    out = forward_relay_replace(po, r, adjacent=False)
    return RewriteStep("ForwardRelayReplace", (r.relay_id,), worker(out.system.n_workers - 1)), out


def _forward_any_step(po):
    cands = [r for r in red_db_relays(po) if r.translated == "F"
             and "blue" in [po.color((DB, i)) for i in range(r.db_start)]]
    if not cands:
        return None
    r = cands[-1]
    out = forward_relay_replace(po, r, check=False)
    return RewriteStep("ForwardRelayReplace", (r.relay_id,), worker(out.system.n_workers - 1)), out


STRATEGIES = ("comm", "bcompat", "fcompat", "comm-f", "comm-b")


def rewrite_to_atomic(po: PoComputation, client: ProcessId, algorithm: str,
                      annotations: Annotations | None = None, max_steps: int | None = None,
                      force_swaps: bool = False) -> RewriteReport:
    """Apply the algorithm's rewrite steps until a measure component is 0."""
    if algorithm not in STRATEGIES:
        rep = RewriteReport(client, progress_measure(po), final_po=po)
        pm = rep.initial
        if pm.cut and pm.sort:
            rep.outcome, rep.reason = "Stuck", f"no rewrite strategy for {algorithm}"
        elif not has_atomic_update_po(po):
            rep.outcome, rep.reason = "Stuck", "measure is 0 but updates are ordered"
        return rep
    if annotations is None and algorithm in ("comm", "comm-f", "comm-b"):
        from .control import annotations_for
        annotations = annotations_for(po.system)
    reference = _linear(po)
    initial = progress_measure(po)
    rep = RewriteReport(client, initial, final_po=po)
    if max_steps is None:
        max_steps = (initial.cut + 1) * (initial.sort + 1) + 100
    phase = 1
    cur = po
    while True:
        pm = progress_measure(cur)
        if pm.cut == 0 or pm.sort == 0:
            break
        if len(rep.steps) >= max_steps:
            rep.outcome, rep.reason = "Stuck", "step budget exhausted"
            break
        try:
            res = None
            measure_required = True
            if algorithm == "comm":
                res = _swap_step(cur, annotations, force_swaps)
            elif algorithm == "bcompat":
                res = _backward_step(cur)
            elif algorithm == "fcompat":
                res = _forward_last_step(cur)
            elif algorithm == "comm-f":
                if phase == 1:
                    res = _forward_any_step(cur)
                    measure_required = False
                    if res is None:
                        phase = 2
                if phase == 2:
                    measure_required = True
                    res = _swap_step(cur, annotations, force_swaps)
            elif algorithm == "comm-b":
                if phase == 1:
                    res = _backward_step(cur)
                    if res is None:
                        phase = 2
                if phase == 2:
                    res = _swap_step(cur, annotations, force_swaps)
        except (RewriteError, CycleDetected, KernelError) as e:
            rep.outcome, rep.reason = "Stuck", f"{type(e).__name__}: {e}"
            break
        if res is None:
            rep.outcome, rep.reason = "Stuck", f"no eligible step at measure ({pm.cut}, {pm.sort})"
            break
        step, nxt = res
        verdict = verify_step(cur, nxt, client, all_clients=step.kind == "CommutativeSwap",
                              reference=reference)
        verdict.measure_required = measure_required
        rep.steps.append(StepRecord(step, pm, progress_measure(nxt), verdict, nxt))
        cur = nxt
        if not verdict.ok:
            rep.outcome, rep.reason = "Stuck", f"step failed verification: {verdict.checks}"
            break
    rep.final_po = cur
    if rep.outcome == "AtomicReached" and not has_atomic_update_po(cur):
        rep.outcome, rep.reason = "Stuck", "measure reached 0 but update actions remain ordered"
    return rep
