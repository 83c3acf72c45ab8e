"""Shared helpers for the test suite."""

from __future__ import annotations

from mixmode.causality import PoComputation
from mixmode.kernel import successors
from mixmode.model import MicroserviceSystem, Scenario


def tiny_scenario(scripts, n_workers=2, kind="email-translate", ids=None, **kw) -> Scenario:
    ids = ids or tuple(f"u{i}" for i in range(len(scripts)))
    return Scenario(name="tiny", client_ids=tuple(ids), scripts=tuple(tuple(s) for s in scripts),
                    n_workers=n_workers, db_kind=kind, **kw)


def all_complete_pos(system: MicroserviceSystem, max_actions: int = 30) -> list[PoComputation]:
    """Every distinct complete po-computation with at most ``max_actions`` actions.

    A po is determined by its process timelines, so the search dedupes on the
    tuple of timelines reached so far.
    """
    start = system.initial_state()
    procs = list(system.procs)
    seen = set()
    done = {}
    stack = [(start, tuple(() for _ in procs))]
    while stack:
        state, tls = stack.pop()
        if tls in seen:
            continue
        seen.add(tls)
        succ = successors(system, state)
        if not succ and system.is_complete(state):
            done[tls] = start
            continue
        if sum(map(len, tls)) >= max_actions:
            continue
        for a, s2 in succ:
            i = procs.index(a.proc)
            nt = tls[:i] + (tls[i] + (a,),) + tls[i + 1:]
            stack.append((s2, nt))
    return [PoComputation(system, start, dict(zip(procs, tls))) for tls in sorted(done, key=repr)]


def downset_states_agree(po: PoComputation) -> bool:
    """Every downset reaches one state whatever order built it; so all full
    linearizations end in the same state."""
    from mixmode.kernel import step
    procs = list(po.timelines)
    lens = [len(po.timelines[p]) for p in procs]
    states = {tuple(0 for _ in procs): po.start}
    frontier = [tuple(0 for _ in procs)]
    while frontier:
        nxt = []
        for cut in frontier:
            state = states[cut]
            for i, p in enumerate(procs):
                if cut[i] == lens[i]:
                    continue
                node = (p, cut[i])
                preds = po.preds[po.index[node]]
                if any(po.nodes[u][1] >= cut[procs.index(po.nodes[u][0])] for u in preds):
                    continue
                s2 = step(po.system, state, po.label(node))
                child = cut[:i] + (cut[i] + 1,) + cut[i + 1:]
                if child in states:
                    if states[child] != s2:
                        return False
                else:
                    states[child] = s2
                    nxt.append(child)
        frontier = nxt
    return True


def sample_run(seed: int, algorithm: str = "uncontrolled", max_steps: int = 5000):
    """One seeded run on a generated scenario; returns the fragment."""
    from mixmode.control import controller_for
    from mixmode.kernel import run
    from mixmode.scenarios import random_scenario
    system = MicroserviceSystem(random_scenario(seed, algorithm))
    return run(system, controller_for(algorithm), seed, max_steps)


class AllowAll:
    """A controller that permits everything and stamps nothing."""
    name = "allow-all"

    def start(self, system):
        return None

    def permit(self, cs, action, state):
        return True

    def stamp(self, cs, action):
        return action

    def observe(self, cs, action):
        pass


def sample_run_logged(seed: int, algorithm: str, max_steps: int = 5000):
    """Like :func:`sample_run`, also returning the controller's routing log."""
    from mixmode.control import controller_for
    from mixmode.kernel import run
    from mixmode.scenarios import random_scenario
    system = MicroserviceSystem(random_scenario(seed, algorithm))
    ctl = controller_for(algorithm)
    frag = run(system, ctl, seed, max_steps)
    return frag, ctl.last_state.routing_log
