"""Built-in scenarios, a random scenario generator and scripted schedules."""

from __future__ import annotations

import random

from .kernel import (ComputationFragment, Receive, Send, UpdateAction,
                     fragment_from_trace, step, successors, worker)
from .model import MicroserviceSystem, Scenario


def email_translate() -> Scenario:
    """Two pen pals; the update adds translations to sent mail."""
    return Scenario(
        name="email-translate",
        client_ids=("amelie", "george"),
        scripts=(
            (("send", "george", "bonjour"), ("send", "george", "salut"), ("check",)),
            (("check",), ("send", "amelie", "hello"), ("send", "amelie", "bye")),
        ),
        n_workers=2,
        db_kind="email-translate",
    )


def george() -> Scenario:
    """Amelie writes first, George reads twice and then replies."""
    return Scenario(
        name="george",
        client_ids=("amelie", "george"),
        scripts=(
            (("send", "george", "bonjour"), ("check",), ("check",)),
            (("check",), ("check",), ("send", "amelie", "hello")),
        ),
        n_workers=2,
        db_kind="email-translate",
    )


def commuting_sends() -> Scenario:
    """Alice mails Bob while Bob mails Charles; Bob reads afterwards."""
    return Scenario(
        name="commuting-sends",
        client_ids=("alice", "bob", "charles"),
        scripts=(
            (("send", "bob", "hi bob"),),
            (("send", "charles", "hi charles"), ("check",)),
            (),
        ),
        n_workers=2,
        db_kind="email-translate",
    )


def email_format() -> Scenario:
    return Scenario(
        name="email-format",
        client_ids=("alice", "bob"),
        scripts=(
            (("send", "bob", "*x"), ("check",), ("send", "bob", "y")),
            (("send", "alice", "a\n*b"), ("check",), ("check",)),
        ),
        n_workers=2,
        db_kind="email-format",
    )


def staggered() -> Scenario:
    """Three clients, three workers updated one after another."""
    return Scenario(
        name="staggered",
        client_ids=("ann", "ben", "cat"),
        scripts=tuple(((("send", to, "hey"),) + (("check",),)) for to in ("ben", "cat", "ann")),
        n_workers=3,
        db_kind="email-translate",
    )


def adversarial() -> Scenario:
    from .impossibility import adversarial_scenario
    return adversarial_scenario(2, 2, 2)


def alternating_mail(n_clients: int, n_workers: int, n_requests: int) -> Scenario:
    """Each user alternates between mailing the next user and checking."""
    ids = tuple(f"u{i}" for i in range(n_clients))
    scripts = []
    for i in range(n_clients):
        peer = ids[(i + 1) % n_clients]
        scripts.append(tuple(("send", peer, f"m{k}") if (i + k) % 2 == 0 else ("check",)
                             for k in range(n_requests)))
    return Scenario(name=f"email-{n_clients}x{n_workers}", client_ids=ids, scripts=tuple(scripts),
                    n_workers=n_workers, db_kind="email-translate")


BUILTIN = {
    "email-translate": email_translate,
    "george": george,
    "commuting-sends": commuting_sends,
    "email-format": email_format,
    "staggered": staggered,
    "adversarial": adversarial,
}


def builtin(name: str) -> Scenario:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown builtin scenario {name!r}; choose from {', '.join(BUILTIN)}") from None


TRANSLATE_BODIES = ("hi", "yo")
FORMAT_BODIES = ("x", "*x", "a\n*b")


def random_scenario(seed: int, algorithm: str, max_clients: int = 2, max_workers: int = 2,
                    max_requests: int = 4) -> Scenario:
    """Small random scenario; compatibility algorithms get the format service.

    Sizes lean towards the maximum since one worker can never be mixed mode.
    """
    rng = random.Random(f"scenario-{algorithm}-{seed}")
    n_clients = max_clients if rng.random() < 0.8 else rng.randint(1, max_clients)
    n_workers = max_workers if rng.random() < 0.85 else rng.randint(1, max_workers)
    if algorithm in ("bcompat", "fcompat", "comm-f", "comm-b"):
        kind = "email-format" if rng.random() < 0.8 else "email-translate"
    else:
        kind = rng.choice(("email-translate", "email-format"))
    bodies = FORMAT_BODIES if kind == "email-format" else TRANSLATE_BODIES
    ids = tuple(f"u{i}" for i in range(n_clients))
    scripts = []
    for _ in ids:
        script = []
        for _ in range(rng.randint(min(2, max_requests), max_requests)):
            if rng.random() < 0.6:
                script.append(("send", rng.choice(ids), rng.choice(bodies)))
            else:
                script.append(("check",))
        scripts.append(tuple(script))
    return Scenario(
        name=f"random-{algorithm}-{seed}",
        client_ids=ids,
        scripts=tuple(scripts),
        n_workers=n_workers,
        db_kind=kind,
        algorithm=algorithm,
        policy=rng.choice(("coin", "coin", "prefer-old", "prefer-new")),
    )


def scripted_fragment(system: MicroserviceSystem, plan) -> ComputationFragment:
    """Run relays one at a time following ``plan``.

    Plan entries are ``(client_index, worker_index)`` for a plain request,
    ``(client_index, worker_index, "B" | "F")`` for a translated one, each
    serviced to completion before the next entry, or ``("update", w)``.
    """
    state = system.initial_state()
    trace = []
    for entry in plan:
        if entry[0] == "update":
            a = UpdateAction(worker(entry[1]))
            state = step(system, state, a)
            trace.append(a)
            continue
        ci, wi = entry[:2]
        x = entry[2] if len(entry) > 2 else None
        c = system.clients[ci]
        sends = [a for a, _ in successors(system, state)
                 if isinstance(a, Send) and a.src == c and a.dst == worker(wi) and a.msg.ctl("x") == x]
        if not sends:
            raise ValueError(f"plan entry {entry!r} is not enabled")
        a = sends[0]
        state = step(system, state, a)
        trace.append(a)
        while True:
            nxt = [a for a, _ in successors(system, state)
                   if a.proc.role != "client" or isinstance(a, Receive)]
            nxt = [a for a in nxt if not isinstance(a, UpdateAction)]
            if not nxt:
                break
            a = nxt[0]
            state = step(system, state, a)
            trace.append(a)
            if isinstance(a, Receive) and a.at == c:
                break
    return fragment_from_trace(system, trace)


STAGGERED_PLAN = (
    (0, 0), (1, 1), (2, 2),
    ("update", 0), (0, 0),
    ("update", 1), (1, 1),
    ("update", 2), (2, 2),
)


def staggered_fragment() -> ComputationFragment:
    return scripted_fragment(MicroserviceSystem(staggered()), STAGGERED_PLAN)
