import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixmode.control import controller_for
from mixmode.impossibility import adversarial_scenario, build_adversarial_system
from mixmode.kernel import DB, Internal, Receive, Send, UpdateAction, run
from mixmode.model import (Annotations, IncompleteRelay, InvalidScenario, MicroserviceSystem,
                           Scenario, build_system, client_equivalent, db_transaction,
                           extract_relays, op_universe, reachable_stores, verify_commutes)
from mixmode.scenarios import commuting_sends, email_format, email_translate, scripted_fragment

from support import AllowAll, sample_run, tiny_scenario

ALGS = ("uncontrolled", "ordered", "comm", "bcompat", "fcompat", "comm-f", "comm-b")


def test_send_appends_to_recipient_inbox():
    sy = MicroserviceSystem(tiny_scenario([[("send", "bob", "hello")], [("check",)]], ids=("alice", "bob")))
    frag = scripted_fragment(sy, [(0, 0), (1, 1)])
    reply = [a for a in frag.trace if isinstance(a, Receive) and a.at == sy.clients[1]][0]
    assert reply.msg.payload == ("inbox", (("alice", "hello"),))


def test_smallest_legal_system():
    sy = build_system(tiny_scenario([[("ping",)]], n_workers=1, kind="noop"))
    frag = run(sy, AllowAll(), 0, 100)
    assert sy.is_complete(frag.end)
    assert len(extract_relays(frag.trace, sy).complete) == 1


def test_adversarial_builders_agree():
    assert MicroserviceSystem(adversarial_scenario(2, 3, 1)) == build_adversarial_system(2, 3, 1)


def test_scenario_json_round_trip():
    for sc in (email_translate(), email_format(), adversarial_scenario(2, 2, [1, 2])):
        assert Scenario.from_json(sc.to_json()) == sc


def test_invalid_scenario_lists_every_problem():
    data = email_translate().to_json()
    data["workers"]["count"] = 0
    data["update"]["algorithm"] = "magic"
    data["clients"][0]["script"].append(["shout"])
    with pytest.raises(InvalidScenario) as e:
        Scenario.from_json(data)
    text = str(e.value)
    assert "workers.count" in text and "update.algorithm" in text and "script[3]" in text


def test_single_relay_and_truncation():
    sy = MicroserviceSystem(tiny_scenario([[("check",)]], n_workers=1))
    frag = run(sy, AllowAll(), 0, 100)
    trace = [a for a in frag.trace if not isinstance(a, UpdateAction)]
    part = extract_relays(trace, sy)
    assert len(part.complete) == 1 and len(part.complete[0].actions) >= 6
    cut_at = next(i for i, a in enumerate(trace) if isinstance(a, Send) and a.dst == DB)
    part = extract_relays(trace[:cut_at + 1], sy)
    assert (len(part.complete), len(part.incomplete)) == (0, 1)
    with pytest.raises(IncompleteRelay):
        db_transaction(part.incomplete[0])


def test_two_relays_have_disjoint_ordered_transactions():
    frag = run(MicroserviceSystem(commuting_sends()), controller_for("uncontrolled"), 4, 5000)
    rels = extract_relays(frag.trace, frag.system).complete
    txs = sorted((db_transaction(r) for r in rels), key=lambda t: t.actions[0][1])
    assert len(txs) == 3
    seen = set()
    for t in txs:
        assert not seen & set(t.actions)
        seen |= set(t.actions)
    for a, b in zip(txs, txs[1:]):
        assert a.actions[-1][1] < b.actions[0][1]


def test_transaction_payloads():
    sy = MicroserviceSystem(tiny_scenario([[("ping",)]], n_workers=1, kind="noop"))
    frag = run(sy, AllowAll(), 0, 100)
    t = db_transaction(extract_relays(frag.trace, sy).complete[0])
    labels = [frag.trace[i] for i in range(len(frag.trace)) if frag.trace[i].proc == DB]
    assert labels[0].msg.payload == t.op == ("noop",)
    assert labels[-1].msg.payload == t.result == ("ok",)
    assert [type(a) for a in labels] == [Receive, Internal, Send]


def _alice_views():
    sc = tiny_scenario([[("send", "bob", "hi"), ("check",)], [("check",)], [("send", "alice", "yo")]],
                       ids=("alice", "bob", "charles"))
    sy = MicroserviceSystem(sc)
    with_bob = scripted_fragment(sy, [(0, 0), (1, 1), (2, 0), (0, 1)])
    return sy, with_bob


def test_alice_equivalence():
    sy, with_bob = _alice_views()
    alice = sy.clients[0]
    # Bob reading in between does not change what Alice sees
    other = scripted_fragment(sy, [(0, 1), (2, 1), (1, 0), (0, 0)])
    assert client_equivalent(with_bob, other, alice)
    assert client_equivalent(with_bob, with_bob, alice)


def test_equal_projection_but_different_end_state():
    sy = MicroserviceSystem(tiny_scenario([[("check",)], [("send", "u1", "x")]]))
    a = scripted_fragment(sy, [(0, 0), (1, 0)])
    b = scripted_fragment(sy, [(0, 0)])
    assert not client_equivalent(a, b, sy.clients[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3000), st.sampled_from(ALGS))
def test_relay_partition(seed, alg):
    frag = sample_run(seed, alg)
    part = extract_relays(frag.trace, frag.system)
    owned = [aid for r in part for aid in r.actions]
    assert len(owned) == len(set(owned))
    counts: dict = {}
    everything = set()
    for a in frag.trace:
        i = counts.get(a.proc, 0)
        counts[a.proc] = i + 1
        if not isinstance(a, UpdateAction):
            everything.add((a.proc, i))
    assert set(owned) == everything
    for r in part.complete:
        procs = {p for p, _ in r.actions}
        assert procs == {r.client, r.worker, DB}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 400), st.integers(0, 400), st.integers(0, 400))
def test_client_equivalence_is_an_equivalence(s1, s2, s3):
    sc = email_translate()
    sy = MicroserviceSystem(sc)
    frags = [run(sy, controller_for("uncontrolled"), s, 5000) for s in (s1, s2, s3)]
    for c in sy.clients:
        eq = lambda x, y: client_equivalent(x, y, c)
        a, b, d = frags
        assert eq(a, a)
        assert eq(a, b) == eq(b, a)
        if eq(a, b) and eq(b, d):
            assert eq(a, d)


def test_commutativity_examples():
    sc = tiny_scenario([[("send", "b", "m")], [("send", "c", "n"), ("check",)], [("check",)]],
                       ids=("a", "b", "c"))
    sy = MicroserviceSystem(sc)
    a_to_b = ("append", "b", "a", "m")
    b_to_c = ("append", "c", "b", "n")
    read_b = ("read", "b")
    assert verify_commutes(sy, a_to_b, b_to_c)
    assert not verify_commutes(sy, a_to_b, read_b)
    assert verify_commutes(sy, read_b, read_b)


def test_declared_table_matches_verification_in_verified_mode():
    sy = MicroserviceSystem(email_translate())
    stores = reachable_stores(sy)
    ops = sorted({op for per in op_universe(sy) for e in per for op in e}, key=repr)
    for a, b in itertools.product(ops, ops):
        assert verify_commutes(sy, a, b, stores=stores) == sy.semantics.declared_commutes(a, b)


def test_declared_table_is_sound_for_formatting():
    # batches are judged component-wise, which may only under-approximate
    sy = MicroserviceSystem(email_format())
    stores = reachable_stores(sy)
    ops = sorted({op for per in op_universe(sy) for e in per for op in e}, key=repr)
    for a, b in itertools.product(ops, ops):
        if sy.semantics.declared_commutes(a, b):
            assert verify_commutes(sy, a, b, stores=stores)


def test_wrong_declaration_is_caught_in_verified_mode():
    sc = email_translate().with_(left_commutes=(("read", "append"),))
    ann = Annotations(MicroserviceSystem(sc))
    with pytest.raises(InvalidScenario):
        ann.left_commutes(("read", "george"), ("append", "george", "amelie", "bonjour"))
