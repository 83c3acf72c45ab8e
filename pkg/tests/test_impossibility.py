import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixmode.control import controller_for
from mixmode.impossibility import (NoMixedModeFound, NotOblivious, ShapeMismatch,
                                   atomic_responses_exhaustive, build_adversarial_system,
                                   demonstrate, redrive, shape, value_remap)
from mixmode.kernel import DB, Internal, Message, Receive, Send, UpdateAction, client, fragment_from_trace, worker
from mixmode.scenarios import alternating_mail

from support import sample_run


def relay(c, w, req="x", op="y", res="z", updated=False):
    cw, wd = client(c), worker(w)
    # updated workers mark their replies
    reply = Message(res, (("upd", 1),) if updated else ())
    return [Send(cw, wd, Message(req)), Receive(wd, cw, Message(req)),
            Send(wd, DB, Message(op)), Receive(DB, wd, Message(op)), Internal(DB, "apply"),
            Send(DB, wd, Message(res)), Receive(wd, DB, Message(res)),
            Send(wd, cw, reply), Receive(cw, wd, reply)]


def values(trace):
    return [a.msg.payload for a in trace if isinstance(a, (Send, Receive))]


def test_old_relay_maps_to_zeros():
    assert values(value_remap(relay(0, 0))) == [0] * 8


def test_new_relay_sends_one_to_the_database():
    out = value_remap([UpdateAction(worker(0))] + relay(0, 0, updated=True))
    assert values(out) == [0, 0, 1, 1, 0, 0, 0, 0]


def test_old_write_after_new_write_is_answered_one():
    trace = [UpdateAction(worker(0))] + relay(0, 0, updated=True) + relay(1, 1)
    got = [a.msg.payload for a in value_remap(trace) if isinstance(a, Receive) and a.at.role == "client"]
    assert got == [0, 1]
    # the relabelled trace runs on the two-worker adversarial service
    frag = fragment_from_trace(build_adversarial_system(2, 2, 1), value_remap(trace))
    assert len(frag) == len(trace)


def test_remap_rejects_foreign_topology():
    with pytest.raises(ShapeMismatch):
        value_remap([Send(client(0), client(1), Message(0))])
    with pytest.raises(ShapeMismatch):
        value_remap([Receive(DB, client(0), Message(0))])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 4000), st.sampled_from(("uncontrolled", "ordered", "comm", "bcompat")))
def test_remap_keeps_shapes_and_is_idempotent(seed, alg):
    trace = sample_run(seed, alg).trace
    once = value_remap(trace)
    assert [shape(a) for a in once] == [shape(a) for a in trace]
    assert value_remap(once) == once
    assert set(values(once)) <= {0, 1}


def test_atomic_computations_answer_zero():
    res = atomic_responses_exhaustive(build_adversarial_system(2, 2, 2), max_actions=30)
    assert res.only_zero and res.counterexample is None and res.states > 1000


def test_single_worker_never_answers_one():
    res = atomic_responses_exhaustive(build_adversarial_system(2, 1, 2), max_actions=40)
    assert res.only_zero


@pytest.mark.parametrize("name", ["uncontrolled", "ordered"])
def test_oblivious_controllers_are_contradicted(name):
    report = demonstrate(controller_for(name), alternating_mail(2, 2, 2))
    assert report.contradiction
    assert report.redrive_differences == []
    assert report.verdict.overall == "inconsistent"
    data = report.to_json()
    assert data["contradiction"] and data["redrivePermitted"]
    assert "contradiction: yes" in report.summary()


def test_payload_aware_controller_is_refused():
    with pytest.raises(NotOblivious):
        demonstrate(controller_for("comm"), alternating_mail(2, 2, 2))


def test_no_mixed_mode_with_one_worker():
    with pytest.raises(NoMixedModeFound):
        demonstrate(controller_for("ordered"), alternating_mail(2, 1, 2), seeds=range(20))


def test_redrive_sees_identical_permissions():
    report = demonstrate(controller_for("ordered"), alternating_mail(2, 2, 2))
    src, dst = report.source, report.remapped
    assert redrive(controller_for("ordered"), src.system, src.trace, dst.system, dst.trace) == []
    with pytest.raises(ShapeMismatch):
        redrive(controller_for("ordered"), src.system, src.trace, dst.system, dst.trace[:-1] + dst.trace[:1])
