from hypothesis import given, settings
from hypothesis import strategies as st

from mixmode.checker import (check_by_oracle, check_by_rewrite, find_violation, search_witness,
                             witness_is_sound)
from mixmode.control import controller_for, is_atomic, is_mixed_mode
from mixmode.kernel import run
from mixmode.model import MicroserviceSystem
from mixmode.scenarios import commuting_sends, email_translate, george, scripted_fragment

from support import sample_run, tiny_scenario


def uncontrolled(scenario, seed):
    sy = MicroserviceSystem(scenario)
    return sy, run(sy, controller_for("uncontrolled"), seed, 5000)


def test_atomic_fragment_is_consistent():
    sy = MicroserviceSystem(email_translate())
    frag = scripted_fragment(sy, [(0, 0), (1, 1), ("update", 0), ("update", 1), (0, 0), (1, 1)])
    assert is_atomic(frag.trace)
    v = check_by_oracle(sy, frag)
    assert v.overall == "consistent"
    for c, cv in v.per_client.items():
        assert witness_is_sound(sy, frag, c, cv.witness)


def test_george_sees_new_then_old():
    sy, frag = uncontrolled(george(), 402)
    v = check_by_oracle(sy, frag)
    g = sy.clients[1]
    assert v.overall == "inconsistent"
    assert v.per_client[g].status == "Inconsistent"
    bad = v.per_client[g].witness
    assert bad.client == g
    assert bad.earlier[1] == ("inbox", (("amelie", "bonjour@tr"),))
    assert bad.later[1] == ("sent", "hello")
    assert bad.earlier[0] < bad.later[0]


def test_send_result_violation():
    sy, frag = uncontrolled(email_translate(), 7)
    bad = find_violation(frag)
    assert bad is not None
    assert (bad.earlier[1], bad.later[1]) == (("sent", "hello@tr"), ("sent", "bye"))
    assert check_by_oracle(sy, frag).overall == "inconsistent"


def test_commuting_sends_are_always_consistent():
    sy = MicroserviceSystem(commuting_sends())
    mixed = 0
    for seed in range(60):
        frag = run(sy, controller_for("uncontrolled"), seed, 5000)
        mixed += is_mixed_mode(frag.trace, sy)
        v = check_by_oracle(sy, frag)
        assert v.overall == "consistent", seed
        for c, cv in v.per_client.items():
            assert witness_is_sound(sy, frag, c, cv.witness)
    assert mixed > 0


def test_no_violation_on_atomic_or_all_red():
    sy = MicroserviceSystem(email_translate())
    red = scripted_fragment(sy, [(0, 0), (1, 1), (0, 1), (1, 0)])
    assert find_violation(red) is None
    atomic = scripted_fragment(sy, [(0, 0), ("update", 0), ("update", 1), (1, 1), (0, 0)])
    assert find_violation(atomic) is None


def test_tiny_bound_gives_unknown():
    sy, frag = uncontrolled(email_translate(), 7)
    v = check_by_oracle(sy, frag, bound=5)
    assert v.overall == "unknown"
    assert all(cv.reason == "bound exhausted" for cv in v.per_client.values())


def test_bound_is_monotone():
    sy, frag = uncontrolled(commuting_sends(), 3)
    last = None
    for bound in (10, 100, 1000, 100_000):
        status = check_by_oracle(sy, frag, bound=bound).overall
        if last == "consistent":
            assert status == "consistent"
        last = status
    assert last == "consistent"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3000))
def test_reduced_and_full_search_agree(seed):
    sc = tiny_scenario([[("send", "u1", "a"), ("check",)], [("check",), ("send", "u0", "b")]])
    sy, frag = uncontrolled(sc, seed)
    for c in sy.clients:
        with_por, _ = search_witness(sy, frag, c, 10**6, por=True)
        without, _ = search_witness(sy, frag, c, 10**6, por=False)
        assert (with_por is None) == (without is None)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3000), st.sampled_from(("comm", "bcompat", "fcompat", "comm-f", "comm-b")))
def test_rewriting_agrees_with_the_oracle(seed, alg):
    frag = sample_run(seed, alg)
    if len(frag.system.clients) * len(frag.system.workers) > 4:
        return
    by_rewrite = check_by_rewrite(frag, alg)
    assert by_rewrite.overall == "consistent"
    assert check_by_oracle(frag.system, frag).overall == "consistent"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3000), st.sampled_from(("comm", "bcompat", "fcompat", "comm-f", "comm-b")))
def test_controlled_runs_show_no_violation(seed, alg):
    assert find_violation(sample_run(seed, alg)) is None
