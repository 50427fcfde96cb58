import math
from fractions import Fraction

import numpy as np
import pytest

from contdp.core_protocol import (
    ACK,
    HALT,
    PrivacyParams,
    ScriptedAdversary,
    Signal,
    answer,
    create,
    query,
    run_interaction,
)
from contdp.mechanisms import (
    QSTAR,
    SCHEDULES,
    Flag,
    LeakyHistogram,
    NoiseSource,
    QUERIES,
    RrOutcome,
    binary_counter,
    d_counter,
    default_registry,
    ext_con_comp,
    hss_histogram,
    irr,
    laplace_int,
    m_delta,
    round_half_up,
    rr,
    rr_with_secret,
    svt,
)
from contdp.privacy_analysis import enumerate_views, rr_creation, run_instrumented, sample_views

from helpers import flushed_reference, within_standard_errors

LN3 = math.log(3)


def outcome_pmf(mech, bit):
    return {a.payload: p for p, _, a in mech.transitions(mech.initial_state(), query(bit))}


def test_rr_pmf_example():
    law = outcome_pmf(rr(PrivacyParams(LN3, 0.1)), 0)
    expected = {RrOutcome(Flag.EXPOSED, 0): 0.1, RrOutcome(Flag.PRIVATE, 0): 0.675, RrOutcome(Flag.PRIVATE, 1): 0.225}
    assert law.keys() == expected.keys()
    for k, v in expected.items():
        assert abs(law[k] - v) <= 1e-12


def test_rr_degenerate_parameters():
    assert outcome_pmf(rr(PrivacyParams(LN3, 1.0)), 1) == {RrOutcome(Flag.EXPOSED, 1): 1.0}
    for b in (0, 1):
        assert outcome_pmf(rr(PrivacyParams(0, 0)), b) == {RrOutcome(Flag.PRIVATE, 0): 0.5,
                                                           RrOutcome(Flag.PRIVATE, 1): 0.5}


def test_rr_halts_on_second_input_and_non_bits():
    mech = rr(PrivacyParams(1.0, 0.2))
    assert [(p, a) for p, _, a in mech.transitions(mech.initial_state(), query(2))] == [(1, HALT)]
    views = enumerate_views(ScriptedAdversary([query(0), query(0)]), mech, 3)
    assert all(v[-1] == HALT and len(v) == 4 for v in views.support)


def irr_joint(params, b):
    views = enumerate_views(ScriptedAdversary([QSTAR, QSTAR]), irr(params, b), 2)
    return {RrOutcome(v[1].payload, v[3].payload): p for v, p in views.mass.items()}


def test_irr_matches_rr_float():
    p = PrivacyParams(LN3, 0.1)
    for b in (0, 1):
        joint, law = irr_joint(p, b), outcome_pmf(rr(p), b)
        assert joint.keys() == law.keys()
        assert all(abs(joint[k] - law[k]) <= 1e-12 for k in law)


def test_irr_flag_and_exposed_bit():
    first = irr(PrivacyParams(1.0, 0)).transitions(irr(PrivacyParams(1.0, 0)).initial_state(), QSTAR)
    assert [(p, a) for p, _, a in first] == [(1, answer(Flag.PRIVATE))]
    mech = irr(PrivacyParams(1.0, 0.5), secret=1)
    s = next(s for p, s, a in mech.transitions(mech.initial_state(), QSTAR) if a == answer(Flag.EXPOSED))
    assert [(p, a) for p, _, a in mech.transitions(s, QSTAR)] == [(1, answer(1))]


def test_irr_halts_on_third_and_unknown_queries():
    mech = irr(PrivacyParams(1.0, 0.5))
    assert mech.transitions(mech.initial_state(), query("other"))[0][2] == HALT
    views = enumerate_views(ScriptedAdversary([QSTAR] * 3), mech, 3)
    assert all(v[-1] == HALT and len(v) == 6 for v in views.support)


def test_enumerable_steps_sum_to_one():
    mechs = [rr(PrivacyParams(LN3, 0.1)), irr(PrivacyParams(2.0, 0.3)), m_delta(0.3),
             rr(PrivacyParams.exact(3, Fraction(1, 10)))]
    for mech in mechs:
        frontier = [mech.initial_state()]
        for _ in range(3):
            nxt = []
            for s in frontier:
                for q in (QSTAR, query(0), query(1)):
                    ts = mech.transitions(s, q)
                    assert abs(float(sum(p for p, _, _ in ts)) - 1) <= 1e-12
                    nxt.extend(s2 for _, s2, _ in ts)
            frontier = nxt


@pytest.mark.parametrize("case", ["rr", "irr", "m_delta"])
def test_sampling_matches_enumeration(case):
    n = 10**5
    if case == "rr":
        adv, mech = ScriptedAdversary([QSTAR]), rr_with_secret(PrivacyParams(LN3, 0.1), 1)
    elif case == "irr":
        adv, mech = ScriptedAdversary([QSTAR, QSTAR]), irr(PrivacyParams(0.7, 0.25), 1)
    else:
        adv, mech = ScriptedAdversary([query(1), query(0)]), m_delta(0.35)
    pmf = enumerate_views(adv, mech, 4)
    counts = sample_views(adv, mech, 4, n, seed=17)
    assert within_standard_errors(counts, pmf, n) == []


def test_laplace_zero_and_scripted_noise():
    mech = laplace_int(1.0, noise=NoiseSource.zero())
    assert mech.sample(mech.initial_state(), query(7), None)[1] == answer(7)
    mech = laplace_int(1.0, noise=NoiseSource.scripted([0.6]))
    state, reply = mech.sample(mech.initial_state(), query(0), None)
    assert reply == answer(1)
    assert mech.sample(state, query(0), None)[1] == HALT


def test_scripted_noise_errors_when_exhausted():
    noise = NoiseSource.scripted([0.1])
    noise.laplace(1.0, None)
    with pytest.raises(RuntimeError):
        noise.laplace(1.0, None)


def test_rounding_ties_go_up():
    assert [round_half_up(v) for v in (0.5, -0.5, 1.5, -1.5, 0.49)] == [1, 0, 2, -1, 0]


def test_laplace_mean_is_zero():
    n, eps = 10**5, 0.8
    counts = sample_views(ScriptedAdversary([query(0)]), laplace_int(eps), 2, n, seed=3)
    values = np.repeat([v[1].payload for v in counts], list(counts.values()))
    se = values.std(ddof=1) / math.sqrt(n)
    assert abs(values.mean()) <= 5 * se
    assert np.issubdtype(values.dtype, np.integer)


def test_svt_zero_noise_examples():
    mech = svt(1.0, "sum", (0,), NoiseSource.zero())
    state, reply = mech.sample(mech.initial_state(), query(((1,), 0.5)), None)
    assert reply == answer(Signal.TOP)
    assert mech.sample(state, query(((0,), 0.5)), None)[1] == HALT
    mech = svt(1.0, "sum", (0,), NoiseSource.zero())
    assert mech.sample(mech.initial_state(), query(((1,), 1.5)), None)[1] == answer(Signal.BOTTOM)


def test_svt_dimension_mismatch_halts():
    mech = svt(1.0, "max", (0, 0), NoiseSource.zero())
    assert mech.sample(mech.initial_state(), query(((1,), 0.5)), None)[1] == HALT


def test_svt_rejects_queries_that_are_not_one_sensitive():
    with pytest.raises(ValueError):
        svt(1.0, "sum", (0, 0))


def test_svt_halts_after_first_top_fuzz():
    rng = np.random.default_rng(99)
    fires = 0
    for seed in range(1000):
        d = int(rng.integers(1, 4))
        stream = [query((tuple(int(v) for v in rng.integers(0, 2, d)), float(rng.integers(0, 6)))) for _ in range(12)]
        t = run_interaction(ScriptedAdversary(stream), svt(1.0, "max", (0,) * d), seed)
        answers = t.answers()
        fired = [i for i, a in enumerate(answers) if a == answer(Signal.TOP)]
        if fired:
            fires += 1
            assert len(fired) == 1
            assert all(a == HALT for a in answers[fired[0] + 1:])
            assert len(answers) == min(fired[0] + 2, len(stream))
    assert fires > 100


def test_binary_counter_zero_noise_prefix_sums():
    mech = binary_counter(1.0, 8, NoiseSource.zero())
    t = run_interaction(ScriptedAdversary([query(1), query(0), query(1)]), mech, 0)
    assert [a.payload for a in t.answers()[:3]] == [1, 1, 2]
    rng = np.random.default_rng(4)
    for _ in range(20):
        T = int(rng.integers(1, 40))
        xs = [int(v) for v in rng.integers(0, 2, T)]
        t = run_interaction(ScriptedAdversary(map(query, xs)), binary_counter(1.0, T, NoiseSource.zero()), 0)
        assert [a.payload for a in t.answers()[:T]] == list(np.cumsum(xs))


def test_d_counter_zero_noise():
    mech = d_counter(1.0, 2, 4, noise=NoiseSource.zero())
    t = run_interaction(ScriptedAdversary([query((1, 0)), query((0, 1))]), mech, 0)
    assert [a.payload for a in t.answers()[:2]] == [(1, 0), (1, 1)]


def test_counters_seeded_integer_outputs_and_horizon():
    T = 20
    t = run_interaction(ScriptedAdversary([query((1, 1, 0))] * (T + 1)), d_counter(0.5, 3, T), 8)
    outs = t.answers()
    assert all(isinstance(v, int) for a in outs[:T] for v in a.payload)
    assert outs[T] == HALT


def test_counter_noise_is_shared_across_overlapping_prefixes():
    # a block's noise is drawn once: the prefix of length 2 and 3 share the level-1 block
    mech = binary_counter(1.0, 4)
    rng = np.random.default_rng(0)
    state = mech.initial_state()
    mech.release(state, 0, rng)
    two = mech.release(state, 0, rng)
    three = mech.release(state, 0, rng)
    assert three - two == state["block_noise"][(0, 2)]


def test_router_examples():
    reg = default_registry()
    router = ext_con_comp(reg)
    alpha = rr_creation(PrivacyParams(LN3, 0.1))
    state, reply = router.transitions(router.initial_state(), create(alpha))[0][1:]
    assert reply == ACK
    assert router.transitions(router.initial_state(), query((0, 1)))[0][2] == HALT
    law = {a.payload: p for p, _, a in router.transitions(state, query((0, 1)))}
    assert law == outcome_pmf(rr(PrivacyParams(LN3, 0.1)), 0)
    assert router.transitions(state, query((0, 2)))[0][2] == HALT


def test_router_rejects_uncertified_creation():
    router = ext_con_comp(default_registry())
    bad = rr_creation(PrivacyParams(LN3, 0.1)).__class__("rr", None, PrivacyParams(LN3, 0.1), "all")
    assert router.transitions(router.initial_state(), create(bad))[0][2] == HALT


def test_m_delta_examples():
    mech = m_delta(0.5)
    assert mech.transitions((Signal.BOTTOM, 1), query(1)) == [(1, (Signal.BOTTOM, 2), answer(1))]
    first = m_delta(1).transitions(m_delta(1).initial_state(), query(0))
    assert [(p, a) for p, _, a in first] == [(1, answer(Signal.BOTTOM))]
    d = Fraction(1, 3)
    views = enumerate_views(ScriptedAdversary([query(0), query(0)]), m_delta(d), 2)
    law = {tuple(m.payload for m in v[1::2]): p for v, p in views.mass.items()}
    assert law == {(Signal.TOP, Signal.TOP): (1 - d) ** 2, (Signal.TOP, Signal.BOTTOM): (1 - d) * d,
                   (Signal.BOTTOM, 0): d}
    third = enumerate_views(ScriptedAdversary([query(0)] * 3), m_delta(d), 3)
    assert all(v[-1] == HALT for v in third.support)


# ---- monotone histogram


def zero_hss(d, T, q="sum", gamma="one", xi="zero", cls=None, **kw):
    build = cls or hss_histogram
    args = (2.0, q, 0.1, gamma, xi, d, T)
    if cls is not None:
        return cls(*args, noise=NoiseSource.zero(), **kw)
    return build(*args, noise=NoiseSource.zero(), **kw)


def test_hss_hand_traces():
    assert run_instrumented(zero_hss(1, 2), [(1,), (1,)], 0).outputs == (0, 2)
    stream = [(1, 0), (1, 1), (0, 1), (1, 1)]
    assert run_instrumented(zero_hss(2, 4, q="max"), stream, 0).outputs == (0, 2, 2, 3)
    assert run_instrumented(zero_hss(3, 10, q="max"), [(0, 0, 0)] * 10, 0).outputs == (0,) * 10


def test_hss_matches_flushed_reference_on_random_streams():
    rng = np.random.default_rng(21)
    for _ in range(60):
        d, T = int(rng.integers(1, 4)), int(rng.integers(1, 40))
        q_id = "sum" if d == 1 else str(rng.choice(["max", "first"]))
        g_id, x_id = (str(v) for v in rng.choice(list(SCHEDULES), 2))
        stream = [tuple(int(v) for v in rng.integers(0, 2, d)) for _ in range(T)]
        mech = hss_histogram(1.5, q_id, 0.2, g_id, x_id, d, T, noise=NoiseSource.zero())
        gamma = lambda t, j: SCHEDULES[g_id](t, j, 0.2, 1.5, d)  # noqa: E731
        xi = lambda t, j: SCHEDULES[x_id](t, j, 0.2, 1.5, d)  # noqa: E731
        assert list(run_instrumented(mech, stream, 0).outputs) == flushed_reference(stream, QUERIES[q_id].evaluate, gamma, xi)


def test_hss_zero_noise_outputs_are_monotone():
    rng = np.random.default_rng(5)
    for _ in range(50):
        d, T = int(rng.integers(1, 5)), int(rng.integers(1, 65))
        stream = [tuple(int(v) for v in rng.integers(0, 2, d)) for _ in range(T)]
        out = run_instrumented(zero_hss(d, T, q="max"), stream, 0).outputs
        assert all(a <= b for a, b in zip(out, out[1:]))


def test_hss_child_budget_split():
    mech = zero_hss(1, 6)
    trace = run_instrumented(mech, [(1,)] * 6, 0)
    kinds = {(e.creation.mech_id, e.creation.params.epsilon, e.creation.init[0])
             for e in trace.events if e.kind == "create"}
    assert kinds == {("d_counter", 2 / 3, 2 / 3), ("svt", 2 / 3, 2 / 6), ("laplace_int", 2 / 3, 2 / 3)}


def active_children(events):
    """Largest number of simultaneously un-halted SVT and Laplace children."""
    live, kinds, worst = set(), {}, {"svt": 0, "laplace_int": 0}
    for e in events:
        if e.kind == "create":
            kinds[e.child] = e.creation.mech_id
            live.add(e.child)
        elif kinds[e.child] == "laplace_int" or e.reply == answer(Signal.TOP) or e.reply == HALT:
            live.discard(e.child)
        for k in worst:
            worst[k] = max(worst[k], sum(1 for c in live if kinds[c] == k))
    return worst


def test_hss_at_most_one_svt_and_laplace_active():
    rng = np.random.default_rng(8)
    for seed in range(40):
        d, T = int(rng.integers(1, 5)), int(rng.integers(1, 65))
        stream = [tuple(int(v) for v in rng.integers(0, 2, d)) for _ in range(T)]
        mech = hss_histogram(2.0, "max", 0.1, "one", "zero", d, T)
        worst = active_children(run_instrumented(mech, stream, seed).events)
        assert worst["svt"] <= 1 and worst["laplace_int"] <= 1


def test_hss_rejects_non_binary_input():
    mech = zero_hss(2, 4, q="max")
    assert mech.sample(mech.initial_state(), query((2, 0)), None)[1] == HALT
    with pytest.raises(ValueError):
        zero_hss(2, 4, q="sum")


def test_leaky_variant_differs_only_with_pending_increments():
    stream = [(1,), (0,), (1,), (1,)]
    honest = run_instrumented(zero_hss(1, 4, gamma="one"), stream, 0).outputs
    leaky = run_instrumented(zero_hss(1, 4, gamma="one", cls=LeakyHistogram), stream, 0).outputs
    assert honest != leaky


def test_registry_ids_are_stable():
    reg = default_registry()
    assert set(reg.constructors) == {"rr", "irr", "laplace_int", "svt", "binary_counter", "d_counter",
                                     "ext_con_comp", "m_delta", "hss"}
