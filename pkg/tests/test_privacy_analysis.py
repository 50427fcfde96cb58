import math
from fractions import Fraction

import numpy as np
import pytest

from contdp.core_protocol import (
    ACK,
    Adversary,
    HALT,
    Kind,
    PrivacyParams,
    ScriptedAdversary,
    Signal,
    answer,
    query,
    run_interaction,
)
from contdp.mechanisms import QSTAR, LeakyHistogram, NoiseSource, default_registry, hss_histogram, m_delta, rr_with_secret
from contdp.privacy_analysis import (
    DiscretePMF,
    EnumerationBudgetExceeded,
    a_delta,
    check_structural_properties,
    composition_check,
    enumerate_views,
    filter_eval,
    histogram_child_relation,
    hockey_stick_delta,
    improved_basic,
    paired_runs,
    parallel_stack,
    reveals_bit,
    run_distinguishing_game,
    tv_distance,
    wilson_interval,
)
from contdp.verification import budget_filter, product_filter

LN3 = math.log(3)
REG = default_registry()


class Bouncer(Adversary):
    """Asks q* and adapts its second message to the first answer."""

    def initial_state(self):
        return 0

    def _transitions(self, state, msg):
        if state == 0:
            return [(1, 1, query(0))]
        if state == 1:
            return [(1, 2, query(1 if msg == answer(Signal.TOP) else 0))]
        return [(1, 3, HALT)]


class Coin(Adversary):
    def _transitions(self, state, msg):
        return [(0.5, state, query(0)), (0.5, state, query(1))]


class FixedGuess(Adversary):
    def initial_state(self):
        return "start"

    def _transitions(self, state, msg):
        return [(1, "done", HALT)]

    def guess(self, state):
        return 1


class Silent(Adversary):
    def _transitions(self, state, msg):
        return [(1, state, HALT)]


def rr_views(eps, delta, b):
    return enumerate_views(ScriptedAdversary([QSTAR]), rr_with_secret(PrivacyParams(eps, delta), b), 2)


def product_views(eps, delta, k, b):
    one = rr_views(eps, delta, b)
    out = one
    for _ in range(k - 1):
        out = out.product(one)
    return out


def test_enumerate_rr_example():
    v = rr_views(LN3, 0.1, 0)
    assert sorted(round(float(p), 12) for p in v.mass.values()) == [0.1, 0.225, 0.675]
    assert v.stats["views"] == 3


def test_enumerate_immediate_halt():
    v = enumerate_views(ScriptedAdversary([]), m_delta(0.5), 4)
    assert v.support == ((HALT,),)


def test_enumerate_adaptive_m_delta():
    v = enumerate_views(Bouncer(), m_delta(Fraction(1, 2)), 3)
    assert sorted(v.mass.values()) == [Fraction(1, 4), Fraction(1, 4), Fraction(1, 2)]


def test_enumeration_budget_and_determinism_checks():
    with pytest.raises(EnumerationBudgetExceeded) as info:
        enumerate_views(a_delta(0.5, 6), parallel_stack(0, 0.5, REG), 30, node_budget=10)
    assert info.value.nodes == 11
    with pytest.raises(ValueError):
        enumerate_views(Coin(), m_delta(0.5), 2)


def test_pmf_validation():
    with pytest.raises(ValueError):
        DiscretePMF({"a": 0.5})
    with pytest.raises(ValueError):
        DiscretePMF({"a": Fraction(3, 2), "b": Fraction(-1, 2)})
    with pytest.raises(ValueError):
        hockey_stick_delta(DiscretePMF({"a": 1}, universe="ab"), DiscretePMF({"a": 1}, universe="abc"))


def test_hockey_stick_examples():
    p = DiscretePMF({"x": 0.3, "y": 0.7})
    for eps in (0, 0.5, 3):
        assert hockey_stick_delta(p, p, eps) == 0
    assert abs(hockey_stick_delta(rr_views(LN3, 0.1, 0), rr_views(LN3, 0.1, 1), LN3) - 0.1) <= 1e-12
    assert abs(hockey_stick_delta(product_views(0, 0.2, 3, 0), product_views(0, 0.2, 3, 1), 0) - 0.488) <= 1e-12


def test_tv_examples():
    p = DiscretePMF({"x": 0.3, "y": 0.7})
    assert tv_distance(p, p) == 0
    assert tv_distance(DiscretePMF({"x": 1}), DiscretePMF({"y": 1})) == 1
    assert abs(tv_distance(rr_views(0, 0.3, 0), rr_views(0, 0.3, 1)) - 0.3) <= 1e-12


def random_pmf(rng, n, zero_some=True):
    w = rng.dirichlet(np.ones(n))
    if zero_some:
        w[rng.random(n) < 0.2] = 0
        if w.sum() == 0:
            w[0] = 1
    w = w / w.sum()
    return DiscretePMF({i: float(x) for i, x in enumerate(w)})


def test_hockey_stick_shape_properties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p0, p1 = random_pmf(rng, 6), random_pmf(rng, 6)
        values = [hockey_stick_delta(p0, p1, e) for e in np.linspace(0, 4, 21)]
        assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))
        assert abs(values[0] - tv_distance(p0, p1)) <= 1e-12
        # zero at every epsilon exactly when the laws coincide
        assert (max(values) == 0) == (p0.max_abs_diff(p1) == 0)
        assert all(v == 0 for v in (hockey_stick_delta(p0, p0, e) for e in (0, 1, 4)))


def test_data_processing_over_random_channels():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n, m = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        p0, p1 = random_pmf(rng, n), random_pmf(rng, n)
        channel = rng.dirichlet(np.ones(m), size=n)

        def push(p):
            out = np.zeros(m)
            for i, w in p.mass.items():
                out += w * channel[i]
            return DiscretePMF({j: float(x) for j, x in enumerate(out)})

        for eps in (0, 0.3, 1.0, 2.5):
            assert hockey_stick_delta(push(p0), push(p1), eps) <= hockey_stick_delta(p0, p1, eps) + 1e-12


def test_improved_basic_examples():
    got = improved_basic([PrivacyParams(0.5, 0.1), PrivacyParams(0.5, 0.2)])
    assert got.epsilon == 1.0 and abs(got.delta - 0.28) <= 1e-15
    assert improved_basic([]).key() == (0, 0)
    assert improved_basic([PrivacyParams(0.2, 0), PrivacyParams(0.3, 0)]).delta == 0
    rng = np.random.default_rng(0)
    for _ in range(20):
        ds = rng.random(4) * 0.3
        assert improved_basic([PrivacyParams(0, d) for d in ds]).delta <= ds.sum() + 1e-15


def test_filter_eval_examples():
    assert filter_eval(budget_filter(1, 0.1), [])
    assert not filter_eval(budget_filter(1, 0.1), [PrivacyParams(0.6, 0.05), PrivacyParams(0.5, 0.0)])
    assert filter_eval(product_filter(0.28), [PrivacyParams(0, 0.1), PrivacyParams(0, 0.2)])


def test_fixed_guess_game_is_a_coin_flip():
    game = run_distinguishing_game(FixedGuess(), lambda b: rr_with_secret(PrivacyParams(0, 0), b), 4000, seed=3)
    assert game.ci[0] <= 0.5 <= game.ci[1]


def test_game_needs_a_guess():
    with pytest.raises(ValueError):
        run_distinguishing_game(Silent(), lambda b: m_delta(0.5), 5, seed=0)


def test_full_exposure_game_always_wins():
    game = run_distinguishing_game(a_delta(1, 3), lambda b: parallel_stack(b, 1, REG), 500, seed=1)
    assert game.success_rate == 1.0
    assert len(game.transcripts_sample) == 3


def test_a_delta_examples():
    t = run_interaction(a_delta(1, 3), parallel_stack(1, 1, REG), 0)
    assert a_delta(1, 3).guess(t.adversary_state) == 1
    assert sum(1 for m in t.answers() if m == ACK) == 1
    t = run_interaction(a_delta(0.5, 0), parallel_stack(1, 0.5, REG), 0)
    assert t.view() == (HALT,)
    assert a_delta(0.5, 0).guess(t.adversary_state) == 0


def test_a_delta_expected_creations_is_inverse_delta():
    delta, n = 0.25, 4000
    adv = a_delta(delta, 500)
    stack = parallel_stack(0, delta, REG)
    counts = np.array([sum(1 for m in run_interaction(adv, stack, s).answers() if m == ACK) for s in range(n)])
    se = math.sqrt((1 - delta) / delta**2 / n)
    assert abs(counts.mean() - 1 / delta) <= 5 * se


@pytest.mark.parametrize("ell", [1, 2, 3, 4])
def test_parallel_lower_bound_exact(ell):
    delta = Fraction(1, 3)
    views = [enumerate_views(a_delta(delta, ell), parallel_stack(b, delta, REG), 4 * ell + 2) for b in (0, 1)]
    for b, v in enumerate(views):
        assert v.event(reveals_bit) == 1 - (1 - delta) ** ell
        revealing = [k for k in v.support if reveals_bit(k)]
        assert all([m for m in k if m.kind is Kind.ANSWER][-1] == answer(b) for k in revealing)
    assert not {k for k in views[0].support if reveals_bit(k)} & {k for k in views[1].support if reveals_bit(k)}
    assert hockey_stick_delta(views[0], views[1], 0) == 1 - (1 - delta) ** ell


def test_composition_one_and_zero_children():
    one = composition_check([PrivacyParams(0.5, 0.1)], REG)
    assert abs(one.delta_measured - 0.1) <= 1e-12
    zero = composition_check([], REG)
    assert zero.delta_measured == 0 and zero.bound == 0


def test_wilson_interval_contains_rate():
    lo, hi = wilson_interval(937, 1000)
    assert lo < 0.937 < hi


# ---- structural checks


def neighbors(rng, d, T):
    s0 = [tuple(int(v) for v in rng.integers(0, 2, d)) for _ in range(T)]
    s1 = list(s0)
    s1[int(rng.integers(T))] = tuple(int(v) for v in rng.integers(0, 2, d))
    return s0, s1


def test_structural_identical_streams():
    rel = histogram_child_relation(REG)
    stream = [(1, 0), (1, 1)] * 10
    factory = lambda replay=None: hss_histogram(2.0, "max", 0.1, "one", "zero", 2, 20, registry=REG, replay=replay)  # noqa: E731
    rep = check_structural_properties(paired_runs(factory, stream, stream, 4), rel, REG)
    assert rep.ok and rep.touched == ()


def test_structural_neighboring_streams_small_schedules():
    rel = histogram_child_relation(REG)
    rng = np.random.default_rng(12)
    for i in range(40):
        d, T = int(rng.integers(1, 5)), int(rng.integers(1, 40))
        s0, s1 = neighbors(rng, d, T)
        factory = lambda replay=None: hss_histogram(1.0, "max", 0.1, "one", "zero", d, T, registry=REG, replay=replay)  # noqa: E731
        rep = check_structural_properties(paired_runs(factory, s0, s1, i), rel, REG)
        assert rep.ok, rep
        assert rep.destination_witness is None and rep.response_witness is None and rep.mapping_witness is None


def test_structural_violator_carries_witness():
    rel = histogram_child_relation(REG)
    s0 = [(1,), (0,), (0,), (0,)]
    s1 = [(0,), (0,), (0,), (0,)]
    factory = lambda replay=None: LeakyHistogram(1.0, "max", 0.1, "default", "zero", 1, 4, registry=REG,  # noqa: E731
                                                 noise=NoiseSource.zero(), replay=replay)
    rep = check_structural_properties(paired_runs(factory, s0, s1, 0), rel, REG)
    assert not rep.response_ok
    assert rep.response_witness.step == 1
    assert rep.as_dict()["response_witness"]["step"] == 1


def test_unequal_event_counts_are_destination_violations():
    rel = histogram_child_relation(REG)
    factory = lambda replay=None: hss_histogram(1.0, "max", 0.1, "one", "zero", 1, 6, registry=REG,  # noqa: E731
                                                noise=NoiseSource.zero(), replay=replay)
    first = paired_runs(factory, [(1,)] * 6, [(1,)] * 6, 0)[0]
    shorter = paired_runs(factory, [(1,)] * 3, [(1,)] * 3, 0)[0]
    rep = check_structural_properties((first, shorter), rel, REG)
    assert not rep.destination_ok and rep.destination_witness is not None
