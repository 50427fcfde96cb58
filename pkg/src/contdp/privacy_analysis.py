"""Exact view enumeration, divergences, accountants, the counterexample game and
structural checks for composite mechanisms."""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from statsmodels.stats.proportion import proportion_confint

from .core_protocol import (
    HALT,
    Adversary,
    Kind,
    Mechanism,
    Message,
    PrivacyParams,
    ScriptedAdversary,
    Signal,
    answer,
    chain,
    compose_post,
    create,
    pair,
    party_rng,
    query,
    run_interaction,
)
from .mechanisms import ChildEvent, Flag, RrOutcome, ext_con_comp
from .verification import (
    ACCEPT,
    CreationQuery,
    Filter,
    Registry,
    Verdict,
    VerificationFn,
    make_identifier,
    make_verifier,
    scan_suitable,
    vf_fixed_mechs,
    vf_parallel_sparse,
)


class DiscretePMF:
    """Finite probability mass function; masses may be floats or Fractions."""

    def __init__(self, mass: Mapping[Hashable, Any], universe: Optional[Iterable[Hashable]] = None,
                 check: bool = True, tol: float = 1e-12):
        self.mass: Dict[Hashable, Any] = {k: v for k, v in mass.items() if v != 0}
        self.universe = frozenset(universe) if universe is not None else None
        self.stats: Dict[str, int] = {}
        if check:
            for k, v in self.mass.items():
                if v < 0:
                    raise ValueError(f"negative mass {v} at {k!r}")
            total = self.total()
            exact_total = isinstance(total, (int, Fraction)) and all(isinstance(v, (int, Fraction)) for v in self.mass.values())
            if (exact_total and total != 1) or (not exact_total and abs(float(total) - 1) > tol):
                raise ValueError(f"masses sum to {total}, not 1")
        if self.universe is not None and not set(self.mass) <= self.universe:
            raise ValueError("support escapes the declared universe")

    @property
    def support(self) -> Tuple[Hashable, ...]:
        return tuple(self.mass)

    def total(self):
        return sum(self.mass.values(), 0)

    def prob(self, outcome: Hashable):
        return self.mass.get(outcome, 0)

    def event(self, predicate: Callable[[Hashable], bool]):
        return sum((v for k, v in self.mass.items() if predicate(k)), 0)

    def push(self, fn: Callable[[Hashable], Hashable]) -> "DiscretePMF":
        out: Dict[Hashable, Any] = {}
        for k, v in self.mass.items():
            key = fn(k)
            out[key] = out.get(key, 0) + v
        return DiscretePMF(out, check=False)

    def product(self, other: "DiscretePMF") -> "DiscretePMF":
        return DiscretePMF({(a, b): p * q for a, p in self.mass.items() for b, q in other.mass.items()}, check=False)

    def max_abs_diff(self, other: "DiscretePMF") -> float:
        keys = set(self.mass) | set(other.mass)
        return max((abs(float(self.prob(k)) - float(other.prob(k))) for k in keys), default=0.0)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DiscretePMF) and self.mass == other.mass

    def __repr__(self) -> str:
        return f"DiscretePMF({self.mass!r})"


def _same_universe(p0: DiscretePMF, p1: DiscretePMF) -> None:
    if p0.universe is not None and p1.universe is not None and p0.universe != p1.universe:
        raise ValueError("distributions live on different outcome universes")


def _outcomes(p0: DiscretePMF, p1: DiscretePMF) -> List[Hashable]:
    _same_universe(p0, p1)
    seen = dict.fromkeys(p0.mass)
    seen.update(dict.fromkeys(p1.mass))
    return list(seen)


def hockey_stick_delta(p0: DiscretePMF, p1: DiscretePMF, epsilon: float = 0.0, growth: Any = None) -> Any:
    """Smallest delta making the two laws (epsilon, delta)-indistinguishable in both directions."""
    if growth is None:
        growth = 1 if epsilon == 0 else math.exp(epsilon)
    _same_universe(p0, p1)
    forward = backward = 0
    other = p1.mass
    for k, a in p0.mass.items():
        b = other.get(k, 0)
        forward += max(0, a - growth * b)
        backward += max(0, b - growth * a)
    for k, b in other.items():
        if k not in p0.mass:
            backward += b
    return max(forward, backward)


def tv_distance(p0: DiscretePMF, p1: DiscretePMF) -> Any:
    keys = _outcomes(p0, p1)
    return sum((abs(p0.prob(k) - p1.prob(k)) for k in keys), 0) / 2


def improved_basic(params: Sequence[PrivacyParams]) -> PrivacyParams:
    eps = sum((p.epsilon for p in params), 0)
    survive = 1
    for p in params:
        survive = survive * (1 - p.delta)
    return PrivacyParams(eps, 1 - survive)


def filter_eval(filt: Filter, sigma: Sequence[PrivacyParams]) -> bool:
    return bool(filt.evaluate(list(sigma)))


# ---------------------------------------------------------------- exhaustive views


class EnumerationBudgetExceeded(RuntimeError):
    def __init__(self, nodes: int, leaves: int):
        super().__init__(f"view enumeration exceeded its node budget ({nodes} nodes, {leaves} complete views)")
        self.nodes = nodes
        self.leaves = leaves


def enumerate_views(adversary: Mechanism, mech: Mechanism, horizon: int, node_budget: int = 10**7,
                    mech_state: Any = None) -> DiscretePMF:
    """Exact law of the message transcript between a deterministic adversary and ``mech``.

    A run ends when either side halts or after ``horizon`` adversary messages.
    """
    start_m = mech.initial_state() if mech_state is None else mech_state
    stack = [(1, adversary.initial_state(), start_m, (), None, 0)]
    mass: Dict[Tuple[Message, ...], Any] = {}
    nodes = 0
    while stack:
        p, a_state, m_state, view, incoming, rounds = stack.pop()
        nodes += 1
        if nodes > node_budget:
            raise EnumerationBudgetExceeded(nodes, len(mass))
        if rounds >= horizon:
            mass[view] = mass.get(view, 0) + p
            continue
        moves = adversary.transitions(a_state, incoming)
        if len(moves) != 1:
            raise ValueError("the enumeration oracle needs a deterministic adversary")
        _, a_next, out = moves[0]
        if out.kind is Kind.HALT:
            key = view + (out,)
            mass[key] = mass.get(key, 0) + p
            continue
        for q, m_next, reply in mech.transitions(m_state, out):
            key = view + (out, reply)
            if reply.kind is Kind.HALT:
                mass[key] = mass.get(key, 0) + p * q
            else:
                stack.append((p * q, a_next, m_next, key, reply, rounds + 1))
    pmf = DiscretePMF(mass)
    pmf.stats = {"nodes": nodes, "views": len(mass)}
    return pmf


class _Stepper:
    """Samples one machine's steps, reusing enumerated transition laws for hashable states."""

    def __init__(self, machine: Mechanism, rng: np.random.Generator, block: int = 4096):
        self.machine = machine
        self.rng = rng
        self.cache: Dict[Any, Tuple[List[float], list]] = {}
        self.block = block
        self.uniforms: List[float] = []

    def _uniform(self) -> float:
        if not self.uniforms:
            self.uniforms = self.rng.random(self.block).tolist()
        return self.uniforms.pop()

    def step(self, state, msg):
        if not self.machine.enumerable:
            return self.machine.sample(state, msg, self.rng)
        try:
            cum, options = self.cache[(state, msg)]
        except KeyError:
            options = self.machine.transitions(state, msg)
            cum = list(itertools.accumulate(float(p) for p, _, _ in options))
            self.cache[(state, msg)] = (cum, options)
        except TypeError:
            return self.machine.sample(state, msg, self.rng)
        if len(options) == 1:
            i = 0
        else:
            i = min(bisect.bisect_right(cum, self._uniform() * cum[-1]), len(options) - 1)
        return options[i][1], options[i][2]


def sample_views(adversary: Mechanism, mech: Mechanism, horizon: int, samples: int, seed: int) -> Dict[Tuple[Message, ...], int]:
    """Monte-Carlo counterpart of ``enumerate_views``: counts of sampled transcripts, same truncation rule."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, samples, horizon])))
    adv, mec = _Stepper(adversary, rng), _Stepper(mech, rng)
    counts: Dict[Tuple[Message, ...], int] = {}
    a_init, m_init = adversary.initial_state(), mech.initial_state()
    for _ in range(samples):
        a_state, m_state, view, incoming = a_init, m_init, (), None
        for _ in range(horizon):
            a_state, out = adv.step(a_state, incoming)
            view += (out,)
            if out.kind is Kind.HALT:
                break
            m_state, incoming = mec.step(m_state, out)
            view += (incoming,)
            if incoming.kind is Kind.HALT:
                break
        counts[view] = counts.get(view, 0) + 1
    return counts


# ---------------------------------------------------------------- counterexample game


class ParallelLeakAdversary(Adversary):
    """Keeps creating two-state mechanisms and probing them with identical bits until one falls
    into its echo state, then sends a differing bit pair and reports the echoed bit."""

    name = "a_delta"

    def __init__(self, delta: Any, max_mechs: int):
        if not 0 < delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        self.delta = delta
        self.max_mechs = max_mechs
        self.alpha = CreationQuery("m_delta", Signal.TOP, PrivacyParams(0, delta), "two_bits_one_change")
        self._creation = pair(create(self.alpha), create(self.alpha))

    def initial_state(self):
        return ("start", 0, None)

    def _transitions(self, state, msg):
        phase, made, guess = state
        if phase == "start":
            if self.max_mechs == 0:
                return [(1, ("done", 0, 0), HALT)]
            return [(1, ("created", 1, None), self._creation)]
        if phase == "created" and msg is not None and msg.kind is Kind.ACK:
            return [(1, ("probed", made, None), pair((0, made), (0, made)))]
        if phase == "probed" and msg == answer(Signal.TOP):
            if made < self.max_mechs:
                return [(1, ("created", made + 1, None), self._creation)]
            return [(1, ("done", made, 0), HALT)]
        if phase == "probed" and msg == answer(Signal.BOTTOM):
            return [(1, ("reveal", made, None), pair((0, made), (1, made)))]
        if phase == "reveal" and msg is not None and msg.kind is Kind.ANSWER and msg.payload in (0, 1):
            return [(1, ("done", made, msg.payload), HALT)]
        return [(1, ("done", made, 0 if guess is None else guess), HALT)]

    def guess(self, state):
        return state[2] if state[0] == "done" else None


def a_delta(delta: Any, max_mechs: int) -> ParallelLeakAdversary:
    return ParallelLeakAdversary(delta, max_mechs)


def parallel_stack(b: int, delta: Any, registry: Registry) -> Mechanism:
    """Verifier for one (0, delta) sparse slot, identifier b, and the composition router."""
    relay = chain(make_verifier(vf_parallel_sparse([PrivacyParams(0, delta)], registry)), make_identifier(b))
    return compose_post(relay, ext_con_comp(registry))


def reveals_bit(view: Tuple[Message, ...]) -> bool:
    return any(m.kind is Kind.ANSWER and m.payload in (0, 1) for m in view)


def wilson_interval(successes: int, trials: int, level: float = 0.99) -> Tuple[float, float]:
    lo, hi = proportion_confint(successes, trials, alpha=1 - level, method="wilson")
    return float(lo), float(hi)


@dataclass
class GameResult:
    success_rate: float
    ci: Tuple[float, float]
    successes: int
    trials: int
    transcripts_sample: List[Any] = field(default_factory=list)


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def run_distinguishing_game(adversary: Adversary, stack_builder: Callable[[int], Mechanism], trials: int,
                            seed: int, keep: int = 3) -> GameResult:
    stacks = {0: stack_builder(0), 1: stack_builder(1)}
    wins = 0
    sample = []
    for trial in range(trials):
        b = int(party_rng(seed, trial, 2).integers(2))
        transcript = run_interaction(adversary, stacks[b], trial_seed(seed, trial))
        guessed = adversary.guess(transcript.adversary_state)
        if guessed is None:
            raise ValueError("adversary finished without a final guess")
        wins += guessed == b
        if len(sample) < keep:
            sample.append({"b": b, "guess": guessed, "view": [repr(m) for m in transcript.view()]})
    return GameResult(wins / trials, wilson_interval(wins, trials), wins, trials, sample)


# ---------------------------------------------------------------- composition templates


BIT_PAIRS = ((0, 1), (1, 0))
RR_OUTCOMES = tuple(RrOutcome(f, b) for f in Flag for b in (0, 1))


class RoutedTemplate(Adversary):
    """Creates the children, sends a fixed pair to the first child in ``order`` and lets each
    later pair depend on the previous answer."""

    name = "template"

    def __init__(self, alphas: Sequence[CreationQuery], order: Sequence[int], first: Tuple[int, int],
                 follow: Sequence[Mapping[Any, Tuple[int, int]]]):
        self.alphas = tuple(alphas)
        self.order = tuple(order)
        self.first = first
        self.follow = tuple(follow)

    def initial_state(self):
        return 0

    def _transitions(self, step, msg):
        k = len(self.alphas)
        if step < k:
            return [(1, step + 1, pair(create(self.alphas[step]), create(self.alphas[step])))]
        i = step - k
        if i >= len(self.order):
            return [(1, step + 1, HALT)]
        child = self.order[i] + 1
        if i == 0:
            x0, x1 = self.first
        else:
            choice = self.follow[i - 1].get(msg.payload) if msg is not None else None
            if choice is None:
                return [(1, step + 1, HALT)]
            x0, x1 = choice
        return [(1, step + 1, pair((x0, child), (x1, child)))]


def routed_templates(alphas: Sequence[CreationQuery], limit: int = 200) -> Tuple[List[RoutedTemplate], bool]:
    """Bounded family of adaptive strategies; the flag tells whether ``limit`` cut it short."""
    k = len(alphas)
    if k == 0:
        return [RoutedTemplate((), (), (0, 0), ())], False
    maps = [dict(zip(RR_OUTCOMES, choice)) for choice in itertools.product(BIT_PAIRS, repeat=len(RR_OUTCOMES))]
    out: List[RoutedTemplate] = []
    for order in itertools.permutations(range(k)):
        for first in BIT_PAIRS:
            for follow in itertools.product(maps, repeat=k - 1):
                if len(out) >= limit:
                    return out, True
                out.append(RoutedTemplate(alphas, order, first, follow))
    return out, False


@dataclass
class CompositionReport:
    epsilon: float
    delta_measured: float
    bound: float
    strategies: int
    truncated: bool

    @property
    def margin(self) -> float:
        return self.bound - self.delta_measured


def rr_creation(params: PrivacyParams) -> CreationQuery:
    return CreationQuery("rr", None, params, "single_bit")


def composition_check(children: Sequence[PrivacyParams], registry: Registry, limit: int = 200) -> CompositionReport:
    alphas = [rr_creation(p) for p in children]
    fn = vf_fixed_mechs(alphas, registry)
    stacks = [compose_post(chain(make_verifier(fn), make_identifier(b)), ext_con_comp(registry)) for b in (0, 1)]
    templates, truncated = routed_templates(alphas, limit)
    eps = sum(p.epsilon for p in children)
    horizon = 2 * len(alphas) + 1
    worst = 0.0
    for adv in templates:
        views = [enumerate_views(adv, s, horizon) for s in stacks]
        worst = max(worst, float(hockey_stick_delta(views[0], views[1], eps)))
    return CompositionReport(eps, worst, float(improved_basic(children).delta), len(templates), truncated)


# ---------------------------------------------------------------- adaptive search on finite mechanisms


class DecisionTreeAdversary(Adversary):
    """Deterministic adversary whose next query is looked up from the answers seen so far."""

    name = "tree"

    def __init__(self, policy: Mapping[Tuple[Message, ...], Message], rounds: int):
        self.policy = dict(policy)
        self.rounds = rounds

    def initial_state(self):
        return ()

    def _transitions(self, seen, msg):
        if msg is not None:
            seen = seen + (msg,)
        if len(seen) >= self.rounds:
            return [(1, seen, HALT)]
        return [(1, seen, self.policy[seen])]


def decision_trees(queries: Sequence[Message], answers: Sequence[Message], rounds: int) -> Iterable[DecisionTreeAdversary]:
    histories = [h for t in range(rounds) for h in itertools.product(answers, repeat=t)]
    for choice in itertools.product(queries, repeat=len(histories)):
        yield DecisionTreeAdversary(dict(zip(histories, choice)), rounds)


def adaptive_delta(mech0: Mechanism, mech1: Mechanism, queries: Sequence[Message], answers: Sequence[Message],
                   rounds: int, epsilon: float) -> float:
    """Largest hockey-stick divergence over all deterministic adaptive query trees."""
    worst = 0.0
    for adv in decision_trees(queries, answers, rounds):
        worst = max(worst, float(hockey_stick_delta(enumerate_views(adv, mech0, rounds),
                                                    enumerate_views(adv, mech1, rounds), epsilon)))
    return worst


# ---------------------------------------------------------------- structural checks


@dataclass(frozen=True)
class Witness:
    step: int
    detail: str


@dataclass(frozen=True)
class StructuralReport:
    destination_ok: bool
    response_ok: bool
    mapping_ok: bool
    destination_witness: Optional[Witness] = None
    response_witness: Optional[Witness] = None
    mapping_witness: Optional[Witness] = None
    touched: Tuple[Tuple[str, int], ...] = ()

    @property
    def ok(self) -> bool:
        return self.destination_ok and self.response_ok and self.mapping_ok

    def as_dict(self) -> Dict[str, Any]:
        def w(x):
            return None if x is None else {"step": x.step, "detail": x.detail}

        return {
            "destination_ok": self.destination_ok, "response_ok": self.response_ok,
            "mapping_ok": self.mapping_ok, "destination_witness": w(self.destination_witness),
            "response_witness": w(self.response_witness), "mapping_witness": w(self.mapping_witness),
            "touched": dict(self.touched),
        }


@dataclass(frozen=True)
class InstrumentedTrace:
    stream: Tuple[Any, ...]
    outputs: Tuple[Any, ...]
    events: Tuple[ChildEvent, ...]
    divergence: Optional[int] = None


def run_instrumented(mech: Mechanism, stream: Sequence[Any], seed: int) -> InstrumentedTrace:
    transcript = run_interaction(ScriptedAdversary([query(x) for x in stream]), mech, seed)
    outputs = tuple(m.payload for m in transcript.answers() if m.kind is Kind.ANSWER)
    state = transcript.mechanism_state
    events = tuple(getattr(state, "log", ()))
    return InstrumentedTrace(tuple(stream), outputs, events, getattr(state, "divergence", None))


def paired_runs(factory: Callable[..., Mechanism], stream0: Sequence[Any], stream1: Sequence[Any],
                seed: int) -> Tuple[InstrumentedTrace, InstrumentedTrace]:
    """First run draws fresh noise; the second replays its child answers, fixing the decision variables."""
    first = run_instrumented(factory(replay=None), stream0, seed)
    second = run_instrumented(factory(replay=first.events), stream1, seed)
    return first, second


def histogram_child_relation(registry: Registry) -> VerificationFn:
    """Children's joint input relation: counters freely, at most one sparse vector and one noisy check."""

    def check(pairs):
        scan = scan_suitable(pairs, registry)
        if not scan.verdict:
            return scan.verdict
        kinds = [scan.creations[i].mech_id for i in scan.touched()]
        if any(k not in ("d_counter", "svt", "laplace_int") for k in kinds):
            return Verdict(False, "unexpected-child-touched")
        if kinds.count("svt") > 1:
            return Verdict(False, "two-sparse-vectors-touched")
        if kinds.count("laplace_int") > 1:
            return Verdict(False, "two-noisy-checks-touched")
        return ACCEPT

    return VerificationFn("histogram_children", check, (), "routed")


def _event_signature(ev: ChildEvent) -> Tuple[Any, ...]:
    return (ev.kind, ev.child, ev.creation)


def check_structural_properties(traces: Tuple[InstrumentedTrace, InstrumentedTrace],
                                relation: VerificationFn, registry: Optional[Registry] = None) -> StructuralReport:
    t0, t1 = traces
    dest_w = None
    n = min(len(t0.events), len(t1.events))
    for i in range(n):
        if _event_signature(t0.events[i]) != _event_signature(t1.events[i]):
            dest_w = Witness(t1.events[i].step, f"child event {i}: {_event_signature(t0.events[i])!r} vs "
                                                f"{_event_signature(t1.events[i])!r}")
            break
    if dest_w is None and len(t0.events) != len(t1.events):
        longer = t0.events if len(t0.events) > n else t1.events
        dest_w = Witness(longer[n].step, f"child event counts differ: {len(t0.events)} vs {len(t1.events)}")
    if dest_w is None and t1.divergence is not None:
        dest_w = Witness(t1.events[t1.divergence].step if t1.divergence < len(t1.events) else -1,
                         f"replay diverged at child event {t1.divergence}")

    resp_w = None
    for step, (a, b) in enumerate(zip(t0.outputs, t1.outputs), start=1):
        if a != b:
            resp_w = Witness(step, f"outputs {a!r} vs {b!r}")
            break
    if resp_w is None and len(t0.outputs) != len(t1.outputs):
        resp_w = Witness(min(len(t0.outputs), len(t1.outputs)) + 1, "output counts differ")

    map_w = None
    pairs = []
    for i in range(n):
        e0, e1 = t0.events[i], t1.events[i]
        if e0.kind == "create":
            pairs.append((create(e0.creation), create(e1.creation) if e1.creation is not None else query(None)))
        else:
            pairs.append((query((e0.message, e0.child + 1)), query((e1.message, e1.child + 1))))
        verdict = relation.explain(pairs)
        if not verdict:
            map_w = Witness(e1.step, f"child event {i}: {verdict.reason}")
            break

    touched: Dict[str, int] = {}
    if map_w is None and registry is not None:
        scan = scan_suitable(pairs, registry)
        for idx in scan.touched():
            kind = scan.creations[idx].mech_id
            touched[kind] = touched.get(kind, 0) + 1
    return StructuralReport(dest_w is None, resp_w is None, map_w is None, dest_w, resp_w, map_w,
                            tuple(sorted(touched.items())))

