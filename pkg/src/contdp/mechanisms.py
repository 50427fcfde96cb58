"""Concrete mechanisms: randomized response, its interactive form, noisy integer
release, sparse vector, tree counters, the composition router, the two-state
counterexample mechanism and the monotone histogram mechanism."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core_protocol import (
    ACK,
    HALT,
    Kind,
    Mechanism,
    Message,
    PrivacyParams,
    Signal,
    answer,
    query,
)
from .verification import CreationQuery, Registry, Verdict, VerificationFn


class Flag(enum.Enum):
    EXPOSED = "exposed"
    PRIVATE = "private"

    def __repr__(self) -> str:
        return self.value


@dataclass(frozen=True)
class RrOutcome:
    flag: Flag
    bit: int

    def __repr__(self) -> str:
        return f"({self.flag.value},{self.bit})"


QSTAR = query("q*")


def _is_bit(v: Any) -> bool:
    return v in (0, 1) and not isinstance(v, bool)


def _keep_probability(params: PrivacyParams):
    g = params.exp_epsilon
    return g / (1 + g)


class RandomizedResponse(Mechanism):
    """Answers one input bit with an exposed copy (prob. delta) or a private noisy copy."""

    name = "rr"

    def __init__(self, params: PrivacyParams):
        self.params = params
        self.answer_space = tuple(answer(RrOutcome(f, b)) for f in Flag for b in (0, 1))

    def initial_state(self):
        return "fresh"

    def valid_query(self, payload):
        return _is_bit(payload)

    def outcome_law(self, bit: int) -> List[Tuple[Any, RrOutcome]]:
        delta = self.params.delta
        keep = _keep_probability(self.params)
        return [
            (delta, RrOutcome(Flag.EXPOSED, bit)),
            ((1 - delta) * keep, RrOutcome(Flag.PRIVATE, bit)),
            ((1 - delta) * (1 - keep), RrOutcome(Flag.PRIVATE, 1 - bit)),
        ]

    def _transitions(self, state, msg):
        if state != "fresh" or msg is None or msg.kind is not Kind.QUERY or not _is_bit(msg.payload):
            return [(1, state, HALT)]
        return [(p, "used", answer(o)) for p, o in self.outcome_law(msg.payload)]


def rr(params: PrivacyParams) -> RandomizedResponse:
    return RandomizedResponse(params)


class SecretHolder(Mechanism):
    """Interactive view of a continual mechanism: it holds a secret bit and feeds it on each q*."""

    def __init__(self, inner: Mechanism, secret: int):
        self.inner = inner
        self.secret = secret
        self.name = f"{inner.name}[{secret}]"
        self.query_space = (QSTAR,)
        self.answer_space = inner.answer_space
        self.enumerable = inner.enumerable

    def initial_state(self):
        return (self.secret, self.inner.initial_state())

    def _transitions(self, state, msg):
        b, inner = state
        if msg != QSTAR:
            return [(1, state, HALT)]
        return [(p, (b, s), a) for p, s, a in self.inner.transitions(inner, query(b))]


def rr_with_secret(params: PrivacyParams, secret: int) -> SecretHolder:
    return SecretHolder(rr(params), secret)


class InteractiveRR(Mechanism):
    """Reveals the exposure flag on the first q*, the (possibly flipped) bit on the second."""

    name = "irr"

    def __init__(self, params: PrivacyParams, secret: int = 0):
        if not _is_bit(secret):
            raise ValueError("secret must be a bit")
        self.params = params
        self.secret = secret
        self.query_space = (QSTAR,)
        self.answer_space = (answer(Flag.EXPOSED), answer(Flag.PRIVATE), answer(0), answer(1))

    def initial_state(self):
        return (self.secret, 0, None)

    def _transitions(self, state, msg):
        b, stage, flag = state
        if msg != QSTAR or stage >= 2:
            return [(1, state, HALT)]
        delta = self.params.delta
        if stage == 0:
            return [
                (delta, (b, 1, Flag.EXPOSED), answer(Flag.EXPOSED)),
                (1 - delta, (b, 1, Flag.PRIVATE), answer(Flag.PRIVATE)),
            ]
        if flag is Flag.EXPOSED:
            return [(1, (b, 2, flag), answer(b))]
        keep = _keep_probability(self.params)
        return [(keep, (b, 2, flag), answer(b)), (1 - keep, (b, 2, flag), answer(1 - b))]


def irr(params: PrivacyParams, secret: int = 0) -> InteractiveRR:
    return InteractiveRR(params, secret)


# ---------------------------------------------------------------- noise


class NoiseSource:
    """Laplace draws: seeded from the caller's generator, identically zero, or scripted."""

    def __init__(self, mode: str = "seeded", values: Sequence[float] = ()):
        if mode not in ("seeded", "zero", "scripted"):
            raise ValueError(f"unknown noise mode {mode!r}")
        self.mode = mode
        self.values = list(values)
        self.used = 0

    @classmethod
    def seeded(cls) -> "NoiseSource":
        return cls("seeded")

    @classmethod
    def zero(cls) -> "NoiseSource":
        return cls("zero")

    @classmethod
    def scripted(cls, values: Sequence[float]) -> "NoiseSource":
        return cls("scripted", values)

    def laplace(self, scale: float, rng: Optional[np.random.Generator]) -> float:
        if self.mode == "zero":
            return 0.0
        if self.mode == "scripted":
            if self.used >= len(self.values):
                raise RuntimeError(f"scripted noise exhausted after {self.used} draws")
            v = self.values[self.used]
            self.used += 1
            return float(v)
        if rng is None:
            raise RuntimeError("seeded noise needs a generator")
        return float(rng.laplace(0.0, scale))


def round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


class LaplaceInteger(Mechanism):
    name = "laplace_int"
    enumerable = False

    def __init__(self, epsilon: float, sensitivity: float = 1, noise: Optional[NoiseSource] = None):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.epsilon = epsilon
        self.sensitivity = sensitivity
        self.noise = noise or NoiseSource.seeded()

    def initial_state(self):
        return "fresh"

    def valid_query(self, payload):
        return isinstance(payload, int)

    def _sample(self, state, msg, rng):
        if state != "fresh" or msg is None or msg.kind is not Kind.QUERY or not isinstance(msg.payload, (int, float)):
            return state, HALT
        noisy = msg.payload + self.noise.laplace(self.sensitivity / self.epsilon, rng)
        return "used", answer(round_half_up(noisy))


def laplace_int(epsilon: float, sensitivity: float = 1, noise: Optional[NoiseSource] = None) -> LaplaceInteger:
    return LaplaceInteger(epsilon, sensitivity, noise)


# ---------------------------------------------------------------- histogram queries


@dataclass(frozen=True)
class HistogramQuery:
    id: str
    evaluate: Callable[[Tuple[int, ...]], int] = field(compare=False)
    # dimensions for which the query moves by at most 1 when every coordinate moves by at most 1
    one_sensitive: Callable[[int], bool] = field(compare=False)
    monotone: bool = True


QUERIES: Dict[str, HistogramQuery] = {
    q.id: q
    for q in (
        HistogramQuery("sum", lambda h: sum(h), lambda d: d == 1),
        HistogramQuery("max", lambda h: max(h), lambda d: d >= 1),
        HistogramQuery("first", lambda h: h[0], lambda d: d >= 1),
    )
}


def _int_vector(v: Any, d: int) -> bool:
    return isinstance(v, tuple) and len(v) == d and all(isinstance(x, int) and not isinstance(x, bool) for x in v)


def _binary_vector(v: Any, d: int) -> bool:
    return _int_vector(v, d) and all(x in (0, 1) for x in v)


class SparseVector(Mechanism):
    """Above-threshold test on q(h) for a running histogram h; halts after its first TOP."""

    name = "svt"
    enumerable = False

    def __init__(self, epsilon: float, q_id: str, h0: Tuple[int, ...], noise: Optional[NoiseSource] = None):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if q_id not in QUERIES:
            raise ValueError(f"unknown histogram query {q_id!r}")
        if not QUERIES[q_id].one_sensitive(len(h0)):
            raise ValueError(f"query {q_id!r} is not 1-sensitive in dimension {len(h0)}")
        self.epsilon = epsilon
        self.q = QUERIES[q_id]
        self.h0 = tuple(h0)
        self.noise = noise or NoiseSource.seeded()

    def initial_state(self):
        return {"h": list(self.h0), "tau": None, "fired": False}

    def valid_query(self, payload):
        return isinstance(payload, tuple) and len(payload) == 2 and _int_vector(payload[0], len(self.h0))

    def _sample(self, state, msg, rng):
        if state["fired"] or msg is None or msg.kind is not Kind.QUERY or not self.valid_query(msg.payload):
            return state, HALT
        x, thresh = msg.payload
        if state["tau"] is None:
            # the threshold noise is drawn when the first input arrives
            state["tau"] = round_half_up(self.noise.laplace(1 / self.epsilon, rng))
        h = state["h"]
        for i, xi in enumerate(x):
            h[i] += xi
        noisy = round_half_up(self.q.evaluate(tuple(h)) + self.noise.laplace(2 / self.epsilon, rng))
        if noisy > thresh + state["tau"]:
            state["fired"] = True
            return state, answer(Signal.TOP)
        return state, answer(Signal.BOTTOM)


def svt(epsilon: float, q_id: str, h0: Tuple[int, ...], noise: Optional[NoiseSource] = None) -> SparseVector:
    return SparseVector(epsilon, q_id, h0, noise)


class BinaryCounter(Mechanism):
    """Tree-based continual counter; every dyadic block carries its own rounded noise."""

    name = "binary_counter"
    enumerable = False

    def __init__(self, epsilon: float, horizon: int, noise: Optional[NoiseSource] = None):
        if epsilon <= 0 or horizon < 1:
            raise ValueError("need epsilon > 0 and horizon >= 1")
        self.epsilon = epsilon
        self.horizon = horizon
        self.levels = horizon.bit_length()
        self.noise = noise or NoiseSource.seeded()

    def initial_state(self):
        return {"values": [], "block_noise": {}}

    def valid_query(self, payload):
        return isinstance(payload, int) and not isinstance(payload, bool)

    def release(self, state, value: int, rng) -> int:
        values = state["values"]
        values.append(value)
        t = len(values)
        total, start = 0, 0
        for level in range(self.levels - 1, -1, -1):
            if t >> level & 1:
                block = (level, start >> level)
                if block not in state["block_noise"]:
                    draw = self.noise.laplace(self.levels / self.epsilon, rng)
                    state["block_noise"][block] = round_half_up(draw)
                total += sum(values[start:start + (1 << level)]) + state["block_noise"][block]
                start += 1 << level
        return total

    def _sample(self, state, msg, rng):
        if msg is None or msg.kind is not Kind.QUERY or not self.valid_query(msg.payload):
            return state, HALT
        if len(state["values"]) >= self.horizon:
            return state, HALT
        return state, answer(self.release(state, msg.payload, rng))


def binary_counter(epsilon: float, horizon: int, noise: Optional[NoiseSource] = None) -> BinaryCounter:
    return BinaryCounter(epsilon, horizon, noise)


class VectorCounter(Mechanism):
    """d independent tree counters sharing the budget equally."""

    name = "d_counter"
    enumerable = False

    def __init__(self, epsilon: float, d: int, horizon: int, delta: float = 0.0,
                 noise: Optional[NoiseSource] = None):
        if d < 1:
            raise ValueError("dimension must be at least 1")
        self.epsilon = epsilon
        self.delta = delta
        self.d = d
        self.horizon = horizon
        self.noise = noise or NoiseSource.seeded()
        # the approximate variant reuses the pure construction
        self.coordinate = BinaryCounter(epsilon / d, horizon, self.noise)

    def initial_state(self):
        return [self.coordinate.initial_state() for _ in range(self.d)]

    def valid_query(self, payload):
        return _int_vector(payload, self.d)

    def _sample(self, state, msg, rng):
        if msg is None or msg.kind is not Kind.QUERY or not self.valid_query(msg.payload):
            return state, HALT
        if len(state[0]["values"]) >= self.horizon:
            return state, HALT
        out = tuple(self.coordinate.release(s, v, rng) for s, v in zip(state, msg.payload))
        return state, answer(out)


def d_counter(epsilon: float, d: int, horizon: int, delta: float = 0.0,
              noise: Optional[NoiseSource] = None) -> VectorCounter:
    return VectorCounter(epsilon, d, horizon, delta, noise)


# ---------------------------------------------------------------- counterexample mechanism


class TwoStateLeak(Mechanism):
    """Starts in TOP; each query falls to BOTTOM with probability delta, after which it echoes input bits."""

    name = "m_delta"

    def __init__(self, delta: Any, max_queries: int = 2):
        if not 0 < delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        self.delta = delta
        self.max_queries = max_queries
        self.answer_space = (answer(Signal.TOP), answer(Signal.BOTTOM), answer(0), answer(1))

    def initial_state(self):
        return (Signal.TOP, 0)

    def valid_query(self, payload):
        return _is_bit(payload)

    def _transitions(self, state, msg):
        mode, used = state
        if used >= self.max_queries or msg is None or msg.kind is not Kind.QUERY or not _is_bit(msg.payload):
            return [(1, state, HALT)]
        if mode is Signal.BOTTOM:
            return [(1, (mode, used + 1), answer(msg.payload))]
        return [
            (1 - self.delta, (Signal.TOP, used + 1), answer(Signal.TOP)),
            (self.delta, (Signal.BOTTOM, used + 1), answer(Signal.BOTTOM)),
        ]


def m_delta(delta: Any) -> TwoStateLeak:
    return TwoStateLeak(delta)


# ---------------------------------------------------------------- composition router


class ConcurrentRouter(Mechanism):
    """Creates children on creation queries and routes (q, i) to the i-th child (1-based)."""

    name = "ext_con_comp"

    def __init__(self, registry: Registry, noise: Optional[NoiseSource] = None):
        self.registry = registry
        self.noise = noise

    def initial_state(self):
        return ()

    def _build(self, cq):
        if self.noise is None:
            return self.registry.build(cq)
        return self.registry.build(cq, noise=self.noise)

    def _route(self, state, msg):
        if msg is None:
            return None
        if msg.kind is Kind.CREATE:
            if not self.registry.is_certified(msg.payload):
                return None
            return ("create", self._build(msg.payload))
        if msg.kind is not Kind.QUERY or not (isinstance(msg.payload, tuple) and len(msg.payload) == 2):
            return None
        q, i = msg.payload
        if not isinstance(i, int) or i < 1 or i > len(state):
            return None
        return ("route", i - 1, query(q))

    def _transitions(self, state, msg):
        plan = self._route(state, msg)
        if plan is None:
            return [(1, state, HALT)]
        if plan[0] == "create":
            child = plan[1]
            return [(1, state + ((child, child.initial_state()),), ACK)]
        _, k, q = plan
        child, s = state[k]
        return [(p, state[:k] + ((child, s2),) + state[k + 1:], a) for p, s2, a in child.transitions(s, q)]

    def _sample(self, state, msg, rng):
        plan = self._route(state, msg)
        if plan is None:
            return state, HALT
        if plan[0] == "create":
            child = plan[1]
            return state + ((child, child.initial_state()),), ACK
        _, k, q = plan
        child, s = state[k]
        s2, a = child.sample(s, q, rng)
        return state[:k] + ((child, s2),) + state[k + 1:], a


def ext_con_comp(registry: Registry, noise: Optional[NoiseSource] = None) -> ConcurrentRouter:
    return ConcurrentRouter(registry, noise)


# ---------------------------------------------------------------- monotone histogram


def _default_gamma(t, j, beta, epsilon, d):
    return 6 * (d * math.log((j + 1) * d / beta) ** 2 + math.log(t + 1)) / epsilon


SCHEDULES: Dict[str, Callable[..., float]] = {
    "default": _default_gamma,
    "half_default": lambda t, j, beta, epsilon, d: _default_gamma(t, j, beta, epsilon, d) / 2,
    "one": lambda t, j, beta, epsilon, d: 1.0,
    "zero": lambda t, j, beta, epsilon, d: 0.0,
}


@dataclass(frozen=True)
class ChildEvent:
    kind: str  # "create" or "input"
    child: int
    creation: Optional[CreationQuery]
    message: Any
    reply: Message
    step: int = 0


@dataclass
class HistogramState:
    h: List[int]
    c: List[int]
    out: int
    j: int
    t: int
    thresh: float
    children: List[List[Any]]
    svt_child: int = -1
    counter_child: int = -1
    log: List[ChildEvent] = field(default_factory=list)
    replay: Optional[Sequence[ChildEvent]] = None
    cursor: int = 0
    divergence: Optional[int] = None
    started: bool = False


class MonotoneHistogram(Mechanism):
    """Continual release of q(histogram) that only refreshes when a sparse-vector child fires.

    Child mechanisms are reached only through ``_create`` and ``_call`` so that
    every creation and input is logged.  Passing ``replay`` makes child answers
    come from an earlier log instead of fresh noise, which pins the decision
    variables of a second run to those of the first.
    """

    name = "hss"
    enumerable = False

    def __init__(self, epsilon: float, q_id: str, beta: float, gamma_id: str, xi_id: str, d: int,
                 horizon: int, delta: float = 0.0, registry: Optional[Registry] = None,
                 noise: Optional[NoiseSource] = None, replay: Optional[Sequence[ChildEvent]] = None):
        if epsilon <= 0 or d < 1 or horizon < 1:
            raise ValueError("need epsilon > 0, d >= 1 and horizon >= 1")
        if q_id not in QUERIES:
            raise ValueError(f"unknown histogram query {q_id!r}")
        q = QUERIES[q_id]
        if not (q.monotone and q.one_sensitive(d)):
            raise ValueError(f"query {q_id!r} must be monotone and 1-sensitive in dimension {d}")
        for sid in (gamma_id, xi_id):
            if sid not in SCHEDULES:
                raise ValueError(f"unknown schedule {sid!r}")
        self.epsilon = epsilon
        self.q_id = q_id
        self.q = q
        self.beta = beta
        self.gamma_id, self.xi_id = gamma_id, xi_id
        self.d = d
        self.horizon = horizon
        self.delta = delta
        self.registry = registry if registry is not None else default_registry()
        self.noise = noise or NoiseSource.seeded()
        self.replay = replay

    def gamma(self, t, j):
        return SCHEDULES[self.gamma_id](t, j, self.beta, self.epsilon, self.d)

    def xi(self, t, j):
        return SCHEDULES[self.xi_id](t, j, self.beta, self.epsilon, self.d)

    def counter_creation(self) -> CreationQuery:
        e = self.epsilon / 3
        return CreationQuery("d_counter", (e, self.d, self.horizon), PrivacyParams(e, self.delta), "linf_event")

    def svt_creation(self, h) -> CreationQuery:
        return CreationQuery("svt", (self.epsilon / 6, self.q_id, tuple(h)),
                             PrivacyParams(self.epsilon / 3, 0.0), "svt_event")

    def laplace_creation(self) -> CreationQuery:
        e = self.epsilon / 3
        return CreationQuery("laplace_int", (e, 1), PrivacyParams(e, 0.0), "scalar_one")

    def initial_state(self):
        d = self.d
        st = HistogramState(h=[0] * d, c=[0] * d, out=0, j=1, t=0, thresh=0.0, children=[],
                            replay=self.replay)
        st.out = self.q.evaluate(tuple(st.h))
        st.thresh = self.gamma(1, st.j)
        return st

    # -- instrumented child access

    def _expect(self, st: HistogramState, kind: str, child: int, creation=None, message=None):
        if st.replay is None:
            return None
        ev = st.replay[st.cursor] if st.cursor < len(st.replay) else None
        if ev is None or ev.kind != kind or ev.child != child or (kind == "create" and ev.creation != creation):
            if st.divergence is None:
                st.divergence = st.cursor
            return None
        return ev

    def _create(self, st: HistogramState, cq: CreationQuery) -> int:
        idx = len(st.children)
        self._expect(st, "create", idx, creation=cq)
        mech = self.registry.build(cq, noise=self.noise)
        st.children.append([mech, mech.initial_state()])
        st.log.append(ChildEvent("create", idx, cq, None, ACK, st.t))
        st.cursor += 1
        return idx

    def _call(self, st: HistogramState, idx: int, payload: Any, rng) -> Message:
        ev = self._expect(st, "input", idx, message=payload)
        if ev is not None:
            reply = ev.reply
        else:
            mech, s = st.children[idx]
            s, reply = mech.sample(s, query(payload), rng)
            st.children[idx][1] = s
        st.log.append(ChildEvent("input", idx, None, payload, reply, st.t))
        st.cursor += 1
        return reply

    def _start(self, st: HistogramState) -> None:
        st.counter_child = self._create(st, self.counter_creation())
        st.svt_child = self._create(st, self.svt_creation(st.h))
        st.started = True

    def _report(self, st: HistogramState) -> int:
        return st.out

    def valid_query(self, payload):
        return _binary_vector(payload, self.d)

    def _sample(self, st, msg, rng):
        if msg is None or msg.kind is not Kind.QUERY or not self.valid_query(msg.payload) or st.t >= self.horizon:
            return st, HALT
        if not st.started:
            self._start(st)
        x = msg.payload
        st.t += 1
        t = st.t
        st.c = [a + b for a, b in zip(st.c, x)]
        fired = self._call(st, st.svt_child, (tuple(x), st.thresh), rng)
        if fired == answer(Signal.TOP):
            counted = self._call(st, st.counter_child, tuple(st.c), rng)
            st.h = list(counted.payload)
            st.out = self.q.evaluate(tuple(st.h))
            st.svt_child = self._create(st, self.svt_creation(st.h))
            st.c = [0] * self.d
            check = self._create(st, self.laplace_creation())
            noisy = self._call(st, check, self.q.evaluate(tuple(a + b for a, b in zip(st.c, st.h))), rng)
            if noisy.payload > st.thresh - self.xi(t, st.j):
                st.thresh += self.gamma(t, st.j)
            st.j += 1
            st.thresh = st.thresh - self.gamma(t, st.j - 1) + self.gamma(t, st.j)
        st.thresh = st.thresh - self.gamma(t, st.j) + self.gamma(t + 1, st.j)
        return st, answer(self._report(st))


def hss_histogram(epsilon: float, q_id: str, beta: float, gamma_id: str, xi_id: str, d: int, horizon: int,
                  delta: float = 0.0, **options: Any) -> MonotoneHistogram:
    return MonotoneHistogram(epsilon, q_id, beta, gamma_id, xi_id, d, horizon, delta, **options)


class LeakyHistogram(MonotoneHistogram):
    """Deliberately broken variant whose output peeks at the unflushed increments."""

    name = "leaky_hss"

    def _report(self, st):
        if any(st.c):
            return self.q.evaluate(tuple(a + b for a, b in zip(st.h, st.c)))
        return st.out


# ---------------------------------------------------------------- registry


def _at_least(claimed: Any, guaranteed: Any) -> bool:
    return claimed >= guaranteed * (1 - 1e-12)


def default_registry() -> Registry:
    reg = Registry()

    def make_rr(cq, **_):
        return RandomizedResponse(cq.params)

    def make_irr(cq, **_):
        return InteractiveRR(cq.params, cq.init or 0)

    def make_laplace(cq, noise=None):
        eps, sens = cq.init
        return LaplaceInteger(eps, sens, noise)

    def make_svt(cq, noise=None):
        eps, q_id, h0 = cq.init
        return SparseVector(eps, q_id, tuple(h0), noise)

    def make_counter(cq, noise=None):
        eps, horizon = cq.init
        return BinaryCounter(eps, horizon, noise)

    def make_vector_counter(cq, noise=None):
        eps, d, horizon = cq.init
        return VectorCounter(eps, d, horizon, cq.params.delta, noise)

    def make_m_delta(cq, **_):
        return TwoStateLeak(cq.params.delta)

    def make_router(cq, noise=None):
        return ConcurrentRouter(reg, noise)

    def make_hss(cq, noise=None):
        eps, q_id, beta, gamma_id, xi_id, d, horizon = cq.init
        return MonotoneHistogram(eps, q_id, beta, gamma_id, xi_id, d, horizon, cq.params.delta,
                                 registry=reg, noise=noise)

    for mech_id, factory in (
        ("rr", make_rr), ("irr", make_irr), ("laplace_int", make_laplace), ("svt", make_svt),
        ("binary_counter", make_counter), ("d_counter", make_vector_counter),
        ("ext_con_comp", make_router), ("m_delta", make_m_delta), ("hss", make_hss),
    ):
        reg.add_constructor(mech_id, factory)

    reg.add_relation(VerificationFn("count_event", _count_event))

    reg.certify("rr", "single_bit", lambda cq: cq.init is None,
                "randomized response with (eps, delta) is (eps, delta)-DP for one bit")
    reg.certify("laplace_int", "scalar_one",
                lambda cq: cq.init[0] > 0 and cq.init[1] <= 1 and _at_least(cq.params.epsilon, cq.init[0]),
                "rounded Laplace release of a 1-sensitive value")
    reg.certify("svt", "svt_event",
                lambda cq: cq.init[0] > 0 and cq.init[1] in QUERIES
                and QUERIES[cq.init[1]].one_sensitive(len(cq.init[2]))
                and _at_least(cq.params.epsilon, 2 * cq.init[0]),
                "sparse vector run at eps is 2*eps-DP for event-level streams")
    reg.certify("binary_counter", "count_event",
                lambda cq: cq.init[0] > 0 and _at_least(cq.params.epsilon, cq.init[0]),
                "tree counter with per-level budget is eps-DP")
    reg.certify("d_counter", "linf_event",
                lambda cq: cq.init[0] > 0 and _at_least(cq.params.epsilon, cq.init[0]),
                "d tree counters at eps/d each are eps-DP, hence (eps, delta)-DP")
    reg.certify("m_delta", "two_bits_one_change",
                lambda cq: cq.init in (None, Signal.TOP) and cq.params.epsilon == 0 and 0 < cq.params.delta <= 1,
                "two-state mechanism is (0, delta)-DP for its two-query relation")
    reg.certify("hss", "event_level",
                lambda cq: _at_least(cq.params.epsilon, cq.init[0]),
                "monotone histogram mechanism, via the structural properties")
    return reg


def _count_event(pairs) -> Verdict:
    changed = 0
    for p in pairs:
        a, b = p[0].payload, p[1].payload
        if not (isinstance(a, int) and isinstance(b, int)):
            return Verdict(False, "not-an-integer-pair")
        if a != b:
            changed += 1
            if abs(a - b) > 1:
                return Verdict(False, "step-too-far")
    if changed > 1:
        return Verdict(False, "too-many-changes")
    return Verdict(True)
