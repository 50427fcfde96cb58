"""Verification functions, the suitability scan, registry, verifier and identifier."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .core_protocol import (
    HALT,
    Ipm,
    Kind,
    Mechanism,
    Message,
    PrivacyParams,
    Side,
)

Pair = Tuple[Message, Message]


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


ACCEPT = Verdict(True)


@dataclass(frozen=True)
class VerificationFn:
    """Pure predicate over a sequence of message pairs.

    ``layout`` is "single" for relations over one mechanism's query pairs and
    "routed" for sequences addressed to a composition router.
    """

    id: str
    check: Callable[[Sequence[Pair]], Verdict] = field(compare=False)
    params: Tuple[Any, ...] = ()
    layout: str = "single"

    def explain(self, pairs: Sequence[Pair]) -> Verdict:
        return self.check(tuple(pairs))

    def accepts(self, pairs: Sequence[Pair]) -> bool:
        return self.check(tuple(pairs)).ok


def exact(value: Any) -> Fraction:
    """Exact rational view of a parameter; floats are read through their shortest decimal form."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(repr(float(value)))


def _is_query_pair(p: Pair) -> bool:
    return p[0].kind is Kind.QUERY and p[1].kind is Kind.QUERY


def _identical(p: Pair) -> bool:
    return p[0] == p[1]


# ---------------------------------------------------------------- relations on one mechanism


def _rel_everything(pairs):
    return ACCEPT


def _rel_nothing(pairs):
    return Verdict(False, "rejects-all") if pairs else ACCEPT


def _is_bit(v: Any) -> bool:
    return v in (0, 1) and not isinstance(v, bool)


def _rel_single_bit(pairs):
    if len(pairs) > 1:
        return Verdict(False, "too-many-queries")
    for p in pairs:
        if not _is_query_pair(p) or not (_is_bit(p[0].payload) and _is_bit(p[1].payload)):
            return Verdict(False, "not-a-bit-pair")
    return ACCEPT


def _rel_two_bits_one_change(pairs):
    if len(pairs) > 2:
        return Verdict(False, "too-many-queries")
    changed = 0
    for p in pairs:
        if not _is_query_pair(p) or not (_is_bit(p[0].payload) and _is_bit(p[1].payload)):
            return Verdict(False, "not-a-bit-pair")
        changed += not _identical(p)
    if changed > 1:
        return Verdict(False, "too-many-changes")
    return ACCEPT


def _rel_first_pair(pairs):
    for p in pairs:
        if not _is_query_pair(p):
            return Verdict(False, "not-a-query-pair")
    for p in pairs[1:]:
        if not _identical(p):
            return Verdict(False, "later-pair-differs")
    return ACCEPT


def _vector(v: Any) -> Optional[Tuple[int, ...]]:
    if isinstance(v, tuple) and all(isinstance(x, int) for x in v):
        return v
    return None


def _rel_event_level(pairs):
    """Streams that agree except at one step."""
    changed = 0
    for p in pairs:
        if not _is_query_pair(p):
            return Verdict(False, "not-a-query-pair")
        changed += not _identical(p)
    if changed > 1:
        return Verdict(False, "too-many-changes")
    return ACCEPT


def _linf_close(a: Any, b: Any) -> bool:
    va, vb = _vector(a), _vector(b)
    if va is None or vb is None or len(va) != len(vb):
        return False
    return all(abs(x - y) <= 1 for x, y in zip(va, vb))


def _rel_linf_event(pairs):
    """Vector streams differing at one step by at most one per coordinate."""
    verdict = _rel_event_level(pairs)
    if not verdict:
        return verdict
    for p in pairs:
        if not _identical(p) and not _linf_close(p[0].payload, p[1].payload):
            return Verdict(False, "step-too-far")
    return ACCEPT


def _rel_svt_event(pairs):
    """Inputs (x, threshold): one step may change x, thresholds always agree."""
    verdict = _rel_event_level(pairs)
    if not verdict:
        return verdict
    for p in pairs:
        a, b = p[0].payload, p[1].payload
        if not (isinstance(a, tuple) and isinstance(b, tuple) and len(a) == len(b) == 2):
            return Verdict(False, "malformed-svt-input")
        if a[1] != b[1]:
            return Verdict(False, "threshold-differs")
        if not _linf_close(a[0], b[0]):
            return Verdict(False, "step-too-far")
    return ACCEPT


def _rel_scalar_one(pairs):
    if len(pairs) > 1:
        return Verdict(False, "too-many-queries")
    for p in pairs:
        a, b = p[0].payload, p[1].payload
        if not _is_query_pair(p) or not (isinstance(a, int) and isinstance(b, int)):
            return Verdict(False, "not-an-integer-pair")
        if abs(a - b) > 1:
            return Verdict(False, "step-too-far")
    return ACCEPT


RELATIONS: Dict[str, VerificationFn] = {
    fn.id: fn
    for fn in (
        VerificationFn("all", _rel_everything),
        VerificationFn("none", _rel_nothing),
        VerificationFn("single_bit", _rel_single_bit),
        VerificationFn("two_bits_one_change", _rel_two_bits_one_change),
        VerificationFn("first_pair", _rel_first_pair),
        VerificationFn("event_level", _rel_event_level),
        VerificationFn("linf_event", _rel_linf_event),
        VerificationFn("svt_event", _rel_svt_event),
        VerificationFn("scalar_one", _rel_scalar_one),
    )
}


def vf_neighbor(relation_id: str) -> VerificationFn:
    try:
        return RELATIONS[relation_id]
    except KeyError:
        raise ValueError(f"unknown neighbor relation {relation_id!r}") from None


# ---------------------------------------------------------------- registry


@dataclass(frozen=True)
class CreationQuery:
    mech_id: str
    init: Any
    params: PrivacyParams
    vf_id: str

    def __repr__(self) -> str:
        return f"new[{self.mech_id}{self.init!r}@({self.params.epsilon},{self.params.delta})/{self.vf_id}]"


@dataclass(frozen=True)
class Certification:
    mech_id: str
    vf_id: str
    admits: Callable[[CreationQuery], bool] = field(compare=False)
    note: str = ""


class Registry:
    """Constructors, relations and the certified (mechanism, parameters, relation) triples."""

    def __init__(self) -> None:
        self.constructors: Dict[str, Callable[..., Mechanism]] = {}
        self.relations: Dict[str, VerificationFn] = dict(RELATIONS)
        self.certifications: List[Certification] = []

    def add_constructor(self, mech_id: str, factory: Callable[..., Mechanism]) -> None:
        self.constructors[mech_id] = factory

    def add_relation(self, fn: VerificationFn) -> None:
        self.relations[fn.id] = fn

    def certify(self, mech_id: str, vf_id: str, admits: Callable[[CreationQuery], bool], note: str = "") -> None:
        self.certifications.append(Certification(mech_id, vf_id, admits, note))

    def is_certified(self, cq: Any) -> bool:
        if not isinstance(cq, CreationQuery):
            return False
        if cq.mech_id not in self.constructors or cq.vf_id not in self.relations:
            return False
        for cert in self.certifications:
            if cert.mech_id == cq.mech_id and cert.vf_id == cq.vf_id:
                try:
                    if cert.admits(cq):
                        return True
                except (TypeError, ValueError):
                    return False
        return False

    def relation(self, vf_id: str) -> VerificationFn:
        return self.relations[vf_id]

    def build(self, cq: CreationQuery, **options: Any) -> Mechanism:
        if not self.is_certified(cq):
            raise KeyError(f"uncertified creation query {cq!r}")
        return self.constructors[cq.mech_id](cq, **options)


# ---------------------------------------------------------------- suitability


@dataclass
class Scan:
    verdict: Verdict
    creations: List[CreationQuery]
    child_pairs: List[List[Pair]]

    def touched(self) -> List[int]:
        """Indices (0-based) of children that received a non-identical pair."""
        return [i for i, ps in enumerate(self.child_pairs) if any(not _identical(p) for p in ps)]


def _unpack(msg: Message) -> Optional[Pair]:
    if not isinstance(msg, Message) or msg.kind is not Kind.PAIR:
        return None
    return msg.payload


def scan_suitable(pairs: Sequence[Pair], registry: Registry) -> Scan:
    creations: List[CreationQuery] = []
    children: List[Mechanism] = []
    child_pairs: List[List[Pair]] = []

    def fail(reason: str) -> Scan:
        return Scan(Verdict(False, reason), creations, child_pairs)

    for p in pairs:
        if p is None or len(p) != 2:
            return fail("malformed")
        m0, m1 = p
        if m0.kind is Kind.CREATE or m1.kind is Kind.CREATE:
            if m0 != m1:
                return fail("creation-mismatch")
            cq = m0.payload
            if not registry.is_certified(cq):
                return fail("uncertified")
            creations.append(cq)
            children.append(registry.build(cq))
            child_pairs.append([])
            continue
        if m0.kind is not Kind.QUERY or m1.kind is not Kind.QUERY:
            return fail("malformed")
        r0, r1 = m0.payload, m1.payload
        if not (isinstance(r0, tuple) and isinstance(r1, tuple) and len(r0) == len(r1) == 2):
            return fail("malformed")
        (q0, i0), (q1, i1) = r0, r1
        if i0 != i1 or not isinstance(i0, int):
            return fail("index-mismatch")
        if i0 < 1 or i0 > len(creations):
            return fail("index-unavailable")
        child = children[i0 - 1]
        if not (child.valid_query(q0) and child.valid_query(q1)):
            return fail("query-space")
        child_pairs[i0 - 1].append((Message(Kind.QUERY, q0), Message(Kind.QUERY, q1)))
        rel = registry.relation(creations[i0 - 1].vf_id)
        if not rel.accepts(child_pairs[i0 - 1]):
            return fail("child-invalid")
    return Scan(ACCEPT, creations, child_pairs)


def is_suitable(pairs: Sequence[Any], registry: Registry) -> Verdict:
    pairs = tuple(_unpack(p) if isinstance(p, Message) else p for p in pairs)
    return scan_suitable(pairs, registry).verdict


def _sub_multiset(chosen: Sequence[Any], allowed: Sequence[Any]) -> bool:
    need, have = Counter(chosen), Counter(allowed)
    return all(have[k] >= n for k, n in need.items())


def _param_key(params: PrivacyParams) -> Tuple[Fraction, Fraction]:
    return (exact(params.epsilon), exact(params.delta))


def _survival(deltas: Sequence[Any]) -> Fraction:
    out = Fraction(1)
    for d in deltas:
        out *= 1 - exact(d)
    return out


def vf_fixed_mechs(alphas: Sequence[CreationQuery], registry: Registry) -> VerificationFn:
    alphas = tuple(alphas)
    for a in alphas:
        if not registry.is_certified(a):
            raise ValueError(f"creation query {a!r} is not certified")

    def check(pairs):
        scan = scan_suitable(pairs, registry)
        if not scan.verdict:
            return scan.verdict
        for j, p in enumerate(pairs[: len(alphas)]):
            if p[0].kind is not Kind.CREATE or p[0].payload != alphas[j]:
                return Verdict(False, "not-the-fixed-creation")
        return ACCEPT

    return VerificationFn("fixed_mechs", check, alphas, "routed")


def vf_fixed_params(params: Sequence[PrivacyParams], registry: Registry) -> VerificationFn:
    keys = tuple(_param_key(p) for p in params)

    def check(pairs):
        scan = scan_suitable(pairs, registry)
        if not scan.verdict:
            return scan.verdict
        if len(scan.creations) > len(keys):
            return Verdict(False, "too-many-creations")
        if not _sub_multiset([_param_key(c.params) for c in scan.creations], keys):
            return Verdict(False, "params-not-allowed")
        return ACCEPT

    return VerificationFn("fixed_params", check, tuple(params), "routed")


def vf_parallel_sparse(params: Sequence[PrivacyParams], registry: Registry) -> VerificationFn:
    """Any number of children; those that see a differing pair must fit the fixed parameters."""
    keys = tuple(_param_key(p) for p in params)

    def check(pairs):
        scan = scan_suitable(pairs, registry)
        if not scan.verdict:
            return scan.verdict
        touched = [_param_key(scan.creations[i].params) for i in scan.touched()]
        if len(touched) > len(keys):
            return Verdict(False, "too-many-touched")
        if not _sub_multiset(touched, keys):
            return Verdict(False, "params-not-allowed")
        return ACCEPT

    return VerificationFn("parallel_sparse", check, tuple(params), "routed")


def vf_parallel_budget(epsilons: Sequence[Any], delta_budget: Any, registry: Registry) -> VerificationFn:
    if not 0 <= delta_budget <= 1:
        raise ValueError("delta budget must lie in [0, 1]")
    eps_keys = tuple(exact(e) for e in epsilons)
    budget = exact(delta_budget)

    def check(pairs):
        scan = scan_suitable(pairs, registry)
        if not scan.verdict:
            return scan.verdict
        touched = [exact(scan.creations[i].params.epsilon) for i in scan.touched()]
        if not _sub_multiset(touched, eps_keys):
            return Verdict(False, "epsilons-not-allowed")
        if 1 - _survival([c.params.delta for c in scan.creations]) > budget:
            return Verdict(False, "delta-budget")
        return ACCEPT

    return VerificationFn("parallel_budget", check, (tuple(epsilons), delta_budget), "routed")


def vf_rr_budget(delta_budget: Any, registry: Registry, rr_id: str = "rr") -> VerificationFn:
    if not 0 <= delta_budget <= 1:
        raise ValueError("delta budget must lie in [0, 1]")
    budget = exact(delta_budget)

    def check(pairs):
        scan = scan_suitable(pairs, registry)
        if not scan.verdict:
            return scan.verdict
        for c in scan.creations:
            if c.mech_id != rr_id or c.params.epsilon != 0 or c.vf_id != "single_bit":
                return Verdict(False, "not-zero-epsilon-rr")
        if 1 - _survival([c.params.delta for c in scan.creations]) > budget:
            return Verdict(False, "delta-budget")
        return ACCEPT

    return VerificationFn("rr_budget", check, (delta_budget,), "routed")


def _first_pair_consistent(pairs: Sequence[Pair]) -> bool:
    if not pairs or not _identical(pairs[0]):
        return True
    return all(_identical(p) for p in pairs[1:])


def vf_fpc_wrap(base: VerificationFn, registry: Optional[Registry] = None) -> VerificationFn:
    """Adds the requirement that a stream opening with an identical pair stays identical."""
    if base.layout == "routed" and registry is None:
        raise ValueError("a routed verification function needs the registry")

    def check(pairs):
        verdict = base.explain(pairs)
        if not verdict:
            return verdict
        if base.layout == "routed":
            streams = scan_suitable(pairs, registry).child_pairs
        else:
            streams = [list(pairs)]
        for s in streams:
            if not _first_pair_consistent(s):
                return Verdict(False, "not-first-pair-consistent")
        return ACCEPT

    return VerificationFn(f"fpc({base.id})", check, (base,), base.layout)


@dataclass(frozen=True)
class Filter:
    id: str
    evaluate: Callable[[Sequence[PrivacyParams]], bool] = field(compare=False)
    params: Tuple[Any, ...] = ()


def budget_filter(epsilon_total: Any, delta_total: Any) -> Filter:
    eps_cap, delta_cap = exact(epsilon_total), exact(delta_total)

    def evaluate(sigma):
        return (sum((exact(p.epsilon) for p in sigma), Fraction(0)) <= eps_cap
                and sum((exact(p.delta) for p in sigma), Fraction(0)) <= delta_cap)

    return Filter("budget", evaluate, (epsilon_total, delta_total))


def product_filter(delta_total: Any) -> Filter:
    cap = exact(delta_total)

    def evaluate(sigma):
        return 1 - _survival([p.delta for p in sigma]) <= cap

    return Filter("product", evaluate, (delta_total,))


def vf_filter(filt: Filter, registry: Registry) -> VerificationFn:
    def check(pairs):
        scan = scan_suitable(pairs, registry)
        if not scan.verdict:
            return scan.verdict
        if not filt.evaluate([c.params for c in scan.creations]):
            return Verdict(False, "filter-exhausted")
        return ACCEPT

    return VerificationFn(f"filter({filt.id})", check, (filt,), "routed")


# ---------------------------------------------------------------- relays


class Identifier(Ipm):
    """Forwards the secret-indexed element of each pair; answers pass back untouched."""

    name = "identifier"

    def __init__(self, secret: int):
        if secret not in (0, 1):
            raise ValueError("identifier bit must be 0 or 1")
        self.secret = secret

    def initial_state(self):
        return self.secret

    def _react(self, state, side, msg):
        if side is Side.RIGHT:
            return [(1, state, Side.LEFT, msg)]
        pair_ = _unpack(msg)
        if pair_ is None:
            return [(1, state, Side.LEFT, HALT)]
        return [(1, state, Side.RIGHT, pair_[state])]


class Verifier(Ipm):
    name = "verifier"

    def __init__(self, fn: VerificationFn):
        self.fn = fn

    def initial_state(self):
        return ()

    def _react(self, state, side, msg):
        if side is Side.RIGHT:
            return [(1, state, Side.LEFT, msg)]
        pair_ = _unpack(msg)
        if pair_ is None:
            return [(1, state, Side.LEFT, HALT)]
        seen = state + (pair_,)
        if not self.fn.accepts(seen):
            return [(1, seen, Side.LEFT, HALT)]
        return [(1, seen, Side.RIGHT, msg)]


def make_identifier(b: int) -> Identifier:
    return Identifier(b)


def make_verifier(fn: VerificationFn) -> Verifier:
    return Verifier(fn)
