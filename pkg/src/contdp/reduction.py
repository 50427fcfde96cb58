"""Finite-horizon decomposition of a DP interactive mechanism into an exposed part and
two private parts, and the post-processor that rebuilds it from interactive
randomized response.

Transcripts are tuples (q1, a1, ..., qt, at) of messages.  Every table maps a
transcript to a pair (value under secret 0, value under secret 1); transcripts
that are unreachable under both secrets are left out and read as (0, 0).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core_protocol import (
    HALT,
    Ipm,
    Kind,
    Mechanism,
    Message,
    PrivacyParams,
    ScriptedAdversary,
    Side,
    answer,
    compose_post,
    query,
)
from .mechanisms import QSTAR, Flag, irr
from .privacy_analysis import enumerate_views

Key = Tuple[Message, ...]
Pair = Tuple[float, float]
ZERO: Pair = (0.0, 0.0)

TABLE_TOL = 1e-9
SOLVER_TOL = 1e-10


class ReductionError(RuntimeError):
    pass


@dataclass
class AnswerTable:
    horizon: int
    queries: Tuple[Message, ...]
    answers: Tuple[Message, ...]
    mu: List[Dict[Key, Pair]]

    def value(self, key: Key) -> Pair:
        return self.mu[len(key) // 2].get(key, ZERO)

    def prefixes(self, t: int) -> List[Key]:
        return list(self.mu[t])


def _group(branches):
    out: Dict[Message, list] = {}
    for p, s, a in branches:
        out.setdefault(a, []).append((p, s))
    return out


def compute_mu(mech: Mechanism, s0: Any, s1: Any, horizon: int, queries: Optional[Sequence[Message]] = None,
               answers: Optional[Sequence[Message]] = None, require_halt: bool = True) -> AnswerTable:
    """Answer probabilities for every query/answer transcript, by forward chain rule."""
    queries = tuple(queries if queries is not None else (mech.query_space or ()))
    if not queries:
        raise ValueError("compute_mu needs a finite query set")
    declared = answers if answers is not None else mech.answer_space
    if declared is None:
        raise ValueError("compute_mu needs a finite answer set")
    answers = tuple(declared) + ((HALT,) if HALT not in declared else ())
    known = set(answers)

    # per transcript: state laws under each secret
    level: Dict[Key, Tuple[list, list]] = {(): ([(1, s0)], [(1, s1)])}
    mu: List[Dict[Key, Pair]] = [{(): (1, 1)}]
    for _ in range(horizon):
        nxt: Dict[Key, Tuple[list, list]] = {}
        for key, laws in level.items():
            for q in queries:
                split = ({}, {})
                for b in (0, 1):
                    for p, s in laws[b]:
                        for p2, s2, a in mech.transitions(s, q):
                            if a not in known:
                                raise ValueError(f"answer {a!r} is outside the declared answer set")
                            split[b].setdefault(a, []).append((p * p2, s2))
                for a in answers:
                    if a in split[0] or a in split[1]:
                        nxt[key + (q, a)] = (split[0].get(a, []), split[1].get(a, []))
        level = nxt
        mu.append({k: (sum((p for p, _ in v[0]), 0), sum((p for p, _ in v[1]), 0)) for k, v in level.items()})
    if require_halt:
        for key, laws in level.items():
            for q in queries:
                for b in (0, 1):
                    for _, s in laws[b]:
                        if any(a.kind is not Kind.HALT for _, _, a in mech.transitions(s, q)):
                            raise ReductionError(f"mechanism still answers after {horizon} queries at {key!r}")
    return AnswerTable(horizon, queries, answers, mu)


@dataclass
class ControlTables:
    horizon: int
    growth: float
    lower: List[Dict[Key, Pair]]  # lower[t][h_{t-1} + (q,)]
    l: List[Dict[Key, Pair]]

    def l_value(self, key: Key) -> Pair:
        return self.l[len(key) // 2].get(key, ZERO)


def compute_L(mu: AnswerTable, epsilon: float, horizon: Optional[int] = None) -> ControlTables:
    T = mu.horizon if horizon is None else horizon
    if T > mu.horizon:
        raise ValueError("horizon beyond the answer table")
    g = math.exp(epsilon)
    l: List[Dict[Key, Pair]] = [dict() for _ in range(T + 1)]
    lower: List[Dict[Key, Pair]] = [dict() for _ in range(T + 1)]
    for key, (m0, m1) in mu.mu[T].items():
        l[T][key] = (max(0.0, m0 - g * m1), max(0.0, m1 - g * m0))
    for t in range(T - 1, -1, -1):
        for h in mu.mu[t]:
            best = [0.0, 0.0]
            for q in mu.queries:
                acc = [0.0, 0.0]
                for a in mu.answers:
                    v = l[t + 1].get(h + (q, a), ZERO)
                    acc[0] += v[0]
                    acc[1] += v[1]
                lower[t + 1][h + (q,)] = (acc[0], acc[1])
                best = [max(best[0], acc[0]), max(best[1], acc[1])]
            l[t][h] = (best[0], best[1])
    return ControlTables(T, g, lower, l)


# ---------------------------------------------------------------- two-variable selection


def _lexmax(lo, up, c, k, tol=SOLVER_TOL):
    """Lexicographic maximum of (x0, x1) subject to lo <= x <= up and x_b - k*x_{1-b} <= c_b."""
    hi0 = min(up[0], c[0] + k * up[1])
    if k < 1:
        hi0 = min(hi0, (c[0] + k * c[1]) / (1 - k * k))
    elif c[0] + c[1] < -tol:
        return None
    lo0 = max(lo[0], (lo[1] - c[1]) / k)
    if hi0 < lo0 - tol or lo[1] > up[1] + tol:
        return None
    x0 = hi0 if hi0 >= lo0 else lo0
    x1_hi = min(up[1], c[1] + k * x0)
    x1_lo = max(lo[1], (x0 - c[0]) / k)
    if x1_hi < x1_lo - tol:
        return None
    return (x0, max(x1_hi, x1_lo))


def _swap(v):
    return (v[1], v[0])


def _select_equal_or_lexmax(lo, up, c, k, tol=SOLVER_TOL):
    """The maximal feasible point with equal coordinates if there is one, else the lexicographic maximum."""
    best = _lexmax(lo, up, c, k, tol)
    if best is None:
        return None
    z = min(up[0], up[1])
    if k < 1:
        z = min(z, c[0] / (1 - k), c[1] / (1 - k))
    if z >= max(lo[0], lo[1]) - tol:
        raised = (max(lo[0], z), max(lo[1], z))
        right = _lexmax(raised, up, c, k, tol)
        above = _lexmax(_swap(raised), _swap(up), _swap(c), k, tol)
        if right is not None and above is not None and right[0] <= z + tol and above[0] <= z + tol:
            return (z, z)
    return best


@dataclass
class ReductionTables:
    mu: AnswerTable
    control: ControlTables
    epsilon: float
    delta: float
    xi: List[Dict[Key, Pair]] = field(default_factory=list)
    phi: List[Dict[Key, Pair]] = field(default_factory=list)
    psi: List[Dict[Key, Pair]] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.control.horizon

    def get(self, table: str, key: Key) -> Pair:
        return getattr(self, table)[len(key) // 2].get(key, ZERO)


def compute_xi_phi(mu: AnswerTable, control: ControlTables, delta: float, epsilon: Optional[float] = None) -> ReductionTables:
    g = control.growth
    k = 1 / g
    eps = math.log(g) if epsilon is None else epsilon
    T = control.horizon
    xi: List[Dict[Key, Pair]] = [dict() for _ in range(T + 1)]
    phi: List[Dict[Key, Pair]] = [dict() for _ in range(T + 1)]
    phi[0][()] = (1.0, 1.0)
    for t in range(1, T + 1):
        for h in mu.mu[t - 1]:
            parent = phi[t - 1].get(h, ZERO)
            for q in mu.queries:
                keys = [h + (q, a) for a in mu.answers]
                mus = [mu.value(key) for key in keys]
                ls = [control.l_value(key) for key in keys]
                xs: List[Pair] = []
                for i, key in enumerate(keys):
                    m, lv = mus[i], ls[i]
                    before = [sum(x[b] for x in xs) for b in (0, 1)]
                    after = [sum(v[b] for v in ls[i + 1:]) for b in (0, 1)]
                    cap = lv[0] + lv[1]
                    up = tuple(min(delta * parent[b] - before[b] - after[b], m[b], cap) for b in (0, 1))
                    c = (m[0] - k * m[1], m[1] - k * m[0])
                    x = _lexmax(lv, up, c, k)
                    if x is None:
                        raise ReductionError(f"no feasible xi at {key!r}; the table is not ({eps}, {delta})-DP")
                    xs.append(x)
                ps: List[Pair] = []
                for i, key in enumerate(keys):
                    m = mus[i]
                    before = [sum(x[b] for x in ps) for b in (0, 1)]
                    if delta > 0:
                        lo = (xs[i][0] / delta, xs[i][1] / delta)
                        after = [sum(x[b] for x in xs[i + 1:]) / delta for b in (0, 1)]
                        c = ((m[0] - k * m[1]) / delta, (m[1] - k * m[0]) / delta)
                    else:
                        if any(x[0] > SOLVER_TOL or x[1] > SOLVER_TOL for x in xs):
                            raise ReductionError("pure tables must have vanishing xi")
                        lo, after, c = (0.0, 0.0), [0.0, 0.0], (math.inf, math.inf)
                    up = tuple(parent[b] - before[b] - after[b] for b in (0, 1))
                    x = _select_equal_or_lexmax(lo, up, c, k)
                    if x is None:
                        raise ReductionError(f"no feasible phi at {key!r}; the table is not ({eps}, {delta})-DP")
                    ps.append(x)
                for key, x, p in zip(keys, xs, ps):
                    if key in mu.mu[t]:
                        xi[t][key] = x
                        phi[t][key] = p
    return ReductionTables(mu, control, eps, delta, xi, phi)


def compute_psi(tables: ReductionTables) -> ReductionTables:
    g, delta = tables.control.growth, tables.delta
    psi: List[Dict[Key, Pair]] = []
    for t, level in enumerate(tables.mu.mu[: tables.horizon + 1]):
        row: Dict[Key, Pair] = {}
        for key, m in level.items():
            f = tables.phi[t].get(key, ZERO)
            if delta == 1:
                row[key] = f
                continue
            scale = (1 - delta) * (g - 1)
            row[key] = tuple((g * m[b] - delta * g * f[b] - m[1 - b] + delta * f[1 - b]) / scale for b in (0, 1))
        psi.append(row)
    tables.psi = psi
    return tables


def build_tables(mu: AnswerTable, epsilon: float, delta: float) -> ReductionTables:
    if epsilon <= 0:
        raise ValueError("the decomposition needs epsilon > 0")
    control = compute_L(mu, epsilon)
    return compute_psi(compute_xi_phi(mu, control, delta, epsilon))


# ---------------------------------------------------------------- diagnostics


def _children(mu: AnswerTable, t: int):
    for h in mu.mu[t - 1]:
        for q in mu.queries:
            yield h, q, [h + (q, a) for a in mu.answers]


def _query_sequence(key: Key) -> Tuple[Message, ...]:
    return key[0::2]


def agreeing_query_sequences(mu: AnswerTable) -> set:
    """Query sequences along which both secrets induce identical answer laws."""
    bad = set()
    for level in mu.mu:
        for key, (m0, m1) in level.items():
            if abs(m0 - m1) > TABLE_TOL:
                bad.add(_query_sequence(key))
    good = set()
    for level in mu.mu:
        for key in level:
            qs = _query_sequence(key)
            if not any(qs[:i] in bad for i in range(len(qs) + 1)):
                good.add(qs)
    return good


def condition_residuals(tables: ReductionTables) -> Dict[str, float]:
    """Worst violations (0 when satisfied) of the structural conditions and identities."""
    mu, ctl, delta = tables.mu, tables.control, tables.delta
    g = ctl.growth
    k = 1 / g
    T = tables.horizon
    res = {name: 0.0 for name in ("exposed_covers_L", "ratio_gap", "phi_sums", "equal_secrets",
                                  "mixture", "psi_negative", "psi_sums", "xi_bounds", "L_below_mu", "L_dominance")}
    keep = g / (1 + g)
    agree = agreeing_query_sequences(mu)
    for t in range(T + 1):
        for key, m in mu.mu[t].items():
            f = tables.phi[t].get(key, ZERO)
            x = tables.xi[t].get(key, ZERO)
            s = tables.psi[t].get(key, ZERO)
            lv = ctl.l[t].get(key, ZERO)
            for b in (0, 1):
                res["exposed_covers_L"] = max(res["exposed_covers_L"], lv[b] - delta * f[b])
                gap = delta * f[b] - k * delta * f[1 - b] - (m[b] - k * m[1 - b])
                res["ratio_gap"] = max(res["ratio_gap"], gap)
                mix = delta * f[b] + (1 - delta) * keep * s[b] + (1 - delta) * (1 - keep) * s[1 - b]
                res["mixture"] = max(res["mixture"], abs(mix - m[b]))
                res["psi_negative"] = max(res["psi_negative"], -s[b])
                res["L_below_mu"] = max(res["L_below_mu"], lv[b] - m[b])
                if t > 0:
                    res["xi_bounds"] = max(res["xi_bounds"], lv[b] - x[b], x[b] - delta * f[b])
            if t > 0 and _query_sequence(key) in agree:
                floor = min(m[0], lv[0] + lv[1])
                res["equal_secrets"] = max(res["equal_secrets"], abs(f[0] - f[1]), floor - f[0], floor - f[1])
        if t == 0:
            continue
        for h, q, keys in _children(mu, t):
            for b in (0, 1):
                parent_phi = tables.phi[t - 1].get(h, ZERO)[b]
                parent_psi = tables.psi[t - 1].get(h, ZERO)[b]
                parent_l = ctl.l[t - 1].get(h, ZERO)[b]
                res["phi_sums"] = max(res["phi_sums"], abs(sum(tables.phi[t].get(x, ZERO)[b] for x in keys) - parent_phi))
                res["psi_sums"] = max(res["psi_sums"], abs(sum(tables.psi[t].get(x, ZERO)[b] for x in keys) - parent_psi))
                res["L_dominance"] = max(res["L_dominance"], sum(ctl.l[t].get(x, ZERO)[b] for x in keys) - parent_l)
    return res


def horizon_gap(mu_long: AnswerTable, epsilon: float, horizon: int) -> Tuple[float, float]:
    """(largest decrease, largest increase) of L from horizon to horizon + 1; the first must be ~0."""
    short = compute_L(mu_long, epsilon, horizon)
    longer = compute_L(mu_long, epsilon, horizon + 1)
    drop, rise = 0.0, 0.0
    for t in range(horizon + 1):
        for key in set(short.l[t]) | set(longer.l[t]):
            a, b = short.l[t].get(key, ZERO), longer.l[t].get(key, ZERO)
            for i in (0, 1):
                drop = max(drop, a[i] - b[i])
                rise = max(rise, b[i] - a[i])
    return drop, rise


# ---------------------------------------------------------------- simulating post-processor


@dataclass(frozen=True)
class SimulatorState:
    flag: Optional[Flag]
    bit: Optional[int]
    history: Key
    pending: Optional[Message]
    calls: int = 0


class IrrSimulator(Ipm):
    """Answers queries on the left by sampling from the decomposition, consulting an interactive
    randomized response on the right for the exposure flag and, only when needed, the bit."""

    name = "irr_simulator"
    deterministic = False

    def __init__(self, tables: ReductionTables, tol: float = TABLE_TOL):
        self.tables = tables
        self.tol = tol
        self.answers = tables.mu.answers
        self.queries = set(tables.mu.queries)

    def initial_state(self):
        return SimulatorState(None, None, (), None)

    def family(self, flag: Flag, b: int, h: Key, q: Message) -> Optional[List[float]]:
        table = "phi" if flag is Flag.EXPOSED else "psi"
        denom = self.tables.get(table, h)[b]
        if denom <= 0:
            return None
        return [max(0.0, self.tables.get(table, h + (q, a))[b]) / denom for a in self.answers]

    def _same(self, u, v) -> bool:
        if u is None or v is None:
            return u is v
        return all(abs(x - y) <= self.tol for x, y in zip(u, v))

    def needs_bit(self, h: Key, q: Message) -> bool:
        return any(not self._same(self.family(f, 0, h, q), self.family(f, 1, h, q)) for f in Flag)

    def _answer(self, st: SimulatorState):
        h, q = st.history, st.pending
        if st.bit is None and self.needs_bit(h, q):
            return [(1, SimulatorState(st.flag, None, h, q, st.calls + 1), Side.RIGHT, QSTAR)]
        law = self.family(st.flag, 0 if st.bit is None else st.bit, h, q)
        if law is None:
            raise ReductionError(f"zero denominator on a reachable transcript {h!r}")
        return [(p, SimulatorState(st.flag, st.bit, h + (q, a), None, st.calls), Side.LEFT, a)
                for p, a in zip(law, self.answers) if p > 0]

    def _react(self, st, side, msg):
        if side is Side.LEFT:
            if msg not in self.queries:
                return [(1, st, Side.LEFT, HALT)]
            if len(st.history) // 2 >= self.tables.horizon:
                return [(1, st, Side.LEFT, HALT)]
            st = SimulatorState(st.flag, st.bit, st.history, msg, st.calls)
            if st.flag is None:
                return [(1, SimulatorState(None, None, st.history, msg, st.calls + 1), Side.RIGHT, QSTAR)]
            return self._answer(st)
        if msg.kind is not Kind.ANSWER or st.pending is None:
            return [(1, st, Side.LEFT, HALT)]
        if st.flag is None:
            return self._answer(SimulatorState(msg.payload, None, st.history, st.pending, st.calls))
        return self._answer(SimulatorState(st.flag, msg.payload, st.history, st.pending, st.calls))


def build_irr_postprocessor(tables: ReductionTables) -> IrrSimulator:
    return IrrSimulator(tables)


def simulated_mechanism(tables: ReductionTables, b: int) -> Mechanism:
    params = PrivacyParams(tables.epsilon, tables.delta)
    return compose_post(IrrSimulator(tables), irr(params, b))


def _padded(view: Sequence[Message], queries: Sequence[Message]) -> Key:
    pairs = list(view)
    if pairs and pairs[-1].kind is Kind.HALT and len(pairs) % 2 == 1:
        pairs = pairs[:-1]
    t = len(pairs) // 2
    if pairs and pairs[-1].kind is Kind.HALT:
        for q in queries[t:]:
            pairs += [q, HALT]
    return tuple(pairs)


def end_to_end_gap(tables: ReductionTables) -> float:
    """Largest |simulated view probability - table probability| over all fixed query sequences."""
    mu = tables.mu
    T = tables.horizon
    worst = 0.0
    for seq in itertools.product(mu.queries, repeat=T):
        adv = ScriptedAdversary(seq)
        for b in (0, 1):
            views = enumerate_views(adv, simulated_mechanism(tables, b), T + 1)
            sim: Dict[Key, float] = {}
            for view, p in views.mass.items():
                key = _padded(view, seq)
                sim[key] = sim.get(key, 0.0) + float(p)
            truth = {k: v[b] for k, v in mu.mu[T].items() if _query_sequence(k) == seq}
            for key in set(sim) | set(truth):
                worst = max(worst, abs(sim.get(key, 0.0) - truth.get(key, 0.0)))
    return worst


def irr_calls(tables: ReductionTables, b: int, seq: Sequence[Message]) -> int:
    """Most interactions with the randomized response over all runs of a fixed query sequence."""
    mech = simulated_mechanism(tables, b)
    frontier = [mech.initial_state()]
    most = 0
    for q in seq:
        nxt = []
        for state in frontier:
            for _, s2, a in mech.transitions(state, q):
                if a.kind is Kind.HALT:
                    continue
                most = max(most, s2[0].calls)
                nxt.append(s2)
        frontier = nxt
    return most


# ---------------------------------------------------------------- finite test instances


class TableMechanism(Mechanism):
    """Interactive mechanism given by explicit conditional answer laws for each secret."""

    name = "table"

    def __init__(self, laws: Dict[int, Dict[Tuple[Any, ...], Dict[Any, List[float]]]], queries: Sequence[Any],
                 answers: Sequence[Any], rounds: int, secret: int = 0):
        self.laws = laws
        self.rounds = rounds
        self.secret = secret
        self.query_space = tuple(query(q) for q in queries)
        self.answer_space = tuple(answer(a) for a in answers)
        self._answers = tuple(answers)

    def initial_state(self):
        return (self.secret, ())

    def _transitions(self, state, msg):
        b, seen = state
        if len(seen) // 2 >= self.rounds or msg not in self.query_space:
            return [(1, state, HALT)]
        law = self.laws[b][seen][msg.payload]
        return [(p, (b, seen + (msg.payload, a)), answer(a)) for p, a in zip(law, self._answers)]


def random_table_mechanism(rng: np.random.Generator, queries=(0, 1), answers=(0, 1), rounds: int = 2,
                           mixing: float = 0.3, same: bool = False) -> Tuple[TableMechanism, TableMechanism]:
    """Two secrets' worth of random conditional laws, the second a mixture-perturbation of the first."""
    laws = {0: {}, 1: {}}
    histories = [()]
    for _ in range(rounds):
        nxt = []
        for h in histories:
            laws[0][h], laws[1][h] = {}, {}
            for q in queries:
                base = rng.dirichlet(np.ones(len(answers)))
                other = base if same else (1 - mixing) * base + mixing * rng.dirichlet(np.ones(len(answers)))
                laws[0][h][q] = [float(x) for x in base]
                laws[1][h][q] = [float(x) for x in other]
                nxt.extend(h + (q, a) for a in answers)
        histories = nxt
    return (TableMechanism(laws, queries, answers, rounds, 0), TableMechanism(laws, queries, answers, rounds, 1))
