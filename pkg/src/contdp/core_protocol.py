"""Message-passing substrate for interactive and continual mechanisms.

A mechanism is an immutable description plus an explicit state value.  Every
transition goes through ``transitions`` (exact distribution, used by the
enumeration oracle) or ``sample`` (one seeded draw).  Post-processing
mechanisms sit between a left and a right party and are composed with
``compose_post`` and ``chain``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, List, Optional, Sequence, Tuple

import numpy as np

Prob = Any  # float or Fraction


class Kind(enum.Enum):
    CREATE = "create"
    QUERY = "query"
    PAIR = "pair"
    ANSWER = "answer"
    ACK = "ack"
    HALT = "halt"


class Signal(enum.Enum):
    """The two flag symbols exchanged by mechanisms (top / bottom)."""

    TOP = "T"
    BOTTOM = "F"

    def __repr__(self) -> str:
        return self.value


class Side(enum.Enum):
    LEFT = "L"
    RIGHT = "R"


@dataclass(frozen=True)
class Message:
    kind: Kind
    payload: Any = None

    def __post_init__(self) -> None:
        if self.kind is Kind.HALT and self.payload is not None:
            raise ValueError("halt carries no payload")
        if self.kind is Kind.PAIR:
            items = self.payload
            if not (isinstance(items, tuple) and len(items) == 2):
                raise ValueError("a pair message holds exactly two messages")
            for item in items:
                if not isinstance(item, Message) or item.kind not in (Kind.QUERY, Kind.CREATE):
                    raise ValueError("pair elements must be query or creation messages")

    def __hash__(self) -> int:
        # views are long tuples of messages and get hashed constantly
        try:
            return self.__dict__["_hash"]
        except KeyError:
            h = hash((self.kind, self.payload))
            object.__setattr__(self, "_hash", h)
            return h

    def __repr__(self) -> str:
        if self.kind is Kind.HALT:
            return "halt"
        if self.kind is Kind.ACK:
            return "ack"
        if self.kind is Kind.PAIR:
            return f"<{self.payload[0]!r}|{self.payload[1]!r}>"
        return f"{self.kind.value}:{self.payload!r}"


HALT = Message(Kind.HALT)
ACK = Message(Kind.ACK)


def query(payload: Any) -> Message:
    return Message(Kind.QUERY, payload)


def answer(payload: Any) -> Message:
    return Message(Kind.ANSWER, payload)


def create(creation: Any) -> Message:
    return Message(Kind.CREATE, creation)


def pair(first: Any, second: Any) -> Message:
    """Pair of two queries; raw payloads are wrapped as queries."""
    first = first if isinstance(first, Message) else query(first)
    second = second if isinstance(second, Message) else query(second)
    return Message(Kind.PAIR, (first, second))


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: Any = 0.0
    delta: Any = 0.0
    # exact e^epsilon, for rational arithmetic when epsilon is a log of a rational
    growth: Any = None

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0 <= self.delta <= 1:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.growth is not None and self.growth < 1:
            raise ValueError("growth factor e^epsilon must be at least 1")

    @classmethod
    def exact(cls, growth: Any, delta: Any) -> "PrivacyParams":
        growth = Fraction(growth)
        return cls(math.log(growth), Fraction(delta), growth)

    @property
    def exp_epsilon(self) -> Any:
        if self.growth is not None:
            return self.growth
        return math.exp(self.epsilon)

    def key(self) -> Tuple[Any, Any]:
        return (self.epsilon, self.delta)


class _Halted:
    def __repr__(self) -> str:
        return "HALTED"


HALTED = _Halted()


class NotEnumerable(TypeError):
    pass


class ProtocolError(RuntimeError):
    pass


def draw_index(weights: Sequence[Prob], rng: np.random.Generator) -> int:
    u = rng.random()
    acc = 0.0
    for i, w in enumerate(weights):
        acc += float(w)
        if u < acc:
            return i
    # rounding slack: return the last positive entry
    for i in range(len(weights) - 1, -1, -1):
        if weights[i] > 0:
            return i
    raise ProtocolError("empty distribution")


class Mechanism:
    """Randomized transducer: (state, message) -> distribution over (state, message).

    Subclasses implement ``_transitions`` when their answer law is finite and
    exactly known, or override ``_sample`` for noise-driven mechanisms.
    After emitting a halt the state becomes ``HALTED`` and stays there.
    """

    name = "mechanism"
    enumerable = True
    absorb_halt = True
    answer_space: Optional[Tuple[Message, ...]] = None
    query_space: Optional[Tuple[Message, ...]] = None

    def initial_state(self) -> Any:
        return None

    def valid_query(self, payload: Any) -> bool:
        return True

    def _transitions(self, state: Any, msg: Optional[Message]) -> List[Tuple[Prob, Any, Message]]:
        raise NotEnumerable(f"{self.name} has no finite transition table")

    def _sample(self, state: Any, msg: Optional[Message], rng: np.random.Generator) -> Tuple[Any, Message]:
        options = self.transitions(state, msg)
        i = draw_index([p for p, _, _ in options], rng)
        return options[i][1], options[i][2]

    def transitions(self, state: Any, msg: Optional[Message]) -> List[Tuple[Prob, Any, Message]]:
        if state is HALTED:
            return [(1, HALTED, HALT)]
        out = []
        for p, nxt, reply in self._transitions(state, msg):
            if p == 0:
                continue
            out.append((p, HALTED if self.absorb_halt and reply.kind is Kind.HALT else nxt, reply))
        return out

    def sample(self, state: Any, msg: Optional[Message], rng: np.random.Generator) -> Tuple[Any, Message]:
        if state is HALTED:
            return HALTED, HALT
        nxt, reply = self._sample(state, msg, rng)
        return (HALTED if self.absorb_halt and reply.kind is Kind.HALT else nxt), reply


class Adversary(Mechanism):
    """A mechanism that opens the interaction (it receives ``None`` first) and reports a guess."""

    name = "adversary"
    # keep the final state after halting so the guess stays readable
    absorb_halt = False

    def guess(self, state: Any) -> Optional[int]:
        return None


class Ipm:
    """Interactive post-processor between a left and a right party."""

    name = "ipm"
    deterministic = True
    # declared message spaces; None leaves a side unconstrained
    left_queries: Optional[Tuple[Message, ...]] = None
    right_queries: Optional[Tuple[Message, ...]] = None

    def initial_state(self) -> Any:
        return None

    def _react(self, state: Any, side: Side, msg: Message) -> List[Tuple[Prob, Any, Side, Message]]:
        raise NotImplementedError

    def react(self, state: Any, side: Side, msg: Message) -> List[Tuple[Prob, Any, Side, Message]]:
        if state is HALTED:
            return [(1, HALTED, Side.LEFT, HALT)]
        out = []
        for p, nxt, out_side, reply in self._react(state, side, msg):
            if p == 0:
                continue
            if out_side is Side.LEFT and reply.kind is Kind.HALT:
                nxt = HALTED
            out.append((p, nxt, out_side, reply))
        return out

    def sample_react(self, state: Any, side: Side, msg: Message, rng: np.random.Generator):
        options = self.react(state, side, msg)
        if len(options) == 1:
            return options[0][1:]
        i = draw_index([p for p, _, _, _ in options], rng)
        return options[i][1:]


class IdentityIpm(Ipm):
    name = "identity"

    def _react(self, state, side, msg):
        return [(1, state, Side.RIGHT if side is Side.LEFT else Side.LEFT, msg)]


DEFAULT_LOOP_BOUND = 10**6


class SpaceMismatch(ValueError):
    pass


def _check_spaces(sent: Optional[Tuple[Message, ...]], accepted: Optional[Tuple[Message, ...]], where: str) -> None:
    if sent is None or accepted is None:
        return
    extra = set(sent) - set(accepted)
    if extra:
        raise SpaceMismatch(f"{where}: messages {sorted(map(repr, extra))} are outside the receiver's space")


class PostProcessed(Mechanism):
    """The mechanism obtained by placing ``ipm`` in front of ``mech``."""

    def __init__(self, ipm: Ipm, mech: Mechanism, loop_bound: int = DEFAULT_LOOP_BOUND):
        if not isinstance(ipm, Ipm) or not isinstance(mech, Mechanism):
            raise TypeError("compose_post expects an Ipm and a Mechanism")
        _check_spaces(ipm.right_queries, mech.query_space, f"{ipm.name} -> {mech.name}")
        self.ipm = ipm
        self.mech = mech
        self.loop_bound = loop_bound
        self.name = f"{ipm.name}*{mech.name}"
        self.enumerable = mech.enumerable
        self.query_space = None
        self.answer_space = None

    def initial_state(self):
        return (self.ipm.initial_state(), self.mech.initial_state())

    def _transitions(self, state, msg):
        ipm_state, mech_state = state
        done = []
        frontier = [(1, ipm_state, mech_state, Side.LEFT, msg)]
        rounds = 0
        while frontier:
            rounds += 1
            if rounds > self.loop_bound:
                raise ProtocolError(f"post-processing loop exceeded {self.loop_bound} round trips")
            nxt_frontier = []
            for p, s_ipm, s_mech, side, m in frontier:
                for p2, s_ipm2, out_side, m2 in self.ipm.react(s_ipm, side, m):
                    if out_side is Side.LEFT:
                        done.append((p * p2, (s_ipm2, s_mech), m2))
                        continue
                    for p3, s_mech2, reply in self.mech.transitions(s_mech, m2):
                        nxt_frontier.append((p * p2 * p3, s_ipm2, s_mech2, Side.RIGHT, reply))
            frontier = nxt_frontier
        return done

    def _sample(self, state, msg, rng):
        s_ipm, s_mech = state
        side, m = Side.LEFT, msg
        for _ in range(self.loop_bound):
            s_ipm, side, m = self.ipm.sample_react(s_ipm, side, m, rng)
            if side is Side.LEFT:
                return (s_ipm, s_mech), m
            s_mech, m = self.mech.sample(s_mech, m, rng)
            side = Side.RIGHT
        raise ProtocolError(f"post-processing loop exceeded {self.loop_bound} round trips")


def compose_post(ipm: Ipm, mech: Mechanism, loop_bound: int = DEFAULT_LOOP_BOUND) -> Mechanism:
    return PostProcessed(ipm, mech, loop_bound)


class Chain(Ipm):
    """Two post-processors glued so that the right side of the first feeds the second."""

    def __init__(self, first: Ipm, second: Ipm, loop_bound: int = DEFAULT_LOOP_BOUND):
        if not isinstance(first, Ipm) or not isinstance(second, Ipm):
            raise TypeError("chain expects two Ipm values")
        _check_spaces(first.right_queries, second.left_queries, f"{first.name} -> {second.name}")
        self.first = first
        self.second = second
        self.loop_bound = loop_bound
        self.name = f"{first.name}*{second.name}"
        self.deterministic = first.deterministic and second.deterministic
        self.left_queries = first.left_queries
        self.right_queries = second.right_queries

    def initial_state(self):
        return (self.first.initial_state(), self.second.initial_state())

    def _react(self, state, side, msg):
        s1, s2 = state
        # the party holding the message, and the side it arrives on
        holder = 0 if side is Side.LEFT else 1
        frontier = [(1, s1, s2, holder, side, msg)]
        done = []
        rounds = 0
        while frontier:
            rounds += 1
            if rounds > self.loop_bound:
                raise ProtocolError(f"chained relay exceeded {self.loop_bound} hops")
            nxt = []
            for p, a, b, who, arrive, m in frontier:
                if who == 0:
                    for p2, a2, out_side, m2 in self.first.react(a, arrive, m):
                        if out_side is Side.LEFT:
                            done.append((p * p2, (a2, b), Side.LEFT, m2))
                        else:
                            nxt.append((p * p2, a2, b, 1, Side.LEFT, m2))
                else:
                    for p2, b2, out_side, m2 in self.second.react(b, arrive, m):
                        if out_side is Side.RIGHT:
                            done.append((p * p2, (a, b2), Side.RIGHT, m2))
                        else:
                            nxt.append((p * p2, a, b2, 0, Side.RIGHT, m2))
            frontier = nxt
        return done


def chain(first: Ipm, second: Ipm) -> Ipm:
    return Chain(first, second)


class Direction(enum.Enum):
    TO_MECHANISM = ">"
    TO_ADVERSARY = "<"


@dataclass(frozen=True)
class Transcript:
    seed: int
    messages: Tuple[Tuple[Direction, Message], ...]
    adversary_state: Any = field(default=None, compare=False)
    mechanism_state: Any = field(default=None, compare=False)

    def view(self) -> Tuple[Message, ...]:
        return tuple(m for _, m in self.messages)

    def answers(self) -> Tuple[Message, ...]:
        return tuple(m for d, m in self.messages if d is Direction.TO_ADVERSARY)


class RoundBoundExceeded(ProtocolError):
    def __init__(self, partial: Transcript):
        super().__init__(f"interaction exceeded its round bound after {len(partial.messages)} messages")
        self.partial = partial


ADVERSARY, MECHANISM = 0, 1


def party_rng(seed: int, round_index: int, party: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, round, party)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, round_index, party])))


def run_interaction(
    adversary: Mechanism,
    mech: Mechanism,
    seed: int,
    max_rounds: int = 10_000,
    adversary_state: Any = None,
    mechanism_state: Any = None,
) -> Transcript:
    a_state = adversary.initial_state() if adversary_state is None else adversary_state
    m_state = mech.initial_state() if mechanism_state is None else mechanism_state
    log: List[Tuple[Direction, Message]] = []
    incoming: Optional[Message] = None
    for rnd in range(max_rounds):
        a_state, out = adversary.sample(a_state, incoming, party_rng(seed, rnd, ADVERSARY))
        log.append((Direction.TO_MECHANISM, out))
        if out.kind is Kind.HALT:
            return Transcript(seed, tuple(log), a_state, m_state)
        m_state, incoming = mech.sample(m_state, out, party_rng(seed, rnd, MECHANISM))
        log.append((Direction.TO_ADVERSARY, incoming))
        if incoming.kind is Kind.HALT:
            return Transcript(seed, tuple(log), a_state, m_state)
    raise RoundBoundExceeded(Transcript(seed, tuple(log), a_state, m_state))


class ScriptedAdversary(Adversary):
    """Sends a fixed list of messages regardless of the answers, then halts."""

    def __init__(self, script: Iterable[Message], final_guess: Optional[int] = None):
        self.script = tuple(script)
        self.final_guess = final_guess
        self.name = "scripted"

    def initial_state(self):
        return 0

    def _transitions(self, state, msg):
        if state >= len(self.script):
            return [(1, state, HALT)]
        return [(1, state + 1, self.script[state])]

    def guess(self, state):
        return self.final_guess


def messages_of(values: Iterable[Any]) -> List[Message]:
    return [v if isinstance(v, Message) else query(v) for v in values]


def tolerance_equal(a: Prob, b: Prob, tol: float) -> bool:
    if isinstance(a, Fraction) and isinstance(b, Fraction):
        return a == b
    return abs(float(a) - float(b)) <= tol

