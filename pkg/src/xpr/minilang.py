"""Miniature select-where query language and its action grammar.

Programs look like ``select restaurant where star_rating = 3 and cuisine = thai``.
A :class:`Grammar` turns a program into a sequence of integer actions
(type, then ``prop op value`` per conjunct, separated by AND, closed by STOP)
and exposes the legal-action mask at every decoder state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

Literal = Union[int, float, str]

EQ, GT, LT = "EQ", "GT", "LT"
OPS = (EQ, GT, LT)
OP_SYMBOL = {EQ: "=", GT: ">", LT: "<"}
SYMBOL_OP = {v: k for k, v in OP_SYMBOL.items()}

MAX_CONJUNCTS = 3
DEFAULT_CAPACITY = 10**6


class ProgramSyntaxError(SyntaxError):
    """Raised by :func:`parse`; ``index`` is the 0-based offending token."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (token {index})")
        self.index = index


class UnknownSymbol(KeyError):
    pass


class IllegalAction(ValueError):
    pass


class CapacityExceeded(RuntimeError):
    pass


def parse_literal(token: str) -> Literal:
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def render_literal(value: Literal) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def is_numeric(value: Literal) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True)
class Condition:
    property: str
    op: str
    value: Literal

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown operator {self.op!r}")


@dataclass(frozen=True)
class Program:
    target_type: str
    conditions: Tuple[Condition, ...]

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        if not 1 <= len(self.conditions) <= MAX_CONJUNCTS:
            raise ValueError(
                f"a program needs 1..{MAX_CONJUNCTS} conditions, got {len(self.conditions)}"
            )

    def __str__(self):
        return render(self)


def render(p: Program) -> str:
    parts = ["select", p.target_type, "where"]
    for i, c in enumerate(p.conditions):
        if i:
            parts.append("and")
        parts += [c.property, OP_SYMBOL[c.op], render_literal(c.value)]
    return " ".join(parts)


def parse(text: str) -> Program:
    toks = text.split()

    def expect(i: int, what: str) -> str:
        if i >= len(toks):
            raise ProgramSyntaxError(f"expected {what}, got end of input", i)
        return toks[i]

    if expect(0, "'select'") != "select":
        raise ProgramSyntaxError("expected 'select'", 0)
    target = expect(1, "entity type")
    if target in _KEYWORDS:
        raise ProgramSyntaxError("expected entity type", 1)
    if expect(2, "'where'") != "where":
        raise ProgramSyntaxError("expected 'where'", 2)
    conds = []
    i = 3
    while True:
        prop = expect(i, "property")
        if prop in _KEYWORDS:
            raise ProgramSyntaxError("expected property", i)
        sym = expect(i + 1, "operator")
        if sym not in SYMBOL_OP:
            raise ProgramSyntaxError("expected operator", i + 1)
        val = expect(i + 2, "value")
        if val in _KEYWORDS:
            raise ProgramSyntaxError("expected value", i + 2)
        conds.append(Condition(prop, SYMBOL_OP[sym], parse_literal(val)))
        i += 3
        if i == len(toks):
            break
        if toks[i] != "and":
            raise ProgramSyntaxError("expected 'and' or end of input", i)
        if len(conds) == MAX_CONJUNCTS:
            raise ProgramSyntaxError(f"more than {MAX_CONJUNCTS} conditions", i)
        i += 1
    return Program(target, tuple(conds))


_KEYWORDS = frozenset(["select", "where", "and"]) | frozenset(SYMBOL_OP)

# decoder phases
_TYPE, _PROP, _OP, _VALUE, _JOIN, _DONE = range(6)

# A decoder state is (phase, type index, property token or None, conjunct count).
State = Tuple[int, int, Optional[str], int]


class Grammar:
    """Typed action vocabulary and production rules for the query language.

    Action ids are laid out as ``STOP, AND, types..., properties..., ops...,
    literals...``; this order is also the global lexicographic tie-break.

    ``literals`` maps ``(type, property)`` to the literal tokens the decoder may
    emit after that property. Properties with an empty vocabulary are masked
    out, and so are types left with no usable property.
    """

    STOP = 0
    AND = 1

    def __init__(
        self,
        properties: Dict[str, Sequence[str]],
        literals: Dict[Tuple[str, str], Sequence[Literal]],
        max_conjuncts: int = MAX_CONJUNCTS,
    ):
        if not 1 <= max_conjuncts <= MAX_CONJUNCTS:
            raise ValueError(f"max_conjuncts must be in 1..{MAX_CONJUNCTS}")
        self.max_conjuncts = max_conjuncts
        self.types: List[str] = list(properties)
        self.properties = {t: list(ps) for t, ps in properties.items()}
        self.literals = {
            (t, p): [parse_literal(render_literal(v)) for v in literals.get((t, p), ())]
            for t, ps in self.properties.items()
            for p in ps
        }
        prop_names = _unique(p for ps in self.properties.values() for p in ps)
        lit_tokens = _unique(render_literal(v) for vs in self.literals.values() for v in vs)

        self.symbols: List[Tuple[str, str]] = [("stop", "STOP"), ("and", "AND")]
        self.symbols += [("type", t) for t in self.types]
        self.symbols += [("prop", p) for p in prop_names]
        self.symbols += [("op", o) for o in OPS]
        self.symbols += [("lit", v) for v in lit_tokens]
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self.num_actions = len(self.symbols)
        self._usable = {
            t: [p for p in ps if self.literals[(t, p)]] for t, ps in self.properties.items()
        }
        if not any(self._usable.values()):
            raise ValueError("grammar has no complete program")
        self._mask_cache: Dict[State, np.ndarray] = {}

    # -- state machine -------------------------------------------------

    initial_state: State = (_TYPE, -1, None, 0)

    def legal(self, state: State) -> List[int]:
        phase, ti, prop, n = state
        if phase == _TYPE:
            return [self.index[("type", t)] for t in self.types if self._usable[t]]
        t = self.types[ti]
        if phase == _PROP:
            return sorted(self.index[("prop", p)] for p in self._usable[t])
        if phase == _OP:
            return [self.index[("op", o)] for o in OPS]
        if phase == _VALUE:
            return sorted(
                self.index[("lit", render_literal(v))] for v in self.literals[(t, prop)]
            )
        if phase == _JOIN:
            return [self.STOP, self.AND] if n < self.max_conjuncts else [self.STOP]
        return []

    def mask(self, state: State) -> np.ndarray:
        m = self._mask_cache.get(state)
        if m is None:
            m = np.zeros(self.num_actions, dtype=bool)
            m[self.legal(state)] = True
            m.flags.writeable = False
            self._mask_cache[state] = m
        return m

    def advance(self, state: State, action: int) -> State:
        phase, ti, prop, n = state
        if phase == _DONE or not self.mask(state)[action]:
            raise IllegalAction(f"action {action} ({self.symbols[action][1]}) illegal here")
        kind, name = self.symbols[action]
        if phase == _TYPE:
            return (_PROP, self.types.index(name), None, 0)
        if phase == _PROP:
            return (_OP, ti, name, n)
        if phase == _OP:
            return (_VALUE, ti, prop, n)
        if phase == _VALUE:
            return (_JOIN, ti, None, n + 1)
        if action == self.STOP:
            return (_DONE, ti, None, n)
        return (_PROP, ti, None, n)

    @staticmethod
    def is_final(state: State) -> bool:
        return state[0] == _DONE

    # -- conversion ----------------------------------------------------

    def actions(self, p: Program) -> Tuple[int, ...]:
        if len(p.conditions) > self.max_conjuncts:
            raise UnknownSymbol(f"{len(p.conditions)} conditions exceed grammar limit")
        try:
            out = [self.index[("type", p.target_type)]]
            for i, c in enumerate(p.conditions):
                if i:
                    out.append(self.AND)
                out.append(self.index[("prop", c.property)])
                out.append(self.index[("op", c.op)])
                out.append(self.index[("lit", render_literal(c.value))])
        except KeyError as e:
            raise UnknownSymbol(f"{e.args[0][1]!r} is not in the grammar") from None
        out.append(self.STOP)
        seq = tuple(out)
        self.validate(seq)
        return seq

    def validate(self, seq: Sequence[int]) -> List[State]:
        """States visited before each action; raises IllegalAction on a bad or
        incomplete sequence."""
        state = self.initial_state
        states = []
        for a in seq:
            states.append(state)
            if not 0 <= a < self.num_actions:
                raise IllegalAction(f"action id {a} out of range")
            state = self.advance(state, a)
        if not self.is_final(state):
            raise IllegalAction("incomplete action sequence")
        return states

    def decode(self, seq: Sequence[int]) -> Program:
        self.validate(seq)
        names = [self.symbols[a][1] for a in seq]
        conds = []
        for i in range(1, len(names) - 1, 4):
            conds.append(Condition(names[i], names[i + 1], parse_literal(names[i + 2])))
        return Program(names[0], tuple(conds))

    def count_programs(self) -> int:
        total = 0
        for t in self.types:
            per = len(OPS) * sum(len(self.literals[(t, p)]) for p in self._usable[t])
            total += sum(per**k for k in range(1, self.max_conjuncts + 1))
        return total

    def enumerate_programs(self, capacity: int = DEFAULT_CAPACITY) -> List[Program]:
        return [self.decode(s) for s in self.enumerate_actions(capacity)]

    def enumerate_actions(self, capacity: int = DEFAULT_CAPACITY) -> List[Tuple[int, ...]]:
        n = self.count_programs()
        if n > capacity:
            raise CapacityExceeded(f"{n} programs exceed capacity {capacity}")
        out: List[Tuple[int, ...]] = []

        def walk(state, prefix):
            if self.is_final(state):
                out.append(tuple(prefix))
                return
            for a in self.legal(state):
                prefix.append(a)
                walk(self.advance(state, a), prefix)
                prefix.pop()

        walk(self.initial_state, [])
        return out

    def program_length(self, p: Program) -> int:
        return 4 * len(p.conditions) + 1

    # -- serialization helpers ------------------------------------------

    def header_lines(self) -> List[str]:
        lines = [f"!conjuncts {self.max_conjuncts}"]
        for (t, p), vs in self.literals.items():
            lines.append(f"!lit {t} {p} " + " ".join(render_literal(v) for v in vs))
        return lines

    def __eq__(self, other):
        return (
            isinstance(other, Grammar)
            and self.properties == other.properties
            and self.literals == other.literals
            and self.max_conjuncts == other.max_conjuncts
        )

    def __repr__(self):
        return f"Grammar(types={self.types}, actions={self.num_actions})"


def _unique(items: Iterable[str]) -> List[str]:
    return list(dict.fromkeys(items))


def actions(p: Program, g: Grammar) -> Tuple[int, ...]:
    return g.actions(p)


def enumerate_programs(g: Grammar, capacity: int = DEFAULT_CAPACITY) -> List[Program]:
    return g.enumerate_programs(capacity)
