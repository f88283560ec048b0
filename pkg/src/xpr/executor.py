"""In-memory knowledge base, program execution and the binary reward.

KB file format (UTF-8, one record per line, ``#`` starts a comment)::

    !type <type>
    !prop <type> <prop> numeric|categorical
    !conjuncts <n>                        optional, grammar conjunct limit
    !lit <type> <prop> <tok> [<tok> ...]  optional, decoder literal vocabulary
    <entity-id> <prop> <value>

Header lines must precede data lines. Each property name belongs to exactly one
type, which is how a data line's entity gets its type. Without ``!lit`` lines
the decoder vocabulary of a property is the sorted set of its observed values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

from .minilang import (
    EQ,
    GT,
    MAX_CONJUNCTS,
    Grammar,
    Literal,
    Program,
    is_numeric,
    parse_literal,
    render_literal,
)

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class ExecutionError(Exception):
    pass


class ExecutionTypeError(ExecutionError, TypeError):
    pass


class UnknownName(ExecutionError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class KBFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class KnowledgeBase:
    """Typed entities; immutable once built.

    ``schema[type][prop]`` is ``"numeric"`` or ``"categorical"``;
    ``rows[entity_id]`` holds that entity's property values.
    """

    schema: Mapping[str, Mapping[str, str]]
    rows: Mapping[str, Mapping[str, Literal]]
    entity_types: Mapping[str, str]
    grammar_literals: Optional[Mapping[Tuple[str, str], Tuple[Literal, ...]]] = None
    max_conjuncts: int = MAX_CONJUNCTS
    _vocab: Dict[Tuple[str, str], FrozenSet[Literal]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )
    _by_type: Dict[str, List[str]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        for eid, row in self.rows.items():
            t = self.entity_types.get(eid)
            if t not in self.schema:
                raise ValueError(f"entity {eid!r} has unknown type {t!r}")
            for prop, v in row.items():
                kind = self.schema[t].get(prop)
                if kind is None:
                    raise ValueError(f"entity {eid!r}: {prop!r} is not a {t} property")
                if (kind == NUMERIC) != is_numeric(v):
                    raise ValueError(f"entity {eid!r}: {prop}={v!r} does not match {kind}")
        for t in self.schema:
            self._by_type[t] = [e for e, et in self.entity_types.items() if et == t]
        for t, props in self.schema.items():
            for p in props:
                vals = {row[p] for eid, row in self.rows.items()
                        if self.entity_types[eid] == t and p in row}
                self._vocab[(t, p)] = frozenset(vals)

    def entities(self, type_name: str) -> List[str]:
        return list(self._by_type.get(type_name, ()))

    def values(self, type_name: str, prop: str) -> FrozenSet[Literal]:
        return self._vocab[(type_name, prop)]

    def grammar(self, max_conjuncts: Optional[int] = None) -> Grammar:
        lits = {}
        for t, props in self.schema.items():
            for p in props:
                if self.grammar_literals and (t, p) in self.grammar_literals:
                    lits[(t, p)] = list(self.grammar_literals[(t, p)])
                else:
                    lits[(t, p)] = sorted(self._vocab[(t, p)], key=_literal_key)
        return Grammar(
            {t: list(props) for t, props in self.schema.items()},
            lits,
            max_conjuncts or self.max_conjuncts,
        )


def _literal_key(v: Literal):
    return (0, v, "") if is_numeric(v) else (1, 0, str(v))


def execute(p: Program, kb: KnowledgeBase) -> FrozenSet[str]:
    props = kb.schema.get(p.target_type)
    if props is None:
        raise UnknownName(f"unknown entity type {p.target_type!r}")
    checks = []
    for c in p.conditions:
        kind = props.get(c.property)
        if kind is None:
            raise UnknownName(f"{c.property!r} is not a {p.target_type} property")
        if kind == CATEGORICAL and c.op != EQ:
            raise ExecutionTypeError(f"{c.op} on categorical property {c.property!r}")
        if (kind == NUMERIC) != is_numeric(c.value):
            raise ExecutionTypeError(f"{c.property} is {kind}, literal {c.value!r} is not")
        if kind == CATEGORICAL and c.value not in kb.values(p.target_type, c.property):
            raise UnknownName(f"unknown value {c.value!r} for {c.property!r}")
        checks.append(c)

    out = set()
    for eid in kb._by_type[p.target_type]:
        row = kb.rows[eid]
        if all(_holds(row.get(c.property), c.op, c.value) for c in checks):
            out.add(eid)
    return frozenset(out)


def _holds(v, op, lit) -> bool:
    if v is None:
        return False
    if op == EQ:
        return v == lit
    if op == GT:
        return v > lit
    return v < lit


def reward(p: Program, kb: KnowledgeBase) -> int:
    """1 iff ``p`` executes without error and returns a non-empty set."""
    try:
        return int(bool(execute(p, kb)))
    except ExecutionError:
        return 0


def denotation_match(p: Program, gold: Program, kb: KnowledgeBase) -> bool:
    try:
        got = execute(p, kb)
    except ExecutionError:
        return False
    return got == execute(gold, kb)


# -- file IO -------------------------------------------------------------


def loads_kb(text: str) -> KnowledgeBase:
    schema: Dict[str, Dict[str, str]] = {}
    owner: Dict[str, str] = {}
    lits: Dict[Tuple[str, str], Tuple[Literal, ...]] = {}
    rows: Dict[str, Dict[str, Literal]] = {}
    types: Dict[str, str] = {}
    conjuncts = MAX_CONJUNCTS
    in_data = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if toks[0].startswith("!"):
            if in_data:
                raise KBFormatError("header line after data", lineno)
            head = toks[0]
            if head == "!type" and len(toks) == 2:
                schema.setdefault(toks[1], {})
            elif head == "!prop" and len(toks) == 4:
                t, p, kind = toks[1:]
                if t not in schema:
                    raise KBFormatError(f"undeclared type {t!r}", lineno)
                if kind not in (NUMERIC, CATEGORICAL):
                    raise KBFormatError(f"bad property kind {kind!r}", lineno)
                if p in owner:
                    raise KBFormatError(f"property {p!r} declared twice", lineno)
                schema[t][p] = kind
                owner[p] = t
            elif head == "!lit" and len(toks) >= 3:
                t, p = toks[1:3]
                if schema.get(t, {}).get(p) is None:
                    raise KBFormatError(f"undeclared property {t}.{p}", lineno)
                lits[(t, p)] = tuple(parse_literal(v) for v in toks[3:])
            elif head == "!conjuncts" and len(toks) == 2:
                conjuncts = int(toks[1])
            else:
                raise KBFormatError(f"malformed header {line!r}", lineno)
            continue
        in_data = True
        if len(toks) != 3:
            raise KBFormatError("data line needs <entity-id> <prop> <value>", lineno)
        eid, p, v = toks
        t = owner.get(p)
        if t is None:
            raise KBFormatError(f"undeclared property {p!r}", lineno)
        if types.setdefault(eid, t) != t:
            raise KBFormatError(f"entity {eid!r} mixes types {types[eid]} and {t}", lineno)
        value = parse_literal(v)
        if (schema[t][p] == NUMERIC) != is_numeric(value):
            raise KBFormatError(f"{p} is {schema[t][p]}, got {v!r}", lineno)
        row = rows.setdefault(eid, {})
        if p in row:
            raise KBFormatError(f"duplicate value for {eid}.{p}", lineno)
        row[p] = value
    return KnowledgeBase(schema, rows, types, lits or None, conjuncts)


def load_kb(path) -> KnowledgeBase:
    with open(path, encoding="utf-8") as f:
        return loads_kb(f.read())


def dumps_kb(kb: KnowledgeBase, header: Iterable[str] = ()) -> str:
    lines = [f"# {h}" for h in header]
    for t, props in kb.schema.items():
        lines.append(f"!type {t}")
        for p, kind in props.items():
            lines.append(f"!prop {t} {p} {kind}")
    lines.append(f"!conjuncts {kb.max_conjuncts}")
    if kb.grammar_literals:
        for (t, p), vs in kb.grammar_literals.items():
            lines.append(f"!lit {t} {p} " + " ".join(render_literal(v) for v in vs))
    for eid, row in kb.rows.items():
        for p, v in row.items():
            lines.append(f"{eid} {p} {render_literal(v)}")
    return "\n".join(lines) + "\n"


def dump_kb(kb: KnowledgeBase, path, header: Iterable[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_kb(kb, header))
