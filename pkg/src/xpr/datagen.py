"""Synthetic corpora: a random knowledge base plus templated utterances.

Gold programs are drawn without replacement from every executable program the
domain's phrase table can express (properties in declaration order, at most
one condition per property), then realized as text by filling a sentence
template with one phrase per condition.
"""

from __future__ import annotations

import itertools
import random
import string
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .executor import CATEGORICAL, NUMERIC, KnowledgeBase, reward
from .minilang import EQ, GT, LT, MAX_CONJUNCTS, Condition, Program, parse, render


class SpecError(ValueError):
    pass


@dataclass
class PropertySpec:
    name: str
    kind: str
    values: Sequence
    # op -> surface patterns containing "{v}"
    phrases: Dict[str, Sequence[str]] = field(default_factory=dict)


@dataclass
class EntitySpec:
    name: str
    words: Sequence[str]
    properties: Sequence[PropertySpec]


@dataclass
class DomainSpec:
    entities: Sequence[EntitySpec]
    templates: Sequence[str] = ("show me {type} {conds}",)
    rows_per_type: int = 40
    max_conjuncts: int = 3
    n_examples: int = 1000
    n_dev: int = 0
    noise_words: Sequence[str] = ()
    noise_prob: float = 0.0
    # drop one condition's mention from multi-condition utterances
    omit_prob: float = 0.0
    # extra phrase-table entries keyed by property name, merged into the
    # matching PropertySpec; a key naming no property is a SpecError
    extra_phrases: Dict[str, Dict[str, Sequence[str]]] = field(default_factory=dict)
    seed: int = 0


@dataclass(frozen=True)
class Example:
    id: str
    tokens: Tuple[str, ...]
    program: Optional[Program]

    @property
    def utterance(self) -> str:
        return " ".join(self.tokens)


@dataclass
class Corpus:
    labeled: List[Example]
    unlabeled: List[Example]
    hidden_gold: Dict[str, Program]
    dev: List[Example] = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.labeled)

    @property
    def M(self) -> int:
        return len(self.unlabeled)


def _validate(spec: DomainSpec) -> Dict[str, PropertySpec]:
    props: Dict[str, PropertySpec] = {}
    for ent in spec.entities:
        if not ent.words:
            raise SpecError(f"entity {ent.name!r} has no surface words")
        for p in ent.properties:
            if p.name in props:
                raise SpecError(f"property {p.name!r} declared twice")
            if p.kind not in (NUMERIC, CATEGORICAL):
                raise SpecError(f"property {p.name!r}: bad kind {p.kind!r}")
            props[p.name] = p
    for name, table in spec.extra_phrases.items():
        if name not in props:
            raise SpecError(f"phrase table references unknown property {name!r}")
        for op, pats in table.items():
            merged = list(props[name].phrases.get(op, ())) + list(pats)
            props[name].phrases = {**props[name].phrases, op: merged}
    for p in props.values():
        if not p.phrases:
            raise SpecError(f"property {p.name!r} has no phrases")
        for op, pats in p.phrases.items():
            if op not in (EQ, GT, LT):
                raise SpecError(f"property {p.name!r}: unknown operator {op!r}")
            if not pats or any("{v}" not in s for s in pats):
                raise SpecError(f"property {p.name!r}: every phrase needs a {{v}} slot")
    for t in spec.templates:
        slots = {f for _, f, _, _ in string.Formatter().parse(t) if f is not None}
        if slots != {"type", "conds"}:
            unknown = sorted(slots - {"type", "conds"})
            raise SpecError(f"template {t!r} references unknown slot(s) {unknown}"
                            if unknown else f"template {t!r} needs {{type}} and {{conds}} slots")
    if not 1 <= spec.max_conjuncts <= MAX_CONJUNCTS:
        raise SpecError("max_conjuncts out of range")
    return props


def build_kb(spec: DomainSpec, rng: random.Random) -> KnowledgeBase:
    schema, rows, types = {}, {}, {}
    for ent in spec.entities:
        schema[ent.name] = {p.name: p.kind for p in ent.properties}
        for i in range(spec.rows_per_type):
            eid = f"{ent.name}_{i}"
            types[eid] = ent.name
            rows[eid] = {p.name: rng.choice(list(p.values)) for p in ent.properties}
    lits = {(e.name, p.name): tuple(p.values) for e in spec.entities for p in e.properties}
    return KnowledgeBase(schema, rows, types, lits, spec.max_conjuncts)


def candidate_programs(spec: DomainSpec) -> List[Program]:
    """Every program the phrase table can express, in a fixed order."""
    out = []
    for ent in spec.entities:
        choices = []
        for p in ent.properties:
            choices.append([Condition(p.name, op, v) for op in p.phrases for v in p.values])
        for k in range(1, spec.max_conjuncts + 1):
            for subset in itertools.combinations(range(len(choices)), k):
                for conds in itertools.product(*(choices[i] for i in subset)):
                    out.append(Program(ent.name, conds))
    return out


def realize(p: Program, spec: DomainSpec, props: Dict[str, PropertySpec],
            rng: random.Random) -> Tuple[str, ...]:
    ent = next(e for e in spec.entities if e.name == p.target_type)
    conds = list(p.conditions)
    if len(conds) > 1 and rng.random() < spec.omit_prob:
        conds.pop(rng.randrange(len(conds)))
    pieces = []
    for c in conds:
        pat = rng.choice(list(props[c.property].phrases[c.op]))
        pieces.append(pat.format(v=c.value))
    text = rng.choice(list(spec.templates)).format(
        type=rng.choice(list(ent.words)), conds=" and ".join(pieces)
    )
    toks = text.split()
    if spec.noise_words and rng.random() < spec.noise_prob:
        toks.insert(rng.randrange(len(toks) + 1), rng.choice(list(spec.noise_words)))
    return tuple(toks)


def generate(spec: DomainSpec) -> Tuple[KnowledgeBase, List[Example], List[Example]]:
    """Build the KB and ``n_examples`` (+ ``n_dev``) examples with distinct gold programs.

    Returns ``(kb, examples, dev)``. If the domain expresses fewer executable
    programs than requested, every one of them is used.
    """
    props = _validate(spec)
    rng = random.Random(spec.seed)
    kb = build_kb(spec, rng)
    pool = [p for p in candidate_programs(spec) if reward(p, kb)]
    rng.shuffle(pool)
    pool = pool[: spec.n_examples + spec.n_dev]
    train = [Example(f"ex{i:05d}", realize(p, spec, props, rng), p)
             for i, p in enumerate(pool[: spec.n_examples])]
    dev = [Example(f"dev{i:05d}", realize(p, spec, props, rng), p)
           for i, p in enumerate(pool[spec.n_examples:])]
    return kb, train, dev


def split(examples: Sequence[Example], labeled_frac: float, seed: int) -> Corpus:
    if not 0.0 < labeled_frac < 1.0:
        raise ValueError("labeled_frac must be in (0, 1)")
    order = list(range(len(examples)))
    random.Random(seed).shuffle(order)
    n_lab = int(round(labeled_frac * len(examples)))
    lab_idx = sorted(order[:n_lab])
    unl_idx = sorted(order[n_lab:])
    labeled = [examples[i] for i in lab_idx]
    unlabeled = [Example(examples[i].id, examples[i].tokens, None) for i in unl_idx]
    hidden = {examples[i].id: examples[i].program for i in unl_idx}
    return Corpus(labeled, unlabeled, hidden)


# -- default domain -----------------------------------------------------------


def _numeric(name, values, eq, gt, lt):
    return PropertySpec(name, NUMERIC, values, {EQ: eq, GT: gt, LT: lt})


def _categorical(name, values, eq):
    return PropertySpec(name, CATEGORICAL, values, {EQ: eq})


def default_domain(**overrides) -> DomainSpec:
    """Restaurants and hotels, in the spirit of a small booking assistant."""
    restaurant = EntitySpec(
        "restaurant",
        ["restaurants", "places to eat", "eateries"],
        [
            _numeric("star_rating", [1, 2, 3, 4, 5],
                     ["rated {v} stars", "with {v} stars"],
                     ["rated above {v} stars", "with more than {v} stars"],
                     ["rated below {v} stars", "with fewer than {v} stars"]),
            _numeric("price", [1, 2, 3, 4],
                     ["at price level {v}", "costing level {v}"],
                     ["pricier than level {v}", "above price level {v}"],
                     ["cheaper than level {v}", "below price level {v}"]),
            _categorical("cuisine", ["thai", "italian", "chinese", "mexican", "indian"],
                         ["serving {v} food", "with {v} cuisine"]),
            _categorical("area", ["north", "south", "east", "west"],
                         ["in the {v}", "located in the {v} district"]),
        ],
    )
    hotel = EntitySpec(
        "hotel",
        ["hotels", "places to stay"],
        [
            _numeric("hotel_stars", [1, 2, 3, 4, 5],
                     ["with a {v} star rating", "classed {v} stars"],
                     ["classed above {v} stars", "with over {v} stars"],
                     ["classed below {v} stars", "with under {v} stars"]),
            _numeric("rooms", [10, 20, 50, 100],
                     ["with {v} rooms", "having {v} rooms"],
                     ["with more than {v} rooms", "having over {v} rooms"],
                     ["with fewer than {v} rooms", "having under {v} rooms"]),
            _categorical("district", ["harbor", "center", "airport", "old_town"],
                         ["near the {v}", "in the {v} quarter"]),
        ],
    )
    kw = dict(
        entities=[restaurant, hotel],
        templates=["show me {type} {conds}", "find {type} {conds}",
                   "which {type} are {conds}", "list all {type} {conds}"],
        noise_words=["please", "now", "quickly", "again"],
        noise_prob=0.2,
    )
    kw.update(overrides)
    return DomainSpec(**kw)


# -- file IO --------------------------------------------------------------------


def dumps_corpus(corpus: Corpus, header: Sequence[str] = ()) -> Tuple[str, str]:
    """Corpus file text and the hidden-gold sidecar text."""
    lines = [f"# {h}" for h in header]
    rows = [(e, "labeled") for e in corpus.labeled] + [(e, "unlabeled") for e in corpus.unlabeled]
    rows.sort(key=lambda r: r[0].id)
    for e, kind in rows:
        prog = render(e.program) if e.program is not None else ""
        lines.append(f"{e.id}\t{kind}\t{e.utterance}\t{prog}")
    side = [f"# {h}" for h in header]
    side += [f"{i}\t{render(p)}" for i, p in sorted(corpus.hidden_gold.items())]
    return "\n".join(lines) + "\n", "\n".join(side) + "\n"


def loads_corpus(text: str, sidecar: str = "") -> Corpus:
    labeled, unlabeled = [], []
    ids = set()
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"corpus line needs 4 tab-separated fields: {line!r}")
        eid, kind, utt, prog = fields
        if eid in ids:
            raise ValueError(f"duplicate example id {eid!r}")
        ids.add(eid)
        toks = tuple(utt.split())
        if kind == "labeled":
            labeled.append(Example(eid, toks, parse(prog)))
        elif kind == "unlabeled":
            unlabeled.append(Example(eid, toks, None))
        else:
            raise ValueError(f"bad split marker {kind!r}")
    hidden = {}
    for line in sidecar.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        eid, prog = line.split("\t")
        hidden[eid] = parse(prog)
    return Corpus(labeled, unlabeled, hidden)


def save_corpus(corpus: Corpus, path, sidecar_path, header: Sequence[str] = ()) -> None:
    text, side = dumps_corpus(corpus, header)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    with open(sidecar_path, "w", encoding="utf-8") as f:
        f.write(side)


def load_corpus(path, sidecar_path=None) -> Corpus:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    side = ""
    if sidecar_path is not None:
        with open(sidecar_path, encoding="utf-8") as f:
            side = f.read()
    return loads_corpus(text, side)
