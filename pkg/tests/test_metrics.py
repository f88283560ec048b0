import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xpr.datagen import Example, default_domain, generate
from xpr.executor import KnowledgeBase
from xpr.metrics import (
    DiagnosticsAccumulator,
    Undefined,
    avg_ratio,
    coverage,
    coverage_per_token,
    denotation_accuracy,
    gold_ratio,
)
from xpr.minilang import parse
from xpr.model import ModelConfig, Parser, Vocab, init_params
from xpr.search import beam_search, partition


class TestRatio:
    def test_two_programs(self):
        acc = DiagnosticsAccumulator()
        acc.update(4, [8, 8], True)
        assert avg_ratio(acc) == 2.0

    def test_undefined_without_executables(self):
        acc = DiagnosticsAccumulator()
        acc.update(5, [], False)
        with pytest.raises(Undefined):
            avg_ratio(acc)

    def test_gold_only_matches_gold_ratio(self):
        kb, examples, _ = generate(default_domain(n_examples=200, seed=0))
        g = kb.grammar()
        acc = DiagnosticsAccumulator()
        for e in examples:
            acc.update(len(e.tokens), [g.program_length(e.program)], True)
        ratio = gold_ratio(examples, g)
        assert avg_ratio(acc) == pytest.approx(ratio)
        lengths = sum(4 * len(e.program.conditions) + 1 for e in examples)
        assert ratio == pytest.approx(lengths / sum(len(e.tokens) for e in examples))
        assert ratio > 0


class TestCoverage:
    def test_half(self):
        acc = DiagnosticsAccumulator()
        acc.update(3, [5], True)
        acc.update(3, [5], False)
        assert coverage(acc) == 0.5
        assert coverage_per_token(acc) == pytest.approx(1 / 6)

    def test_no_examples(self):
        with pytest.raises(Undefined):
            coverage(DiagnosticsAccumulator())

    def _setup(self):
        schema = {"t": {"a": "numeric", "b": "categorical"}}
        rows = {f"e{i}": {"a": i % 3, "b": "xyz"[i % 3]} for i in range(9)}
        kb = KnowledgeBase(schema, rows, {e: "t" for e in rows})
        g = kb.grammar(max_conjuncts=1)
        cfg = ModelConfig(5, g.num_actions, hidden=3, embed=2, init_scale=1.0)
        golds = [parse("select t where a = 1"), parse("select t where b = z"),
                 parse("select t where a > 0")]
        return kb, g, Parser(cfg, g), init_params(cfg, 0), golds

    def _coverage(self, parser, theta, kb, golds, k):
        acc = DiagnosticsAccumulator()
        for i, gold in enumerate(golds):
            part = partition(beam_search(parser, (i + 1,), theta, k), kb)
            acc.update(1, [len(s) for s in part.p_se], any(s.program == gold for s in part.p_se))
        return coverage(acc)

    def test_full_width_beam_is_one(self):
        kb, g, parser, theta, golds = self._setup()
        assert self._coverage(parser, theta, kb, golds, g.count_programs()) == 1.0

    def test_random_theta_below_full_width(self):
        kb, g, parser, theta, golds = self._setup()
        full = self._coverage(parser, theta, kb, golds, g.count_programs())
        for k in (1, 2, 4):
            assert 0 <= self._coverage(parser, theta, kb, golds, k) <= full


counts = st.tuples(st.integers(1, 20), st.lists(st.integers(1, 13), max_size=5), st.booleans())


class TestAccumulator:
    @given(st.lists(st.lists(counts, max_size=4), min_size=3, max_size=3))
    def test_merge_associative(self, batches):
        accs = []
        for batch in batches:
            a = DiagnosticsAccumulator()
            for x_len, lens, hit in batch:
                a.update(x_len, lens, hit)
            accs.append(a)
        a, b, c = accs
        assert a.merge(b).merge(c) == a.merge(b.merge(c)) == c.merge(a).merge(b)

    @given(st.lists(counts, min_size=1, max_size=10))
    def test_ranges(self, items):
        acc = DiagnosticsAccumulator()
        for x_len, lens, hit in items:
            acc.update(x_len, lens, hit)
        assert 0 <= coverage(acc) <= 1
        if acc.ratio_den > 0:
            assert avg_ratio(acc) > 0


def memorize(parser, x, y, theta, steps=300, lr=0.5):
    for _ in range(steps):
        _, g = parser.weighted_loglik([x], [y], np.ones(1), theta)
        theta = theta + lr * g
    return theta


class TestDenotationAccuracy:
    def test_memorized_single_example(self, toy):
        kb, g, parser, theta = toy
        gold = parse("select restaurant where star_rating = 3 and cuisine = thai")
        vocab = Vocab(["thai", "three", "stars"])
        ex = Example("a", ("three", "stars", "thai"), gold)
        theta = memorize(parser, vocab.encode(ex.tokens), gold, theta)
        assert denotation_accuracy(parser, theta, [ex], vocab, kb) == 1.0

    def test_untrained_in_range(self, toy):
        kb, g, parser, theta = toy
        gold = parse("select restaurant where cuisine = thai")
        exs = [Example(str(i), ("w",) * (i + 1), gold) for i in range(3)]
        acc = denotation_accuracy(parser, theta, exs, Vocab(["w"]), kb)
        assert 0.0 <= acc <= 1.0

    def test_relabeling_entity_ids(self, toy):
        kb, g, parser, theta = toy
        renamed = KnowledgeBase(
            kb.schema,
            {"x_" + e: row for e, row in kb.rows.items()},
            {"x_" + e: t for e, t in kb.entity_types.items()},
        )
        assert renamed.grammar() == kb.grammar()
        golds = [parse("select restaurant where star_rating = 3"),
                 parse("select restaurant where star_rating > 3"),
                 parse("select restaurant where cuisine = italian")]
        exs = [Example(str(i), ("w", "v")[: i % 2 + 1], p) for i, p in enumerate(golds)]
        vocab = Vocab(["w", "v"])
        assert (denotation_accuracy(parser, theta, exs, vocab, kb)
                == denotation_accuracy(parser, theta, exs, vocab, renamed))

    def test_empty_set(self, toy):
        kb, g, parser, theta = toy
        assert denotation_accuracy(parser, theta, [], Vocab(), kb) == 0.0
