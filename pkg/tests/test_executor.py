import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xpr.executor import (
    CATEGORICAL,
    NUMERIC,
    KBFormatError,
    KnowledgeBase,
    UnknownName,
    denotation_match,
    dumps_kb,
    execute,
    loads_kb,
    reward,
)
from xpr.minilang import EQ, GT, LT, Condition, Program, parse


class TestExecute:
    def test_gold_filter(self, kb2):
        p = parse("select restaurant where star_rating = 3 and cuisine = thai")
        assert execute(p, kb2) == {"r1"}

    def test_rating_equals_category_is_type_error(self, kb2):
        with pytest.raises(TypeError):
            execute(parse("select restaurant where star_rating = thai"), kb2)

    def test_categorical_comparison_is_type_error(self, kb2):
        with pytest.raises(TypeError):
            execute(parse("select restaurant where cuisine > 3"), kb2)

    def test_numeric_literal_on_categorical_eq(self, kb2):
        with pytest.raises(TypeError):
            execute(parse("select restaurant where cuisine = 3"), kb2)

    @pytest.mark.parametrize("text", [
        "select hotel where star_rating = 3",
        "select restaurant where price = 3",
        "select restaurant where cuisine = french",
    ])
    def test_unknown_names(self, kb2, text):
        with pytest.raises(UnknownName):
            execute(parse(text), kb2)

    def test_comparisons(self, kb2):
        assert execute(parse("select restaurant where star_rating > 3"), kb2) == {"r2"}
        assert execute(parse("select restaurant where star_rating < 5"), kb2) == {"r1"}
        assert execute(parse("select restaurant where star_rating > 5"), kb2) == frozenset()


class TestReward:
    def test_gold(self, kb2):
        assert reward(parse("select restaurant where star_rating = 3 and cuisine = thai"), kb2) == 1

    def test_empty_result(self, kb2):
        assert reward(parse("select restaurant where star_rating = 4"), kb2) == 0

    @pytest.mark.parametrize("text", [
        "select restaurant where star_rating = thai",
        "select restaurant where cuisine > 3",
        "select nothing where x = 1",
    ])
    def test_errors_give_zero(self, kb2, text):
        assert reward(parse(text), kb2) == 0


class TestDenotationMatch:
    def test_identity(self, kb2):
        g = parse("select restaurant where star_rating = 3 and cuisine = thai")
        assert denotation_match(g, g, kb2)

    def test_spurious_same_denotation(self, kb2):
        gold = parse("select restaurant where star_rating = 3 and cuisine = thai")
        spurious = parse("select restaurant where star_rating < 4")
        assert denotation_match(spurious, gold, kb2)

    def test_failing_program(self, kb2):
        gold = parse("select restaurant where star_rating = 3")
        assert not denotation_match(parse("select restaurant where cuisine > 3"), gold, kb2)

    def test_different_denotation(self, kb2):
        gold = parse("select restaurant where star_rating = 3")
        assert not denotation_match(parse("select restaurant where star_rating = 5"), gold, kb2)


class TestKBValidation:
    def test_value_kind_mismatch(self):
        with pytest.raises(ValueError):
            KnowledgeBase({"t": {"a": NUMERIC}}, {"e": {"a": "x"}}, {"e": "t"})

    def test_unknown_property(self):
        with pytest.raises(ValueError):
            KnowledgeBase({"t": {"a": NUMERIC}}, {"e": {"b": 1}}, {"e": "t"})


# -- random KB property tests ---------------------------------------------------

CAT_VALUES = ["red", "green", "blue"]


@st.composite
def kb_and_program(draw):
    n = draw(st.integers(1, 100))
    rows, types = {}, {}
    for i in range(n):
        rows[f"e{i}"] = {"size": draw(st.integers(0, 4)), "color": draw(st.sampled_from(CAT_VALUES))}
        types[f"e{i}"] = "thing"
    kb = KnowledgeBase({"thing": {"size": NUMERIC, "color": CATEGORICAL}}, rows, types)
    cond = st.one_of(
        st.builds(Condition, st.just("size"), st.sampled_from([EQ, GT, LT]), st.integers(0, 4)),
        st.builds(Condition, st.just("color"), st.just(EQ), st.sampled_from(CAT_VALUES)),
    )
    conds = draw(st.lists(cond, min_size=1, max_size=3))
    return kb, Program("thing", tuple(conds))


def brute_force(p, kb):
    ops = {EQ: lambda a, b: a == b, GT: lambda a, b: a > b, LT: lambda a, b: a < b}
    out = set()
    for eid, row in kb.rows.items():
        if all(ops[c.op](row[c.property], c.value) for c in p.conditions):
            out.add(eid)
    return out


class TestExecutorProperties:
    @settings(max_examples=200, deadline=None)
    @given(kb_and_program())
    def test_matches_row_by_row_oracle(self, case):
        kb, p = case
        try:
            got = execute(p, kb)
        except UnknownName:
            # categorical value absent from this KB's vocabulary
            assert any(c.property == "color" and c.value not in kb.values("thing", "color")
                       for c in p.conditions)
            return
        assert got == brute_force(p, kb)

    @settings(max_examples=200, deadline=None)
    @given(kb_and_program(), st.integers(0, 4), st.sampled_from([EQ, GT, LT]))
    def test_monotone_in_conjuncts(self, case, v, op):
        kb, p = case
        if len(p.conditions) == 3:
            p = Program(p.target_type, p.conditions[:2])
        q = Program(p.target_type, p.conditions + (Condition("size", op, v),))
        try:
            assert execute(q, kb) <= execute(p, kb)
        except UnknownName:
            pass

    @settings(max_examples=200, deadline=None)
    @given(kb_and_program())
    def test_reward_implies_nonempty(self, case):
        kb, p = case
        if reward(p, kb):
            assert execute(p, kb)


KB_TEXT = """# a comment
!type restaurant
!prop restaurant star_rating numeric
!prop restaurant cuisine categorical
!conjuncts 2
r1 star_rating 3
r1 cuisine thai
r2 star_rating 5
r2 cuisine italian
"""


class TestKBFile:
    def test_load(self, kb2):
        kb = loads_kb(KB_TEXT)
        assert kb.rows == kb2.rows
        assert kb.max_conjuncts == 2
        assert execute(parse("select restaurant where cuisine = thai"), kb) == {"r1"}

    def test_roundtrip(self):
        kb = loads_kb(KB_TEXT)
        again = loads_kb(dumps_kb(kb, ["config: x"]))
        assert again.rows == kb.rows and again.schema == kb.schema
        assert again.grammar() == kb.grammar()

    def test_header_comment(self):
        assert dumps_kb(loads_kb(KB_TEXT), ["config: seed=1"]).startswith("# config: seed=1\n")

    def test_literal_header(self):
        text = KB_TEXT.replace("!conjuncts 2\n",
                               "!conjuncts 2\n!lit restaurant cuisine thai italian mexican\n")
        g = loads_kb(text).grammar()
        assert [v for v in g.literals[("restaurant", "cuisine")]] == ["thai", "italian", "mexican"]

    @pytest.mark.parametrize("bad,line", [
        ("!prop restaurant x numeric\n", 1),
        ("!type t\n!prop t a weird\n", 2),
        ("!type t\n!prop t a numeric\ne1 a x\n", 3),
        ("!type t\n!prop t a numeric\ne1 b 1\n", 3),
        ("!type t\n!prop t a numeric\ne1 a\n", 3),
        ("!type t\n!prop t a numeric\ne1 a 1\n!type u\n", 4),
    ])
    def test_format_errors_carry_line(self, bad, line):
        with pytest.raises(KBFormatError) as err:
            loads_kb(bad)
        assert err.value.line == line
