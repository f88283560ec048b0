import pytest

from xpr.executor import CATEGORICAL, NUMERIC, KnowledgeBase
from xpr.minilang import Grammar
from xpr.model import ModelConfig, Parser, init_params


def two_row_kb():
    # r1{star_rating=3, cuisine=thai}, r2{star_rating=5, cuisine=italian}
    schema = {"restaurant": {"star_rating": NUMERIC, "cuisine": CATEGORICAL}}
    rows = {
        "r1": {"star_rating": 3, "cuisine": "thai"},
        "r2": {"star_rating": 5, "cuisine": "italian"},
    }
    return KnowledgeBase(schema, rows, {"r1": "restaurant", "r2": "restaurant"})


@pytest.fixture
def kb2():
    return two_row_kb()


@pytest.fixture
def toy():
    """A small KB, its grammar and a randomly initialised parser."""
    kb = two_row_kb()
    g = kb.grammar(max_conjuncts=2)
    cfg = ModelConfig(vocab_size=6, num_actions=g.num_actions, hidden=5, embed=4, init_scale=0.5)
    parser = Parser(cfg, g)
    theta = init_params(cfg, 0)
    return kb, g, parser, theta


def one_type_grammar(n_props=2, values=(1, 2), max_conjuncts=1):
    props = [f"p{i}" for i in range(n_props)]
    return Grammar({"t": props}, {("t", p): list(values) for p in props}, max_conjuncts)


# per-criterion PASS/FAIL lines recorded by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
