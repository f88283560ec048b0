"""Acceptance criteria 1-8, each at its stated tolerance.

Every criterion prints one PASS/FAIL line (also repeated in the pytest
terminal summary). Criterion 7 and 8 share one run of the directional
experiment, which takes roughly 10 minutes on one CPU core.
"""

import math
import time

import pytest

from conftest import ACCEPTANCE_LINES
from xpr.experiment import XPR_OBJECTIVES, Fixture, run_directional
from xpr.oracles import (
    em_mml_suite,
    gradcheck_suite,
    kkt_suite,
    partition_suite,
    rl_mml_suite,
    sparsemax_suite,
)
from xpr.training import SUPERVISED_ONLY


def report(n, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
    print(line, flush=True)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


def test_1_sparsemax():
    res = sparsemax_suite(n=10_000, tol=1e-6)
    report(1, res.passed and res.seconds < 10, f"{res.detail}; {res.seconds:.1f}s (limit 10s)")


def test_2_gradients():
    res = gradcheck_suite(n=100, tol=1e-4, h=1e-5)
    report(2, res.passed and res.seconds < 120, f"{res.detail}; {res.seconds:.1f}s (limit 120s)")


def test_3_em_equals_mml():
    res = em_mml_suite(n=50, grad_tol=1e-6, loss_tol=1e-9)
    report(3, res.passed, res.detail)


def test_4_kkt():
    res = kkt_suite(n=20, trials=1000)
    report(4, res.passed, res.detail)


def test_5_rl_vs_mml():
    res = rl_mml_suite(n=20, tol=1e-6)
    report(5, res.passed, res.detail)


def test_6_partition_and_beam():
    part, top1 = partition_suite(n=1000, ks=(1, 4, 16))
    report(6, part.passed and top1.passed, f"{part.detail}; {top1.detail}")


@pytest.fixture(scope="module")
def directional():
    t0 = time.time()
    res = run_directional(Fixture())
    print("\n" + res.table(), flush=True)
    return res, time.time() - t0


def _series_ok(csv_text):
    lines = [l for l in csv_text.splitlines() if not l.startswith("#")]
    header = lines[0].split(",")
    ir, ic = header.index("avg_ratio"), header.index("coverage")
    rows = [l.split(",") for l in lines[1:]]
    active = [r for r in rows if r[ir] or r[ic]]
    return bool(active) and all(
        math.isfinite(float(r[ir])) and math.isfinite(float(r[ic])) and 0 <= float(r[ic]) <= 1
        for r in active
    )


def test_7_directional(directional):
    res, seconds = directional
    fx = res.fixture
    assert fx.n_examples == 1000 and fx.labeled_frac == 0.3 and fx.beam == 16
    assert len(fx.seeds) == 3
    base = 100 * res.mean(SUPERVISED_ONLY)
    topk = 100 * res.mean("topk")
    xpr = {o: 100 * res.mean(o) for o in XPR_OBJECTIVES}
    best = max(xpr, key=xpr.get)
    a = all(v >= base for v in xpr.values())
    # means are multiples of 1/900; the guard only absorbs float rounding
    b = xpr[best] - topk >= 1.0 - 1e-9
    c = all(_series_ok(r.csv) for r in res.runs if r.objective != SUPERVISED_ONLY)
    fast = seconds < 15 * 60
    detail = (
        f"(a) {'ok' if a else 'violated'}: supervised-only {base:.2f}, "
        + ", ".join(f"{o} {v:.2f}" for o, v in xpr.items())
        + f"; (b) {'ok' if b else 'violated'}: best {best} {xpr[best]:.2f} vs topk {topk:.2f}"
        + f"; (c) {'ok' if c else 'violated'}: avg_ratio/coverage series"
        + f"; runtime {seconds:.0f}s (limit 900s)"
    )
    report(7, a and b and c and fast, detail)


def test_8_coverage(directional):
    res, _ = directional
    rep = 100 * res.mean("repulsion", "coverage")
    st = 100 * res.mean("st", "coverage")
    margin = rep - st
    strict = margin >= 0
    detail = f"repulsion coverage {rep:.2f} vs self-training {st:.2f} (margin {margin:+.2f} pts)"
    if not strict:
        detail += "; within the 1-point tolerance" if margin >= -1.0 else "; beyond tolerance"
    report(8, margin >= -1.0, detail)
