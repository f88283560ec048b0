"""Independent checks: finite differences, enumeration and brute-force projection.

Each ``*_suite`` draws random desk-scale instances, compares the production
code path against an oracle that does not share it, and returns a
:class:`SuiteResult`. ``xpr selfcheck`` and the acceptance tests call these.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .executor import CATEGORICAL, NUMERIC, KnowledgeBase, reward
from .minilang import Grammar
from .model import ModelConfig, Parser, init_params
from .objectives import LOSSES, kkt_estep_check, loss_top_k, q_top_k, sparsemax
from .search import (
    SeenPartition,
    _logsumexp,
    beam_search,
    make_partition,
    partition,
)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# -- numeric oracles ---------------------------------------------------------


def project_simplex_bisect(z, iters: int = 200) -> np.ndarray:
    """Projection onto the simplex by bisection on the threshold.

    Solves ``sum(max(z - tau, 0)) = 1`` for ``tau``; no sorting involved.
    """
    z = np.asarray(z, dtype=float)
    lo, hi = z.min() - 1.0, z.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(z - mid, 0.0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return np.maximum(z - 0.5 * (lo + hi), 0.0)


def central_difference(f: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                       h: float = 1e-5) -> np.ndarray:
    """Jacobian of a vector-valued ``f`` by central differences, shape [out, dim]."""
    cols = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        cols.append((np.asarray(f(theta + e)) - np.asarray(f(theta - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference scaled by the larger of the two max-norms."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-3)
    return float(np.abs(a - b).max(initial=0.0) / scale)


# -- random toy instances -------------------------------------------------------


@dataclass
class Instance:
    grammar: Grammar
    kb: KnowledgeBase
    parser: Parser
    theta: np.ndarray
    x: Tuple[int, ...]


def random_kb(rng: np.random.Generator, max_programs: int = 500) -> KnowledgeBase:
    while True:
        schema, rows, types = {}, {}, {}
        n_types = int(rng.integers(1, 3))
        for ti in range(n_types):
            t = f"t{ti}"
            schema[t] = {}
            for pi in range(int(rng.integers(1, 3))):
                kind = NUMERIC if rng.random() < 0.6 else CATEGORICAL
                schema[t][f"p{ti}{pi}"] = kind
            for r in range(int(rng.integers(2, 6))):
                eid = f"e{ti}_{r}"
                types[eid] = t
                rows[eid] = {
                    p: int(rng.integers(1, 4)) if kind == NUMERIC else f"c{int(rng.integers(0, 3))}"
                    for p, kind in schema[t].items()
                }
        kb = KnowledgeBase(schema, rows, types, max_conjuncts=int(rng.integers(1, 3)))
        if 2 <= kb.grammar().count_programs() <= max_programs:
            return kb


def random_instance(rng: np.random.Generator, max_programs: int = 500,
                    max_params: int = 500, scale: float = 1.0) -> Instance:
    kb = random_kb(rng, max_programs)
    g = kb.grammar()
    vocab = int(rng.integers(3, 7))
    for hidden, embed in ((4, 3), (3, 2), (2, 2)):
        cfg = ModelConfig(vocab, g.num_actions, hidden=hidden, embed=embed, init_scale=scale)
        if cfg.num_params <= max_params:
            break
    parser = Parser(cfg, g)
    theta = init_params(cfg, int(rng.integers(2**31)))
    x = tuple(int(v) for v in rng.integers(0, vocab, size=int(rng.integers(1, 5))))
    return Instance(g, kb, parser, theta, x)


def rescore(parser: Parser, x, theta, part: SeenPartition) -> SeenPartition:
    """Same membership as ``part``, log-probabilities recomputed at ``theta``."""
    seen = part.seen
    lps = parser.log_probs([x] * len(seen), [s.actions for s in seen], theta)
    items = []
    for s, lp in zip(seen, lps):
        items.append(type(s)(s.actions, float(lp), (), s.program))
    n = len(part.p_se)
    return make_partition(items[:n], items[n:])


# -- suites ---------------------------------------------------------------------


def _timed(name, fn) -> SuiteResult:
    t0 = time.perf_counter()
    passed, detail = fn()
    return SuiteResult(name, passed, detail, time.perf_counter() - t0)


def sparsemax_suite(n: int = 10_000, seed: int = 0, tol: float = 1e-6) -> SuiteResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        fails = 0
        for _ in range(n):
            d = int(rng.integers(2, 17))
            z = rng.normal(scale=rng.choice([0.1, 1.0, 5.0]), size=d)
            p = sparsemax(z)
            ok = abs(p.sum() - 1.0) <= 1e-9 and (p >= 0).all()
            shifted = sparsemax(z + rng.normal(scale=10.0))
            ok &= np.allclose(shifted, p, rtol=0, atol=1e-12)
            order = np.argsort(z, kind="stable")
            ok &= bool((np.diff(p[order]) >= -1e-15).all())
            err = float(np.abs(p - project_simplex_bisect(z)).max())
            worst = max(worst, err)
            ok &= err <= tol
            fails += not ok
        return fails == 0, f"{n} vectors, {fails} failures, max |p - oracle| = {worst:.2e}"

    return _timed("sparsemax", run)


def _loss_values(part: SeenPartition, anchor: SeenPartition) -> np.ndarray:
    return np.array([LOSSES[k](part, anchor).value for k in LOSSES])


def gradcheck_suite(n: int = 100, seed: int = 0, tol: float = 1e-4,
                    h: float = 1e-5) -> SuiteResult:
    """L_sup and every unsupervised loss against central differences."""

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        fails = 0
        for _ in range(n):
            inst = random_instance(rng)
            parser, theta, x = inst.parser, inst.theta, inst.x
            beam = beam_search(parser, x, theta, int(rng.choice([2, 4, 8])))
            part = partition(beam, inst.kb)
            progs = inst.grammar.enumerate_actions()
            gold = progs[int(rng.integers(len(progs)))]

            analytic = [-parser.grad_weighted(x, [(gold, 1.0)], theta)]
            for name in LOSSES:
                res = LOSSES[name](part)
                pairs = [(s.actions, w) for s, w in res.weights]
                analytic.append(-parser.grad_weighted(x, pairs, theta))
            analytic = np.stack(analytic)

            def f(th):
                sup = -parser.log_prob(x, gold, th)
                return np.concatenate([[sup], _loss_values(rescore(parser, x, th, part), part)])

            numeric = central_difference(f, theta, h)
            for a, b in zip(analytic, numeric):
                err = rel_error(a, b)
                worst = max(worst, err)
                fails += err > tol
        return fails == 0, (
            f"{n} configs x {1 + len(LOSSES)} losses, {fails} over tol, max rel err {worst:.2e}"
        )

    return _timed("gradcheck", run)


def em_mml_suite(n: int = 50, seed: int = 1, grad_tol: float = 1e-6,
                 loss_tol: float = 1e-9, h: float = 1e-5) -> SuiteResult:
    """Full-width Top-K MML against the exact marginal likelihood."""

    def run():
        rng = np.random.default_rng(seed)
        worst_g = worst_l = 0.0
        fails = done = 0
        while done < n:
            inst = random_instance(rng)
            g, kb, parser, theta, x = inst.grammar, inst.kb, inst.parser, inst.theta, inst.x
            seqs = g.enumerate_actions()
            R = np.array([reward(g.decode(y), kb) for y in seqs], dtype=float)
            if not R.any():
                continue
            done += 1
            part = partition(beam_search(parser, x, theta, len(seqs)), kb)
            res = loss_top_k(part)

            def exact_nll(th):
                lp = parser.log_probs([x] * len(seqs), seqs, th)
                return -_logsumexp(lp[R > 0])

            err_l = abs(res.value - exact_nll(theta))
            q = q_top_k(part)
            em = -parser.grad_weighted(x, [(s.actions, w) for s, w in q.support], theta)
            mml = central_difference(lambda th: exact_nll(th), theta, h)
            err_g = float(np.abs(em - mml).max())
            worst_g, worst_l = max(worst_g, err_g), max(worst_l, err_l)
            fails += err_g > grad_tol or err_l > loss_tol
        return fails == 0, (
            f"{n} draws, {fails} failures, max |grad diff| {worst_g:.2e}, "
            f"max |loss diff| {worst_l:.2e}"
        )

    return _timed("em_equals_mml", run)


def kkt_suite(n: int = 20, trials: int = 1000, seed: int = 2) -> SuiteResult:
    def run():
        rng = np.random.default_rng(seed)
        violations = done = 0
        while done < n:
            inst = random_instance(rng, scale=2.0)
            rep = kkt_estep_check(inst.parser, inst.x, inst.theta, inst.kb, trials,
                                  int(rng.integers(2**31)))
            if rep.n_executable == 0:
                continue
            done += 1
            violations += rep.violations
        return violations == 0, f"{n} instances x {trials} perturbations, {violations} violations"

    return _timed("kkt_estep", run)


def rl_mml_suite(n: int = 20, seed: int = 3, tol: float = 1e-6, h: float = 1e-5) -> SuiteResult:
    """Exact gradient of expected reward vs its score-function form, and
    q_MML vs renormalized q_RL."""

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        fails = done = 0
        while done < n:
            inst = random_instance(rng)
            g, kb, parser, theta, x = inst.grammar, inst.kb, inst.parser, inst.theta, inst.x
            seqs = g.enumerate_actions()
            R = np.array([reward(g.decode(y), kb) for y in seqs], dtype=float)
            if not R.any():
                continue
            done += 1

            def j_rl(th):
                return float(np.dot(R, np.exp(parser.log_probs([x] * len(seqs), seqs, th))))

            p = np.exp(parser.log_probs([x] * len(seqs), seqs, theta))
            exact = central_difference(j_rl, theta, h)
            score_fn = parser.grad_weighted(x, list(zip(seqs, p * R)), theta)
            err_g = float(np.abs(exact - score_fn).max())

            q_rl = p * R
            q_mml_closed = q_rl / q_rl.sum()
            part = partition(beam_search(parser, x, theta, len(seqs)), kb)
            q_mml = dict((s.actions, w) for s, w in q_top_k(part).support)
            q_mml = np.array([q_mml.get(y, 0.0) for y in seqs])
            err_q = float(np.abs(q_mml - q_mml_closed).max())
            worst = max(worst, err_g, err_q)
            fails += max(err_g, err_q) > tol
        return fails == 0, f"{n} instances, {fails} failures, max diff {worst:.2e}"

    return _timed("rl_vs_mml", run)


def partition_suite(n: int = 1000, seed: int = 4, ks=(1, 4, 16)) -> Tuple[SuiteResult, SuiteResult]:
    """Partition invariants over random beams, and top-1 agreement across ``ks``.

    Returned separately: the first must always hold; the second is a property
    of the particular parameters (beam search is not exact).
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad_part = unstable = 0
    for _ in range(n):
        inst = random_instance(rng, scale=float(rng.choice([0.5, 2.0])))
        parser, theta, x, kb = inst.parser, inst.theta, inst.x, inst.kb
        tops = []
        for k in ks:
            beam = beam_search(parser, x, theta, k)
            part = partition(beam, kb)
            se = {s.actions for s in part.p_se}
            sn = {s.actions for s in part.p_sn}
            ok = not (se & sn) and len(se) + len(sn) == len(beam)
            ok &= se | sn == {s.actions for s in beam}
            ok &= all(reward(s.program, kb) == 1 for s in part.p_se)
            ok &= all(reward(s.program, kb) == 0 for s in part.p_sn)
            ok &= 0.0 <= part.mass_se <= 1.0 and 0.0 <= part.mass_sn <= 1.0
            ok &= part.mass_se + part.mass_sn <= 1.0 + 1e-9
            bad_part += not ok
            tops.append(beam[0].actions)
        unstable += len(set(tops)) > 1
    dt = time.perf_counter() - t0
    return (
        SuiteResult("partition", bad_part == 0,
                    f"{n} runs x {len(ks)} widths, {bad_part} invariant violations", dt),
        SuiteResult("beam_top1", unstable == 0,
                    f"{n} runs, top-1 differs across K={list(ks)} in {unstable}", dt),
    )


SELFCHECK_SUITES = {
    "gradcheck": gradcheck_suite,
    "sparsemax": sparsemax_suite,
    "em_equals_mml": em_mml_suite,
    "kkt_estep": kkt_suite,
    "rl_vs_mml": rl_mml_suite,
}


def run_selfcheck(names: Optional[List[str]] = None) -> List[SuiteResult]:
    return [SELFCHECK_SUITES[k]() for k in (names or SELFCHECK_SUITES)]
