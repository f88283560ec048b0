import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xpr.minilang import IllegalAction
from xpr.model import (
    ModelConfig,
    Parser,
    Vocab,
    init_params,
    load_checkpoint,
    save_checkpoint,
    unpack,
)
from xpr.oracles import central_difference, rel_error

from conftest import one_type_grammar


def make(g, V=5, H=3, E=2, seed=0, scale=0.5):
    cfg = ModelConfig(V, g.num_actions, hidden=H, embed=E, init_scale=scale)
    return cfg, Parser(cfg, g), init_params(cfg, seed)


def reference_log_prob(x, y, theta, cfg, g):
    """Scalar-loop forward pass written independently of the vectorised model."""
    P = {k: v.tolist() for k, v in unpack(theta, cfg).items()}
    H = cfg.hidden

    def vecmat(v, W):
        return [sum(v[i] * W[i][j] for i in range(len(v))) for j in range(len(W[0]))]

    h = [0.0] * H
    hs = []
    for tok in x:
        pre = [a + b + c for a, b, c in zip(vecmat(P["E_x"][tok], P["W_xh"]),
                                            vecmat(h, P["W_hh"]), P["b_h"])]
        h = [math.tanh(v) for v in pre]
        hs.append(h)
    s = [math.tanh(a + b) for a, b in zip(vecmat(h, P["W_init"]), P["b_init"])]
    total, state = 0.0, g.initial_state
    for a in y:
        sW = vecmat(s, P["W_as"])
        scores = []
        for hi in hs:
            hW = vecmat(hi, P["W_ah"])
            scores.append(sum(v * math.tanh(p + q) for v, p, q in zip(P["v_a"], hW, sW)))
        mx = max(scores)
        ws = [math.exp(e - mx) for e in scores]
        z = sum(ws)
        c = [sum(ws[i] / z * hs[i][k] for i in range(len(hs))) for k in range(H)]
        logits = vecmat(s + c, P["W_out"])
        logits = [l + b for l, b in zip(logits, P["b_out"])]
        legal = g.legal(state)
        m = max(logits[j] for j in legal)
        lse = m + math.log(sum(math.exp(logits[j] - m) for j in legal))
        total += logits[a] - lse
        pre = [p + q + r + b for p, q, r, b in zip(vecmat(P["E_a"][a], P["W_ea"]),
                                                   vecmat(s, P["W_ss"]), vecmat(c, P["W_cs"]),
                                                   P["b_s"])]
        s = [math.tanh(v) for v in pre]
        state = g.advance(state, a)
    return total


class TestLogProb:
    def test_matches_reference_forward(self):
        g = one_type_grammar(2, (1, 2), 2)
        cfg, parser, theta = make(g, V=4, H=2, E=2, scale=0.7)
        for y in g.enumerate_actions()[::7]:
            x = (1, 3, 2)
            assert parser.log_prob(x, y, theta) == pytest.approx(
                reference_log_prob(x, y, theta, cfg, g), abs=1e-12)

    def test_forced_step_contributes_zero(self):
        # a single type: the first step has exactly one legal action
        g = one_type_grammar(1, (7,), 1)
        cfg, parser, theta = make(g)
        st0 = parser.start((1, 2), theta)
        dist = parser.step(st0, theta)
        assert np.flatnonzero(np.isfinite(dist)).tolist() == [g.index[("type", "t")]]
        assert dist[g.index[("type", "t")]] == 0.0
        # one type, one property, EQ/GT/LT, one literal: only the op step is uncertain
        y = g.enumerate_actions()[0]
        steps = parser.score([(1, 2)], [y], theta)[0].step_logprobs
        assert [i for i, v in enumerate(steps) if v != 0.0] == [2]

    @pytest.mark.parametrize("k", [1, 2])
    def test_global_normalization(self, k):
        g = one_type_grammar(2, (1, 2, 3), k)
        _, parser, theta = make(g, seed=3)
        ys = g.enumerate_actions()
        lp = parser.log_probs([(1, 2, 3)] * len(ys), ys, theta)
        assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-9)
        assert (lp <= 0).all()

    def test_logprob_is_sum_of_steps(self):
        g = one_type_grammar(2, (1, 2), 2)
        _, parser, theta = make(g, seed=4)
        for s in parser.score([(1, 2)] * 5, g.enumerate_actions()[:5], theta):
            assert s.logprob == pytest.approx(sum(s.step_logprobs), abs=1e-12)

    def test_illegal_sequence(self):
        g = one_type_grammar(2, (1, 2), 1)
        _, parser, theta = make(g)
        with pytest.raises(IllegalAction):
            parser.log_prob((1,), (g.STOP,), theta)

    def test_deterministic(self):
        g = one_type_grammar(2, (1, 2), 2)
        _, parser, theta = make(g)
        y = g.enumerate_actions()[3]
        assert parser.log_prob((1, 2), y, theta) == parser.log_prob((1, 2), y, theta)


class TestStep:
    def test_uniform_at_zero(self):
        g = one_type_grammar(3, (1, 2), 2)
        cfg, parser, _ = make(g)
        theta = np.zeros(cfg.num_params)
        state = parser.start((1,), theta)
        for a in g.enumerate_actions()[5]:
            dist = parser.step(state, theta)
            legal = np.isfinite(dist)
            assert legal.tolist() == g.mask(state.grammar_state).tolist()
            np.testing.assert_allclose(dist[legal], -np.log(legal.sum()), atol=1e-12)
            state = parser.push(state, a, theta)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.lists(st.integers(1, 4), min_size=1, max_size=5))
    def test_normalized_every_step(self, seed, x):
        g = one_type_grammar(2, (1, 2), 2)
        _, parser, theta = make(g, seed=seed, scale=2.0)
        rng = np.random.default_rng(seed)
        state = parser.start(x, theta)
        while not g.is_final(state.grammar_state):
            dist = parser.step(state, theta)
            legal = np.isfinite(dist)
            assert legal.any()
            assert np.exp(dist[legal]).sum() == pytest.approx(1.0, abs=1e-9)
            state = parser.push(state, int(rng.choice(np.flatnonzero(legal))), theta)


class TestGradWeighted:
    def test_zero_weights(self):
        g = one_type_grammar(2, (1, 2), 2)
        _, parser, theta = make(g)
        ys = g.enumerate_actions()[:3]
        grad = parser.grad_weighted((1, 2), [(y, 0.0) for y in ys], theta)
        assert grad.shape == theta.shape and not grad.any()

    def test_single_term_equals_logprob_gradient(self):
        g = one_type_grammar(2, (1, 2), 2)
        _, parser, theta = make(g, seed=1)
        y = g.enumerate_actions()[10]
        grad = parser.grad_weighted((2, 1, 3), [(y, 1.0)], theta)
        fd = central_difference(lambda t: np.array([parser.log_prob((2, 1, 3), y, t)]), theta, 1e-5)[0]
        assert rel_error(grad, fd) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        g = one_type_grammar(2, (1, 2), 2)
        _, parser, theta = make(g, V=5, H=3, E=2, seed=seed, scale=0.8)
        ys = g.enumerate_actions()
        pick = rng.choice(len(ys), 4, replace=False)
        pairs = [(ys[i], float(rng.normal())) for i in pick]
        x = tuple(int(t) for t in rng.integers(0, 5, size=rng.integers(1, 5)))

        def f(t):
            return np.array([sum(w * parser.log_prob(x, y, t) for y, w in pairs)])

        grad = parser.grad_weighted(x, pairs, theta)
        assert rel_error(grad, central_difference(f, theta, 1e-5)[0]) < 1e-4

    def test_batched_matches_per_utterance(self):
        g = one_type_grammar(2, (1, 2), 2)
        _, parser, theta = make(g, seed=2)
        ys = g.enumerate_actions()[:6]
        xs = [(1, 2), (3,), (1, 2), (4, 4, 1), (3,), (2,)]
        ws = np.array([0.5, -1.0, 2.0, 0.25, 1.0, -0.3])
        val, grad = parser.weighted_loglik(xs, ys, ws, theta)
        ref = sum(parser.grad_weighted(x, [(y, w)], theta) for x, y, w in zip(xs, ys, ws))
        np.testing.assert_allclose(grad, ref, atol=1e-12)
        assert val == pytest.approx(sum(w * parser.log_prob(x, y, theta)
                                        for x, y, w in zip(xs, ys, ws)), abs=1e-12)


class TestParams:
    def test_layout_size(self):
        cfg = ModelConfig(10, 7, hidden=4, embed=3)
        H, E, V, A = 4, 3, 10, 7
        expected = V * E + E * H + H * H + H + H * H + H + 2 * H * H + H + 2 * H * A + A + A * E + E * H + 2 * H * H + H
        assert cfg.num_params == expected

    def test_init_range_and_seed(self):
        cfg = ModelConfig(10, 7)
        a, b = init_params(cfg, 5), init_params(cfg, 5)
        assert np.array_equal(a, b)
        assert np.abs(a).max() <= 0.08
        assert not np.array_equal(a, init_params(cfg, 6))

    def test_vocab_unknown(self):
        v = Vocab(["a", "b"])
        assert v.encode(["a", "zzz", "b"]) == (1, 0, 2)
        assert len(v) == 3


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = ModelConfig(10, 7, hidden=4, embed=3)
        theta = init_params(cfg, 0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, theta, cfg)
        blob = path.read_bytes()
        assert blob[:4] == b"XPR1"
        assert len(blob) == 4 + 8 + 8 + 8 * cfg.num_params
        assert int.from_bytes(blob[12:20], "little") == cfg.num_params
        assert np.frombuffer(blob[20:], "<f8").tobytes() == theta.astype("<f8").tobytes()
        assert np.array_equal(load_checkpoint(path, cfg), theta)

    def test_config_mismatch(self, tmp_path):
        cfg = ModelConfig(10, 7, hidden=4, embed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_params(cfg, 0), cfg)
        with pytest.raises(ValueError):
            load_checkpoint(path, ModelConfig(10, 7, hidden=5, embed=3))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            load_checkpoint(path, ModelConfig(10, 7))
