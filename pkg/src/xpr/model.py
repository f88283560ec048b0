"""Attention encoder-decoder scoring grammar actions, with manual backprop.

The parser is locally normalized: every decoder step is a softmax restricted to
the grammar's legal actions, so ``log p(y|x)`` is the sum of per-step masked
log-probabilities. Parameters live in one flat float64 vector ``theta``; the
layout is given by :meth:`ModelConfig.layout`.

Architecture (row-vector convention)::

    encoder   a_t = tanh(E_x[x_t] W_xh + h_{t-1} W_hh + b_h)
    init      s_0 = tanh(h_n W_init + b_init)
    attention e_i = v . tanh(h_i W_ah + s_t W_as),  c_t = sum_i softmax(e)_i h_i
    output    logits_t = [s_t; c_t] W_out + b_out   (masked to legal actions)
    decoder   s_{t+1} = tanh(E_a[y_t] W_ea + s_t W_ss + c_t W_cs + b_s)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .minilang import Grammar, IllegalAction, Program

MAGIC = b"XPR1"
UNK = "<unk>"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_actions: int
    hidden: int = 64
    embed: int = 32
    init_scale: float = 0.08

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        V, A, H, E = self.vocab_size, self.num_actions, self.hidden, self.embed
        return [
            ("E_x", (V, E)),
            ("W_xh", (E, H)),
            ("W_hh", (H, H)),
            ("b_h", (H,)),
            ("W_init", (H, H)),
            ("b_init", (H,)),
            ("W_ah", (H, H)),
            ("W_as", (H, H)),
            ("v_a", (H,)),
            ("W_out", (2 * H, A)),
            ("b_out", (A,)),
            ("E_a", (A, E)),
            ("W_ea", (E, H)),
            ("W_ss", (H, H)),
            ("W_cs", (H, H)),
            ("b_s", (H,)),
        ]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


class Vocab:
    """Utterance token vocabulary; id 0 is reserved for unknown tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [UNK]
        self.stoi = {UNK: 0}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def encode(self, tokens: Sequence[str]) -> Tuple[int, ...]:
        return tuple(self.stoi.get(t, 0) for t in tokens)

    def __len__(self):
        return len(self.itos)


def unpack(theta: np.ndarray, cfg: ModelConfig) -> Dict[str, np.ndarray]:
    if theta.shape != (cfg.num_params,):
        raise ValueError(f"theta has shape {theta.shape}, config needs ({cfg.num_params},)")
    out, i = {}, 0
    for name, shape in cfg.layout():
        n = int(np.prod(shape))
        out[name] = theta[i : i + n].reshape(shape)
        i += n
    return out


def init_params(cfg: ModelConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-cfg.init_scale, cfg.init_scale, size=cfg.num_params)


def save_checkpoint(path, theta: np.ndarray, cfg: ModelConfig) -> None:
    data = np.ascontiguousarray(theta, dtype="<f8")
    with open(path, "wb") as f:
        f.write(MAGIC + cfg.digest() + struct.pack("<Q", data.size) + data.tobytes())


def load_checkpoint(path, cfg: ModelConfig) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError("not an XPR1 checkpoint")
    if blob[4:12] != cfg.digest():
        raise ValueError("checkpoint was written for a different model config")
    (n,) = struct.unpack("<Q", blob[12:20])
    if n != cfg.num_params or len(blob) != 20 + 8 * n:
        raise ValueError("checkpoint length does not match config")
    return np.frombuffer(blob[20:], dtype="<f8").astype(np.float64)


@dataclass
class ScoredSequence:
    actions: Tuple[int, ...]
    logprob: float
    step_logprobs: Tuple[float, ...]
    program: Optional[Program] = None

    def __len__(self):
        return len(self.actions)


@dataclass
class Encoded:
    """Encoder output for a batch of utterances."""

    states: np.ndarray  # [B, n, H]
    proj: np.ndarray  # states @ W_ah
    mask: np.ndarray  # [B, n] bool
    s0: np.ndarray  # [B, H]


@dataclass
class DecoderState:
    """One partial hypothesis for :meth:`Parser.step`."""

    enc: Encoded
    s: np.ndarray
    grammar_state: tuple
    prefix: Tuple[int, ...] = ()


def _masked_log_softmax(logits, legal):
    z = np.where(legal, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return z - lse


class Parser:
    """Scores action sequences of ``grammar`` given utterance id sequences."""

    def __init__(self, cfg: ModelConfig, grammar: Grammar):
        if cfg.num_actions != grammar.num_actions:
            raise ValueError("config action count does not match grammar")
        self.cfg = cfg
        self.grammar = grammar
        self._target_cache: Dict[tuple, tuple] = {}

    # -- building blocks ----------------------------------------------------

    def encode(self, xs: Sequence[Sequence[int]], theta: np.ndarray, cache: bool = False):
        P = unpack(theta, self.cfg)
        B, n = len(xs), max(len(x) for x in xs)
        if min(len(x) for x in xs) == 0:
            raise ValueError("empty utterance")
        X = np.zeros((B, n), dtype=np.int64)
        M = np.zeros((B, n), dtype=bool)
        for b, x in enumerate(xs):
            X[b, : len(x)] = x
            M[b, : len(x)] = True
        if X.max() >= self.cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
        h = np.zeros((B, self.cfg.hidden))
        states, acts, prevs = [], [], []
        for t in range(n):
            a = np.tanh(P["E_x"][X[:, t]] @ P["W_xh"] + h @ P["W_hh"] + P["b_h"])
            m = M[:, t : t + 1]
            prevs.append(h)
            acts.append(a)
            h = np.where(m, a, h)
            states.append(h)
        Hs = np.stack(states, axis=1)
        s0 = np.tanh(h @ P["W_init"] + P["b_init"])
        enc = Encoded(Hs, Hs @ P["W_ah"], M, s0)
        if cache:
            return enc, (X, M, acts, prevs, h)
        return enc

    @staticmethod
    def _attend(P, s, Hs, HW, M):
        u = np.tanh(HW + (s @ P["W_as"])[:, None, :])
        e = np.where(M, u @ P["v_a"], -np.inf)
        e = e - e.max(axis=1, keepdims=True)
        alpha = np.exp(e)
        alpha /= alpha.sum(axis=1, keepdims=True)
        c = np.einsum("bn,bnh->bh", alpha, Hs)
        return c, alpha, u

    @staticmethod
    def _logits(P, s, c):
        H = s.shape[1]
        return s @ P["W_out"][:H] + c @ P["W_out"][H:] + P["b_out"]

    @staticmethod
    def _advance(P, a, s, c):
        return np.tanh(P["E_a"][a] @ P["W_ea"] + s @ P["W_ss"] + c @ P["W_cs"] + P["b_s"])

    # -- single-state interface ---------------------------------------------

    def start(self, x: Sequence[int], theta: np.ndarray) -> DecoderState:
        enc = self.encode([x], theta)
        return DecoderState(enc, enc.s0, self.grammar.initial_state)

    def step(self, state: DecoderState, theta: np.ndarray) -> np.ndarray:
        """Log-distribution over next actions (``-inf`` on illegal ones)."""
        P = unpack(theta, self.cfg)
        enc = state.enc
        c, _, _ = self._attend(P, state.s, enc.states, enc.proj, enc.mask)
        legal = self.grammar.mask(state.grammar_state)[None, :]
        return _masked_log_softmax(self._logits(P, state.s, c), legal)[0]

    def push(self, state: DecoderState, action: int, theta: np.ndarray) -> DecoderState:
        P = unpack(theta, self.cfg)
        enc = state.enc
        c, _, _ = self._attend(P, state.s, enc.states, enc.proj, enc.mask)
        gs = self.grammar.advance(state.grammar_state, action)
        s = self._advance(P, np.array([action]), state.s, c)
        return DecoderState(enc, s, gs, state.prefix + (action,))

    # -- batched scoring ----------------------------------------------------

    def _as_actions(self, y) -> Tuple[int, ...]:
        if type(y) is tuple:
            return y
        if isinstance(y, Program):
            return self.grammar.actions(y)
        return tuple(int(a) for a in y)

    def _targets(self, ys):
        key = tuple(ys)
        hit = self._target_cache.get(key)
        if hit is not None:
            return hit
        out = self._build_targets(ys)
        if len(self._target_cache) > 4096:
            self._target_cache.clear()
        self._target_cache[key] = out
        return out

    def _build_targets(self, ys):
        B, T = len(ys), max(len(y) for y in ys)
        A = self.cfg.num_actions
        Y = np.zeros((B, T), dtype=np.int64)
        MY = np.zeros((B, T), dtype=bool)
        legal = np.ones((B, T, A), dtype=bool)
        g = self.grammar
        for b, y in enumerate(ys):
            Y[b, : len(y)] = y
            MY[b, : len(y)] = True
            for t, st in enumerate(g.validate(y)):
                legal[b, t] = g.mask(st)
        return Y, MY, legal

    def _run(self, xs, ys, theta, weights=None):
        P = unpack(theta, self.cfg)
        ys = [self._as_actions(y) for y in ys]
        # encode each distinct utterance once
        slots: Dict[tuple, int] = {}
        idx = np.array([slots.setdefault(tuple(x), len(slots)) for x in xs])
        enc, ecache = self.encode(list(slots), theta, cache=True)
        Y, MY, legal = self._targets(ys)
        B, T = Y.shape
        rows = np.arange(B)
        Hs, HW, M = enc.states[idx], enc.proj[idx], enc.mask[idx]
        s = enc.s0[idx]
        step_lp = np.zeros((B, T))
        tape = []
        for t in range(T):
            c, alpha, u = self._attend(P, s, Hs, HW, M)
            lp = _masked_log_softmax(self._logits(P, s, c), legal[:, t])
            step_lp[:, t] = np.where(MY[:, t], lp[rows, Y[:, t]], 0.0)
            s_next = self._advance(P, Y[:, t], s, c) if t < T - 1 else None
            tape.append((s, c, alpha, u, lp, s_next))
            s = s_next
        if weights is None:
            return step_lp, ys, None
        w = np.asarray(weights, float)
        grad = self._backward(P, enc, ecache, idx, Hs, Y, MY, tape, w)
        return step_lp, ys, grad

    def _backward(self, P, enc, ecache, idx, Hs, Y, MY, tape, w):
        cfg = self.cfg
        H = cfg.hidden
        G = {k: np.zeros_like(v) for k, v in P.items()}
        B, T = Y.shape
        rows = np.arange(B)
        coef = w[:, None] * MY
        dHs = np.zeros_like(Hs)
        dHW = np.zeros_like(Hs)
        ds_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            s, c, alpha, u, lp, s_next = tape[t]
            ds = np.zeros((B, H))
            dc = np.zeros((B, H))
            if s_next is not None:
                dz = ds_next * (1.0 - s_next**2)
                np.add.at(G["E_a"], Y[:, t], dz @ P["W_ea"].T)
                G["W_ea"] += P["E_a"][Y[:, t]].T @ dz
                G["W_ss"] += s.T @ dz
                G["W_cs"] += c.T @ dz
                G["b_s"] += dz.sum(0)
                ds += dz @ P["W_ss"].T
                dc += dz @ P["W_cs"].T
            probs = np.exp(lp)
            dl = -probs
            dl[rows, Y[:, t]] += 1.0
            dl *= coef[:, t : t + 1]
            G["W_out"][:H] += s.T @ dl
            G["W_out"][H:] += c.T @ dl
            G["b_out"] += dl.sum(0)
            ds += dl @ P["W_out"][:H].T
            dc += dl @ P["W_out"][H:].T
            # attention
            dalpha = np.einsum("bh,bnh->bn", dc, Hs)
            dHs += alpha[:, :, None] * dc[:, None, :]
            de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
            G["v_a"] += np.einsum("bn,bnh->h", de, u)
            dpre = de[:, :, None] * P["v_a"] * (1.0 - u**2)
            dHW += dpre
            dq = dpre.sum(axis=1)
            G["W_as"] += s.T @ dq
            ds += dq @ P["W_as"].T
            ds_next = ds
        # fold per-sequence gradients back onto the distinct utterances
        X, MX, acts, prevs, h_last = ecache
        U = X.shape[0]
        dHs_u = np.zeros_like(enc.states)
        dHW_u = np.zeros_like(enc.states)
        ds0 = np.zeros((U, H))
        np.add.at(dHs_u, idx, dHs)
        np.add.at(dHW_u, idx, dHW)
        np.add.at(ds0, idx, ds_next)
        s0 = enc.s0
        dz0 = ds0 * (1.0 - s0**2)
        G["W_init"] += h_last.T @ dz0
        G["b_init"] += dz0.sum(0)
        dh = dz0 @ P["W_init"].T
        G["W_ah"] += np.einsum("bnh,bnk->hk", enc.states, dHW_u)
        dHs = dHs_u + dHW_u @ P["W_ah"].T
        for t in range(X.shape[1] - 1, -1, -1):
            g = dh + dHs[:, t]
            m = MX[:, t : t + 1]
            da = np.where(m, g * (1.0 - acts[t] ** 2), 0.0)
            G["W_xh"] += P["E_x"][X[:, t]].T @ da
            G["W_hh"] += prevs[t].T @ da
            G["b_h"] += da.sum(0)
            np.add.at(G["E_x"], X[:, t], da @ P["W_xh"].T)
            dh = da @ P["W_hh"].T + np.where(m, 0.0, g)
        return np.concatenate([G[name].ravel() for name, _ in cfg.layout()])

    # -- public scoring API -------------------------------------------------

    def score(self, xs, ys, theta) -> List[ScoredSequence]:
        """Score ``ys[i]`` given ``xs[i]`` for every i in one batched pass."""
        step_lp, acts, _ = self._run(xs, ys, theta)
        out = []
        for b, y in enumerate(acts):
            steps = tuple(float(v) for v in step_lp[b, : len(y)])
            out.append(ScoredSequence(y, float(step_lp[b].sum()), steps))
        return out

    def log_prob(self, x, y, theta) -> float:
        return self.score([x], [y], theta)[0].logprob

    def log_probs(self, xs, ys, theta) -> np.ndarray:
        if not ys:
            return np.zeros(0)
        step_lp, _, _ = self._run(xs, ys, theta)
        return step_lp.sum(axis=1)

    def weighted_loglik(self, xs, ys, weights, theta) -> Tuple[float, np.ndarray]:
        """``sum_i w_i log p(y_i|x_i)`` and its gradient wrt ``theta``.

        Weights are constants; no gradient flows through them.
        """
        if not ys:
            return 0.0, np.zeros_like(theta)
        step_lp, _, grad = self._run(xs, ys, theta, weights)
        return float(np.dot(weights, step_lp.sum(axis=1))), grad

    def grad_weighted(self, x, pairs, theta) -> np.ndarray:
        """Gradient of ``sum_i w_i log p(y_i|x)`` for ``pairs = [(y_i, w_i)]``."""
        if not pairs:
            return np.zeros_like(theta)
        ys = [y for y, _ in pairs]
        ws = [w for _, w in pairs]
        return self.weighted_loglik([x] * len(ys), ys, ws, theta)[1]


__all__ = [
    "IllegalAction",
    "ModelConfig",
    "Parser",
    "ScoredSequence",
    "Vocab",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "unpack",
]
