"""Beam search over grammar actions and the seen/unseen program partition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .executor import KnowledgeBase, reward
from .minilang import DEFAULT_CAPACITY
from .model import Parser, ScoredSequence, _masked_log_softmax, unpack

DEFAULT_BEAM = 16


@dataclass
class SeenPartition:
    p_se: List[ScoredSequence]
    p_sn: List[ScoredSequence]
    mass_se: float
    mass_sn: float
    log_mass_se: float = -math.inf
    log_mass_sn: float = -math.inf

    @property
    def residual(self) -> float:
        return max(0.0, 1.0 - self.mass_se - self.mass_sn)

    @property
    def seen(self) -> List[ScoredSequence]:
        return self.p_se + self.p_sn


def _logsumexp(values: Sequence[float]) -> float:
    if len(values) == 0:
        return -math.inf
    a = np.asarray(values, dtype=float)
    m = a.max()
    if m == -math.inf:
        return -math.inf
    return float(m + np.log(np.exp(a - m).sum()))


def make_partition(p_se, p_sn) -> SeenPartition:
    lse = _logsumexp([s.logprob for s in p_se])
    lsn = _logsumexp([s.logprob for s in p_sn])
    return SeenPartition(list(p_se), list(p_sn), math.exp(lse), math.exp(lsn), lse, lsn)


def partition(beam: Sequence[ScoredSequence], kb: KnowledgeBase) -> SeenPartition:
    se, sn = [], []
    for item in beam:
        if item.program is None:
            raise ValueError("beam item has no decoded program")
        (se if reward(item.program, kb) else sn).append(item)
    return make_partition(se, sn)


def beam_search_batch(
    parser: Parser, xs: Sequence[Sequence[int]], theta: np.ndarray, k: int = DEFAULT_BEAM
) -> List[List[ScoredSequence]]:
    """Independent beams of width ``k`` for every utterance, run in lockstep.

    At each step every live hypothesis is expanded with its legal actions and
    the best ``k`` candidates per utterance survive; candidates closed by STOP
    move to the finished pool. Ties are broken by the action sequence, smaller
    first. Scores are raw (length-unnormalized) log-probabilities.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    g = parser.grammar
    P = unpack(theta, parser.cfg)
    enc = parser.encode(xs, theta)
    U = len(xs)
    # live hypotheses as parallel lists
    owner = list(range(U))
    s = enc.s0
    gstate = [g.initial_state] * U
    prefix: List[tuple] = [()] * U
    score = [0.0] * U
    steps: List[tuple] = [()] * U
    finished: List[list] = [[] for _ in range(U)]

    while owner:
        idx = np.asarray(owner)
        c, _, _ = parser._attend(P, s, enc.states[idx], enc.proj[idx], enc.mask[idx])
        legal = np.stack([g.mask(st) for st in gstate])
        lp = _masked_log_softmax(parser._logits(P, s, c), legal)
        total = np.asarray(score)[:, None] + lp

        by_utt: dict = {}
        for h, u in enumerate(owner):
            by_utt.setdefault(u, []).append(h)

        keep_h, keep_a = [], []
        for u, hs in by_utt.items():
            sub = total[hs]
            flat = sub.ravel()
            n_legal = int(np.isfinite(flat).sum())
            if n_legal > k:
                kth = np.partition(flat, flat.size - k)[flat.size - k]
                cand = np.flatnonzero(flat >= kth)
            else:
                cand = np.flatnonzero(np.isfinite(flat))
            A = sub.shape[1]
            ranked = sorted(
                ((hs[i // A], int(i % A)) for i in cand),
                key=lambda ha: (-total[ha[0], ha[1]], prefix[ha[0]] + (ha[1],)),
            )[:k]
            fin = finished[u]
            for h, a in ranked:
                if a == g.STOP:
                    acts = prefix[h] + (a,)
                    fin.append(
                        ScoredSequence(
                            acts,
                            float(total[h, a]),
                            steps[h] + (float(lp[h, a]),),
                            g.decode(acts),
                        )
                    )
                else:
                    keep_h.append(h)
                    keep_a.append(a)
        if not keep_h:
            break
        kh = np.asarray(keep_h)
        ka = np.asarray(keep_a)
        new_s = parser._advance(P, ka, s[kh], c[kh])
        new_owner, new_g, new_prefix, new_score, new_steps = [], [], [], [], []
        for h, a in zip(keep_h, keep_a):
            new_owner.append(owner[h])
            new_g.append(g.advance(gstate[h], a))
            new_prefix.append(prefix[h] + (a,))
            new_score.append(float(total[h, a]))
            new_steps.append(steps[h] + (float(lp[h, a]),))
        # drop utterances whose live hypotheses can no longer reach the top k
        alive = []
        for i, u in enumerate(new_owner):
            fin = finished[u]
            if len(fin) >= k:
                kth_best = sorted(f.logprob for f in fin)[-k]
                if new_score[i] < kth_best:
                    continue
            alive.append(i)
        owner = [new_owner[i] for i in alive]
        gstate = [new_g[i] for i in alive]
        prefix = [new_prefix[i] for i in alive]
        score = [new_score[i] for i in alive]
        steps = [new_steps[i] for i in alive]
        s = new_s[alive] if alive else new_s[:0]

    out = []
    for fin in finished:
        fin.sort(key=lambda f: (-f.logprob, f.actions))
        out.append(fin[:k])
    return out


def beam_search(parser: Parser, x, theta, k: int = DEFAULT_BEAM) -> List[ScoredSequence]:
    return beam_search_batch(parser, [x], theta, k)[0]


def greedy_decode(parser: Parser, x, theta) -> ScoredSequence:
    return beam_search(parser, x, theta, 1)[0]


def exact_executable_mass(
    parser: Parser, x, theta, kb: KnowledgeBase, capacity: int = DEFAULT_CAPACITY
) -> float:
    """Sum of ``R(y) p(y|x)`` over the whole program space (enumeration)."""
    g = parser.grammar
    seqs = g.enumerate_actions(capacity)
    rewards = np.array([reward(g.decode(y), kb) for y in seqs], dtype=float)
    lps = parser.log_probs([x] * len(seqs), seqs, theta)
    return float(np.dot(rewards, np.exp(lps)))


def score_all(parser: Parser, x, theta, capacity: int = DEFAULT_CAPACITY) -> List[ScoredSequence]:
    """Every program of the grammar scored exactly, in beam order."""
    g = parser.grammar
    seqs = g.enumerate_actions(capacity)
    out = parser.score([x] * len(seqs), seqs, theta)
    for item in out:
        item.program = g.decode(item.actions)
    out.sort(key=lambda f: (-f.logprob, f.actions))
    return out
