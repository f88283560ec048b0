"""Semi-supervised training: supervised NLL plus a weighted unsupervised loss.

Each step samples one labeled and one unlabeled batch and takes a plain SGD
step on ``mean L_sup + lambda * mean L_unsup``. Before ``warmup_steps`` the
unsupervised weight is forced to zero and unlabeled data is not touched.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datagen import Corpus, Example
from .executor import KnowledgeBase
from .metrics import DiagnosticsAccumulator, avg_ratio, coverage, denotation_accuracy, maybe
from .model import ModelConfig, Parser, Vocab, init_params, save_checkpoint
from .objectives import OBJECTIVES, get_loss
from .search import beam_search_batch, partition

log = logging.getLogger(__name__)

SUPERVISED_ONLY = "none"
CSV_COLUMNS = ["step", "objective", "loss_sup", "loss_unsup", "avg_ratio", "coverage",
               "dev_denotation_acc", "skipped_frac"]


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    objective: str = "topk"
    lam: float = 0.3
    warmup_steps: int = 1000
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    lr: float = 0.1
    max_steps: int = 2000
    seed: int = 0
    beam: int = 16
    hidden: int = 64
    embed: int = 32
    eval_every: int = 100
    threads: int = 1
    # rescale the combined gradient to at most this norm; 0 disables
    clip_norm: float = 0.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES + (SUPERVISED_ONLY,):
            raise ValueError(
                f"unknown objective {self.objective!r}; choose one of "
                f"{', '.join(OBJECTIVES + (SUPERVISED_ONLY,))}"
            )
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        for name in ("batch_labeled", "batch_unlabeled", "max_steps", "beam", "hidden",
                     "embed", "eval_every", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.lr <= 0 or self.clip_norm < 0:
            raise ValueError("warmup_steps and clip_norm must be >= 0 and lr > 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class StepMetrics:
    step: int
    objective: str
    loss_sup: float
    loss_unsup: Optional[float]
    avg_ratio: Optional[float]
    coverage: Optional[float]
    dev_denotation_acc: Optional[float]
    skipped_frac: Optional[float]
    combined: float = math.nan
    contributing: int = 0
    skipped: int = 0

    def row(self) -> List[str]:
        def fmt(v):
            return "" if v is None else format(v, ".10g")

        return [str(self.step), self.objective, fmt(self.loss_sup), fmt(self.loss_unsup),
                fmt(self.avg_ratio), fmt(self.coverage), fmt(self.dev_denotation_acc),
                fmt(self.skipped_frac)]


def build_vocab(corpus: Corpus) -> Vocab:
    vocab = Vocab()
    for e in corpus.labeled + corpus.unlabeled:
        for t in e.tokens:
            vocab.add(t)
    return vocab


class Trainer:
    """Owns parameters, sampling streams and diagnostics for one run."""

    def __init__(self, corpus: Corpus, kb: KnowledgeBase, cfg: TrainConfig,
                 dev: Sequence[Example] = ()):
        if not corpus.labeled:
            raise ValueError("need at least one labeled example")
        self.corpus = corpus
        self.kb = kb
        self.cfg = cfg
        self.dev = list(dev)
        self.grammar = kb.grammar()
        self.vocab = build_vocab(corpus)
        self.model_cfg = ModelConfig(len(self.vocab), self.grammar.num_actions,
                                     hidden=cfg.hidden, embed=cfg.embed)
        self.parser = Parser(self.model_cfg, self.grammar)
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.theta = init_params(self.model_cfg, int(seeds[0].generate_state(1)[0]))
        self.rng_labeled = np.random.default_rng(seeds[1])
        self.rng_unlabeled = np.random.default_rng(seeds[2])
        self.step = 0
        self.diagnostics = DiagnosticsAccumulator()
        self.history: List[StepMetrics] = []
        self._lab_x = [self.vocab.encode(e.tokens) for e in corpus.labeled]
        self._lab_y = [self.grammar.actions(e.program) for e in corpus.labeled]
        self._unl_x = [self.vocab.encode(e.tokens) for e in corpus.unlabeled]
        self._unl_gold = [
            corpus.hidden_gold.get(e.id) for e in corpus.unlabeled
        ]

    # -- one update ---------------------------------------------------------

    def lam_eff(self, step: int) -> float:
        return 0.0 if step < self.cfg.warmup_steps else self.cfg.lam

    def _sample(self, rng, n, b):
        return rng.choice(n, size=min(b, n), replace=False)

    def unsup_terms(self, idx: Sequence[int], theta: np.ndarray):
        """Beam, partition and loss for each unlabeled index (in order)."""
        loss_fn = get_loss(self.cfg.objective)
        xs = [self._unl_x[i] for i in idx]
        chunks = np.array_split(np.arange(len(xs)), min(self.cfg.threads, len(xs)))

        def beams_for(ch):
            return beam_search_batch(self.parser, [xs[i] for i in ch], theta, self.cfg.beam)

        if self.cfg.threads > 1:
            with ThreadPoolExecutor(self.cfg.threads) as pool:
                parts = list(pool.map(beams_for, chunks))
        else:
            parts = [beams_for(ch) for ch in chunks]
        beams = [b for p in parts for b in p]
        out = []
        for i, beam in zip(idx, beams):
            part = partition(beam, self.kb)
            out.append((i, part, loss_fn(part)))
        return out

    def objective(self, lab_idx, unl_idx, theta: np.ndarray, step: int,
                  record: bool = True) -> Tuple[StepMetrics, np.ndarray]:
        """Combined objective metrics and its gradient with respect to ``theta``.

        With ``record`` the unlabeled batch also feeds the running diagnostics.
        """
        lam = self.lam_eff(step)
        xs = [self._lab_x[i] for i in lab_idx]
        ys = [self._lab_y[i] for i in lab_idx]
        ws = [1.0 / len(lab_idx)] * len(lab_idx)
        n_sup = len(xs)

        loss_unsup = ratio = cov = skipped_frac = None
        skipped = contributing = 0
        unsup_mean = 0.0
        objective = self.cfg.objective
        if objective != SUPERVISED_ONLY and lam > 0 and len(unl_idx):
            acc = self.diagnostics if record else copy.deepcopy(self.diagnostics)
            scale = lam / len(unl_idx)
            total = 0.0
            for i, part, res in self.unsup_terms(unl_idx, theta):
                gold = self._unl_gold[i]
                captured = gold is not None and any(s.program == gold for s in part.p_se)
                acc.update(len(self._unl_x[i]), [len(s) for s in part.p_se], captured)
                if res.skipped:
                    skipped += 1
                    continue
                contributing += 1
                total += res.value
                for s, w in res.weights:
                    xs.append(self._unl_x[i])
                    ys.append(s.actions)
                    ws.append(scale * w)
            unsup_mean = total / len(unl_idx)
            loss_unsup = unsup_mean
            skipped_frac = skipped / len(unl_idx)
            ratio = maybe(avg_ratio, acc)
            cov = maybe(coverage, acc)

        F, grad = self.parser.weighted_loglik(xs, ys, np.array(ws), theta)
        if len(xs) > n_sup:
            loss_sup = -float(self.parser.log_probs(xs[:n_sup], ys[:n_sup], theta).mean())
        else:
            loss_sup = -F
        combined = loss_sup + lam * unsup_mean
        m = StepMetrics(step, objective, loss_sup, loss_unsup, ratio, cov, None, skipped_frac,
                        combined, contributing, skipped)
        return m, -grad

    def train_step(self, lab_idx, unl_idx, theta: np.ndarray, step: int):
        m, grad = self.objective(lab_idx, unl_idx, theta, step)
        if not (math.isfinite(m.combined) and np.isfinite(grad).all()):
            raise DivergenceError(
                f"non-finite objective at step {step}: loss_sup={m.loss_sup} "
                f"loss_unsup={m.loss_unsup} |grad|={np.linalg.norm(grad)} "
                f"last rows={[r.row() for r in self.history[-3:]]}"
            )
        norm = float(np.linalg.norm(grad))
        if self.cfg.clip_norm and norm > self.cfg.clip_norm:
            grad = grad * (self.cfg.clip_norm / norm)
        return theta - self.cfg.lr * grad, m

    # -- loops ----------------------------------------------------------------

    def advance(self, n_steps: int, on_step=None) -> None:
        cfg = self.cfg
        for _ in range(n_steps):
            step = self.step
            lab = self._sample(self.rng_labeled, len(self._lab_x), cfg.batch_labeled)
            if self.lam_eff(step) > 0 and cfg.objective != SUPERVISED_ONLY and self._unl_x:
                unl = self._sample(self.rng_unlabeled, len(self._unl_x), cfg.batch_unlabeled)
            else:
                unl = np.zeros(0, dtype=int)
            self.theta, m = self.train_step(lab, unl, self.theta, step)
            self.step += 1
            last = self.step == cfg.max_steps
            if self.dev and (self.step % cfg.eval_every == 0 or last):
                m.dev_denotation_acc = self.dev_accuracy()
            self.history.append(m)
            if on_step:
                on_step(m)
            if step % 100 == 0:
                log.info("step %d sup %.4f unsup %s", step, m.loss_sup, m.loss_unsup)

    def pretrain(self) -> np.ndarray:
        self.advance(max(0, self.cfg.warmup_steps - self.step))
        return self.theta

    def finish(self) -> np.ndarray:
        self.advance(max(0, self.cfg.max_steps - self.step))
        return self.theta

    def fork(self, **changes) -> "Trainer":
        """Copy of this trainer (parameters, RNG streams, history) with a new config."""
        other = copy.copy(self)
        other.cfg = TrainConfig(**{**asdict(self.cfg), **changes})
        other.theta = self.theta.copy()
        other.rng_labeled = copy.deepcopy(self.rng_labeled)
        other.rng_unlabeled = copy.deepcopy(self.rng_unlabeled)
        other.diagnostics = copy.deepcopy(self.diagnostics)
        other.history = [copy.copy(m) for m in self.history]
        for m in other.history:
            m.objective = other.cfg.objective
        return other

    def dev_accuracy(self) -> float:
        return denotation_accuracy(self.parser, self.theta, self.dev, self.vocab, self.kb)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config: {self.cfg.to_json()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in self.history:
            w.writerow(m.row())
        return buf.getvalue()


def pretrain(corpus: Corpus, kb: KnowledgeBase, cfg: TrainConfig) -> np.ndarray:
    return Trainer(corpus, kb, cfg).pretrain()


@dataclass
class RunResult:
    theta: np.ndarray
    metrics_csv: str
    history: List[StepMetrics]
    trainer: Trainer = field(repr=False)

    @property
    def final_dev_accuracy(self) -> Optional[float]:
        return self.history[-1].dev_denotation_acc if self.history else None


def run(corpus: Corpus, kb: KnowledgeBase, cfg: TrainConfig, dev: Sequence[Example] = (),
        out_dir: Optional[str] = None, trainer: Optional[Trainer] = None) -> RunResult:
    """Warm up, train to ``max_steps`` and keep the last parameters.

    Pass a ``trainer`` (e.g. a fork of a shared pretrained one) to resume.
    """
    tr = trainer or Trainer(corpus, kb, cfg, dev)
    tr.finish()
    text = tr.metrics_csv()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
            f.write(text)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), tr.theta, tr.model_cfg)
    return RunResult(tr.theta, text, tr.history, tr)
