"""Desk-scale directional comparison of the unsupervised objectives.

Per seed: generate a corpus, split it, pre-train one supervised parser, then
fork it once per objective (plus a supervised-only continuation) and train
every fork for the same number of further steps.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .datagen import default_domain, generate, split
from .training import SUPERVISED_ONLY, TrainConfig, Trainer

log = logging.getLogger(__name__)

TABLE_OBJECTIVES = ("st", "topk", "repulsion", "gentle", "sparse")
XPR_OBJECTIVES = ("repulsion", "gentle", "sparse")


@dataclass
class Fixture:
    n_examples: int = 1000
    n_dev: int = 300
    labeled_frac: float = 0.3
    beam: int = 16
    seeds: Sequence[int] = (0, 1, 2)
    warmup: int = 2500
    semi_steps: int = 500
    lam: float = 1.0  # picked from the {0.1, 0.3, 1.0} grid
    hidden: int = 64
    embed: int = 32
    lr: float = 0.3
    clip_norm: float = 1.0
    batch_labeled: int = 16
    batch_unlabeled: int = 8
    omit_prob: float = 0.0
    objectives: Sequence[str] = TABLE_OBJECTIVES

    def config(self, seed: int, objective: str = SUPERVISED_ONLY) -> TrainConfig:
        return TrainConfig(
            objective=objective, lam=self.lam, warmup_steps=self.warmup,
            batch_labeled=self.batch_labeled, batch_unlabeled=self.batch_unlabeled,
            lr=self.lr, max_steps=self.warmup + self.semi_steps, seed=seed, beam=self.beam,
            hidden=self.hidden, embed=self.embed, eval_every=self.warmup + self.semi_steps,
            clip_norm=self.clip_norm,
        )


@dataclass
class RunSummary:
    seed: int
    objective: str
    dev_acc: float
    coverage: float
    avg_ratio: float
    seconds: float
    csv: str = field(repr=False, default="")


@dataclass
class DirectionalResult:
    fixture: Fixture
    runs: List[RunSummary]
    pretrain_acc: Dict[int, float]
    seconds: float

    def mean(self, objective: str, attr: str = "dev_acc") -> float:
        vals = [getattr(r, attr) for r in self.runs if r.objective == objective]
        return float(np.mean(vals))

    def table(self) -> str:
        objs = [SUPERVISED_ONLY] + list(self.fixture.objectives)
        lines = [f"{'objective':<10} {'dev_acc':>8} {'coverage':>9} {'avg_ratio':>9}"]
        for o in objs:
            cov = self.mean(o, "coverage") if o != SUPERVISED_ONLY else float("nan")
            rat = self.mean(o, "avg_ratio") if o != SUPERVISED_ONLY else float("nan")
            lines.append(f"{o:<10} {100 * self.mean(o):8.2f} {100 * cov:9.2f} {rat:9.3f}")
        return "\n".join(lines)


def run_directional(fx: Fixture = Fixture()) -> DirectionalResult:
    t0 = time.time()
    runs, pre = [], {}
    for seed in fx.seeds:
        kb, examples, dev = generate(default_domain(
            n_examples=fx.n_examples, n_dev=fx.n_dev, seed=seed, omit_prob=fx.omit_prob))
        corpus = split(examples, fx.labeled_frac, seed)
        base = Trainer(corpus, kb, fx.config(seed), dev)
        base.pretrain()
        pre[seed] = base.dev_accuracy()
        log.info("seed %d pretrained: dev acc %.3f", seed, pre[seed])
        for obj in (SUPERVISED_ONLY,) + tuple(fx.objectives):
            t = time.time()
            tr = base.fork(objective=obj)
            tr.finish()
            last = tr.history[-1]
            nan = float("nan")
            runs.append(RunSummary(
                seed, obj, last.dev_denotation_acc,
                nan if last.coverage is None else last.coverage,
                nan if last.avg_ratio is None else last.avg_ratio,
                time.time() - t, tr.metrics_csv(),
            ))
            log.info("seed %d %s: dev acc %.3f", seed, obj, last.dev_denotation_acc)
    return DirectionalResult(fx, runs, pre, time.time() - t0)
