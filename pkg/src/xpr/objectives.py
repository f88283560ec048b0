"""Unsupervised losses over a seen-program partition and their soft labels.

Every loss is paired with the posterior ``q`` its E-step produces. The M-step
gradient is ``grad L = -sum_y w(y) grad log p(y|x)``, where the weights ``w``
are returned as constants in :attr:`UnsupLossResult.weights`; for the
EM-style objectives ``w`` is exactly ``q`` restricted to the seen set.

Losses accept an optional ``anchor`` partition: the parameters at which the
detached quantities (``y*``, the SparseMax label, Gentle's seen mass) are
evaluated. By default the anchor is the partition itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import ScoredSequence
from .search import SeenPartition, _logsumexp

EPS = 1e-7

OBJECTIVES = ("st", "topk", "repulsion", "gentle", "sparse", "reinforce")


@dataclass
class PosteriorQ:
    support: List[Tuple[ScoredSequence, float]]
    implicit_residual: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.support], dtype=float)

    def total(self) -> float:
        return float(self.weights.sum()) + self.implicit_residual

    def entropy(self) -> float:
        w = self.weights
        w = w[w > 0]
        return float(-(w * np.log(w)).sum())

    def programs(self):
        return [(s.program, w) for s, w in self.support]


@dataclass
class UnsupLossResult:
    value: float
    q: Optional[PosteriorQ]
    weights: List[Tuple[ScoredSequence, float]] = field(default_factory=list)
    skipped: bool = False
    diagnostics: Dict[str, float] = field(default_factory=dict)


def _diag(part: SeenPartition, **extra) -> Dict[str, float]:
    d = {
        "mass_se": part.mass_se,
        "mass_sn": part.mass_sn,
        "n_se": len(part.p_se),
        "n_sn": len(part.p_sn),
    }
    d.update(extra)
    return d


def _skip(part: SeenPartition) -> UnsupLossResult:
    return UnsupLossResult(0.0, None, [], True, _diag(part))


def _best(items: Sequence[ScoredSequence]) -> ScoredSequence:
    return min(items, key=lambda s: (-s.logprob, s.actions))


def _match(part_items, anchor_items):
    """Map anchor sequences onto the equally-labelled items of ``part``."""
    lookup = {s.actions: s for s in part_items}
    return [lookup[a.actions] for a in anchor_items]


def _log1mexp(log_m: float) -> float:
    """log(1 - exp(log_m)) for log_m <= 0."""
    if log_m == -math.inf:
        return 0.0
    if log_m >= 0.0:
        return -math.inf
    return math.log(-math.expm1(log_m)) if log_m > -0.693 else math.log1p(-math.exp(log_m))


def _log_clamped(log_r: float) -> Tuple[float, bool]:
    """Return log(max(r, EPS)) and whether the clamp was active."""
    if log_r < math.log(EPS):
        return math.log(EPS), True
    return log_r, False


# -- SparseMax -----------------------------------------------------------


def sparsemax(z) -> np.ndarray:
    """Euclidean projection of ``z`` onto the probability simplex.

    Sort-and-threshold: with ``z`` sorted descending, the support size is the
    largest k with ``1 + k z_(k) > sum_{j<=k} z_(j)``. Scores are shifted so
    the maximum is 0 first, which makes constant shifts of ``z`` bit-exact.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("sparsemax expects a non-empty vector")
    z = z - z.max()
    zs = np.sort(z)[::-1]
    cssv = np.cumsum(zs)
    ks = np.arange(1, z.size + 1)
    support = 1.0 + ks * zs > cssv
    k = ks[support][-1]
    tau = (cssv[k - 1] - 1.0) / k
    return np.maximum(z - tau, 0.0)


# -- E-step soft labels -----------------------------------------------------


def q_self_training(part: SeenPartition) -> Optional[PosteriorQ]:
    if not part.p_se:
        return None
    return PosteriorQ([(_best(part.p_se), 1.0)])


def q_top_k(part: SeenPartition) -> Optional[PosteriorQ]:
    if not part.p_se:
        return None
    lse = part.log_mass_se
    return PosteriorQ([(s, math.exp(s.logprob - lse)) for s in part.p_se])


def q_repulsion(part: SeenPartition) -> PosteriorQ:
    log_r, _ = _log_clamped(_log1mexp(part.log_mass_sn))
    support = [(s, math.exp(s.logprob - log_r)) for s in part.p_se]
    explicit = sum(w for _, w in support)
    return PosteriorQ(support, max(0.0, 1.0 - explicit))


def q_gentle(part: SeenPartition) -> PosteriorQ:
    if not part.p_se:
        return q_repulsion(part)
    c = min(1.0, part.mass_se + part.mass_sn)
    support = [(s, c * math.exp(s.logprob - part.log_mass_se)) for s in part.p_se]
    return PosteriorQ(support, 1.0 - c)


def q_sparse(part: SeenPartition) -> Optional[PosteriorQ]:
    if not part.p_se:
        return None
    q = sparsemax([s.logprob for s in part.p_se])
    return PosteriorQ([(s, float(w)) for s, w in zip(part.p_se, q)])


def q_rl(part: SeenPartition) -> PosteriorQ:
    """``p(y) R(y)`` on the seen set; unnormalized, the remainder is residual."""
    support = [(s, math.exp(s.logprob)) for s in part.p_se]
    return PosteriorQ(support, max(0.0, 1.0 - part.mass_se))


# -- losses ---------------------------------------------------------------


def loss_self_training(part: SeenPartition, anchor: Optional[SeenPartition] = None):
    anchor = anchor or part
    if not anchor.p_se:
        return _skip(part)
    (star,) = _match(part.p_se, [_best(anchor.p_se)])
    return UnsupLossResult(-star.logprob, PosteriorQ([(star, 1.0)]), [(star, 1.0)],
                           diagnostics=_diag(part))


def loss_top_k(part: SeenPartition, anchor: Optional[SeenPartition] = None):
    q = q_top_k(part)
    if q is None:
        return _skip(part)
    return UnsupLossResult(-part.log_mass_se, q, list(q.support), diagnostics=_diag(part))


def loss_repulsion(part: SeenPartition, anchor: Optional[SeenPartition] = None):
    log_r, clamped = _log_clamped(_log1mexp(part.log_mass_sn))
    weights = [] if clamped else [(s, -math.exp(s.logprob - log_r)) for s in part.p_sn]
    return UnsupLossResult(-log_r, q_repulsion(part), weights,
                           diagnostics=_diag(part, clamped=float(clamped)))


def loss_gentle(part: SeenPartition, anchor: Optional[SeenPartition] = None):
    anchor = anchor or part
    if not part.p_se:
        res = loss_repulsion(part)
        res.diagnostics["fallback"] = 1.0
        return res
    c = min(1.0, anchor.mass_se + anchor.mass_sn)
    log_seen = _logsumexp([part.log_mass_se, part.log_mass_sn])
    log_r, clamped = _log_clamped(_log1mexp(log_seen))
    value = -c * part.log_mass_se - (1.0 - c) * log_r
    weights = [(s, c * math.exp(s.logprob - part.log_mass_se)) for s in part.p_se]
    if not clamped and c < 1.0:
        k = (1.0 - c) * math.exp(-log_r)
        weights = [(s, w - k * math.exp(s.logprob)) for s, w in weights]
        weights += [(s, -k * math.exp(s.logprob)) for s in part.p_sn]
    return UnsupLossResult(value, q_gentle(anchor), weights, diagnostics=_diag(part, fallback=0.0))


def loss_sparse(part: SeenPartition, anchor: Optional[SeenPartition] = None):
    anchor = anchor or part
    qa = q_sparse(anchor)
    if qa is None:
        return _skip(part)
    items = _match(part.p_se, [s for s, _ in qa.support])
    weights = [(s, w) for s, (_, w) in zip(items, qa.support) if w > 0.0]
    value = -sum(w * s.logprob for s, w in weights)
    return UnsupLossResult(value, PosteriorQ(weights), weights,
                           diagnostics=_diag(part, support=len(weights)))


def loss_reinforce(part: SeenPartition, anchor: Optional[SeenPartition] = None):
    """Beam estimate of ``1 - E_p[R]``; same gradient as ``-E_p[R]``."""
    q = q_rl(part)
    return UnsupLossResult(1.0 - part.mass_se, q, list(q.support), diagnostics=_diag(part))


LOSSES: Dict[str, Callable[..., UnsupLossResult]] = {
    "st": loss_self_training,
    "topk": loss_top_k,
    "repulsion": loss_repulsion,
    "gentle": loss_gentle,
    "sparse": loss_sparse,
    "reinforce": loss_reinforce,
}


def get_loss(name: str) -> Callable[..., UnsupLossResult]:
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(
            f"unknown objective {name!r}; choose one of {', '.join(OBJECTIVES)}"
        ) from None


# -- E-step optimality oracle -----------------------------------------------


@dataclass
class KKTReport:
    n_programs: int
    n_executable: int
    kl_star: float
    min_perturbed_kl: float
    violations: int
    trials: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def kl_to(q: np.ndarray, logp: np.ndarray) -> float:
    """KL(q || p) = -sum q log p - H(q), with 0 log 0 = 0."""
    nz = q > 0
    return float(np.sum(q[nz] * (np.log(q[nz]) - logp[nz])))


def kkt_estep_check(parser, x, theta, kb, trials: int = 1000, seed: int = 0,
                    capacity: int = 10**6) -> KKTReport:
    """Compare the renormalized-p E-step against random feasible soft labels.

    Perturbations mix the closed-form solution with Dirichlet draws, or jitter
    it multiplicatively; both stay on the executable-support simplex.
    """
    from .executor import reward
    from .search import score_all

    items = score_all(parser, x, theta, capacity)
    logp = np.array([s.logprob for s in items])
    exe = np.array([reward(s.program, kb) for s in items], dtype=bool)
    if not exe.any():
        return KKTReport(len(items), 0, math.nan, math.nan, 0, 0)
    lv = logp[exe]
    q_star = np.exp(lv - _logsumexp(lv))
    kl_star = kl_to(q_star, lv)
    rng = np.random.default_rng(seed)
    worst = math.inf
    bad = 0
    for i in range(trials):
        if i % 2 == 0:
            d = rng.dirichlet(np.full(lv.size, rng.choice([0.1, 1.0, 10.0])))
            t = rng.uniform()
            q = (1.0 - t) * q_star + t * d
        else:
            q = q_star * np.exp(rng.normal(scale=rng.uniform(0.01, 1.0), size=lv.size))
            q /= q.sum()
        kl = kl_to(q, lv)
        worst = min(worst, kl)
        if kl < kl_star - 1e-12:
            bad += 1
    return KKTReport(len(items), int(exe.sum()), kl_star, worst, bad, trials)
