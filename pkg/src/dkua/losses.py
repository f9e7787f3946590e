"""Instance-level training objectives: classical ReID loss (cross-entropy +
batch-hard triplet), knowledge alignment across previous domains, unified
knowledge association, and the total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DegenerateBatchError, NumericalError
from .numerics import Tensor


@dataclass
class LossConfig:
    margin: float = 0.3
    temperature: float = 0.1
    w_reid: float = 1.0
    w_ka: float = 1.0
    w_uka: float = 1.0
    w_dkt: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError("triplet margin must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Batch mean of -log p[label], probabilities floored at 1e-12."""
    labels = np.asarray(labels)
    b, c = probs.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"labels must be {b} ints in [0, {c})")
    picked = probs[np.arange(b), labels]
    return -(picked.clamp_min(nx.PROB_FLOOR).log()).mean()


def triplet(theta: Tensor, labels: np.ndarray, margin: float) -> Tensor:
    """Batch-hard triplet loss on squared L2 distances.

    Per anchor: hardest positive = max distance over same-label others,
    hardest negative = min distance over different labels. Anchors without
    a positive or a negative are skipped.
    """
    labels = np.asarray(labels)
    x = theta.data
    b = x.shape[0]
    sq = (x ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    anchors, positives, negatives = [], [], []
    for i in range(b):
        same = (labels == labels[i])
        pos = same.copy()
        pos[i] = False
        neg = ~same
        if not pos.any() or not neg.any():
            continue
        anchors.append(i)
        positives.append(np.flatnonzero(pos)[np.argmax(d2[i, pos])])
        negatives.append(np.flatnonzero(neg)[np.argmin(d2[i, neg])])
    if not anchors:
        raise DegenerateBatchError("no anchor has both a positive and a negative")
    a = np.asarray(anchors)
    p = np.asarray(positives)
    n = np.asarray(negatives)
    dp = ((theta[a] - theta[p]) ** 2).sum(axis=1)
    dn = ((theta[a] - theta[n]) ** 2).sum(axis=1)
    return (dp - dn + margin).relu().mean()


def reid_loss(probs: Tensor, labels: np.ndarray, theta: Tensor,
              margin: float) -> tuple[Tensor, Tensor, Tensor]:
    """Classical ReID loss; returns (total, cross-entropy, triplet)."""
    l_ce = cross_entropy(probs, labels)
    l_tri = triplet(theta, labels, margin)
    return l_ce + l_tri, l_ce, l_tri


def ka_loss(thetas: list) -> tuple[Tensor, list]:
    """Knowledge alignment: mean cosine distance between the current
    domain's representation and each previous domain's, averaged over
    previous domains. Zero for the first domain."""
    t = len(thetas)
    if t <= 1:
        return Tensor(0.0), []
    sims = [nx.rowwise_cosine(thetas[-1], thetas[j]) for j in range(t - 1)]
    total = (1.0 - sims[0]).mean()
    for s in sims[1:]:
        total = total + (1.0 - s).mean()
    return total * (1.0 / (t - 1)), sims


def association(theta_i: Tensor, theta: Tensor, temperature: float) -> Tensor:
    """Batch-axis softmax of per-instance cosines between a domain-specific
    representation and the unified one."""
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    cos = nx.rowwise_cosine(theta_i, theta)
    return nx.softmax(cos * (1.0 / temperature), axis=0)


def uka_loss(assocs: list) -> Tensor:
    """Sum of KL(current-domain association || each previous domain's).

    ``assocs`` is ordered by domain, the current domain last. Zero when
    fewer than two domains exist."""
    t = len(assocs)
    if t <= 1:
        return Tensor(0.0)
    current = assocs[-1]
    total = nx.kl_discrete(current, assocs[0])
    for a in assocs[1:-1]:
        total = total + nx.kl_discrete(current, a)
    return total


@dataclass
class LossBreakdown:
    l_ce: float
    l_tri: float
    l_reid: float
    l_ka: float
    l_uka: float
    l_dkt: float
    total: float

    def as_dict(self) -> dict:
        return {
            "l_ce": self.l_ce, "l_tri": self.l_tri, "l_reid": self.l_reid,
            "l_ka": self.l_ka, "l_uka": self.l_uka, "l_dkt": self.l_dkt,
            "total": self.total,
        }


def total_loss(l_reid: Tensor, l_ka: Tensor, l_uka: Tensor, l_dkt: Tensor,
               cfg: LossConfig | None = None) -> Tensor:
    """Weighted sum of the four objective terms (unit weights by default)."""
    cfg = cfg or LossConfig()
    for name, term in (("l_reid", l_reid), ("l_ka", l_ka),
                       ("l_uka", l_uka), ("l_dkt", l_dkt)):
        if not np.isfinite(term.data):
            raise NumericalError(f"non-finite loss term {name}")
    return (cfg.w_reid * l_reid + cfg.w_ka * l_ka
            + cfg.w_uka * l_uka + cfg.w_dkt * l_dkt)
