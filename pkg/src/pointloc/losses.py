"""Training losses and evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyResults, NegativeTooClose, ZeroProbabilityWarning
from .geometry import rre, rte

DEFAULT_THRESHOLDS = ((0.1, 1.0), (0.25, 2.0), (1.0, 5.0))
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5
    margin: float = 0.4
    neg_pixel_min_dist: float | None = None  # None means g / 2

    def __post_init__(self):
        vals = [self.alpha, self.beta, self.gamma, self.margin]
        if self.neg_pixel_min_dist is not None:
            vals.append(self.neg_pixel_min_dist)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError("loss weights, margin and distances must be finite and >= 0")

    def min_negative_distance(self, g):
        return g / 2 if self.neg_pixel_min_dist is None else self.neg_pixel_min_dist


def triplet_loss(a, p, n, margin=0.4):
    """Hinge ``max(m + |a - p| - |a - n|, 0)``."""
    a, p, n = (np.asarray(v, dtype=float) for v in (a, p, n))
    if not (a.shape == p.shape == n.shape):
        raise DimensionMismatch(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    return max(margin + float(np.linalg.norm(a - p)) - float(np.linalg.norm(a - n)), 0.0)


def triplet_subgradient(a, p, n, margin=0.4):
    """Gradient of ``triplet_loss`` with respect to the anchor (0 on the flat side)."""
    a, p, n = (np.asarray(v, dtype=float) for v in (a, p, n))
    dp, dn = a - p, a - n
    np_, nn = np.linalg.norm(dp), np.linalg.norm(dn)
    if margin + np_ - nn <= 0:
        return np.zeros_like(a)
    gp = dp / np_ if np_ > 0 else np.zeros_like(a)
    gn = dn / nn if nn > 0 else np.zeros_like(a)
    return gp - gn


def global_loss(image_desc, positive_desc, negative_desc, cfg=None):
    cfg = cfg or LossConfig()
    return triplet_loss(image_desc, positive_desc, negative_desc, cfg.margin)


def check_negative_pixel(x, x_neg, min_dist):
    """Raise ``NegativeTooClose`` unless ``|x_neg - x|_inf >= min_dist``."""
    d = float(np.max(np.abs(np.asarray(x_neg, dtype=float) - np.asarray(x, dtype=float))))
    if d < min_dist:
        raise NegativeTooClose(f"negative pixel is {d} px from the positive, need >= {min_dist}")


def pixel_loss(point_feat, pixel_feat, negative_feat, x, x_neg, g, cfg=None):
    cfg = cfg or LossConfig()
    check_negative_pixel(x, x_neg, cfg.min_negative_distance(g))
    return triplet_loss(point_feat, pixel_feat, negative_feat, cfg.margin)


def sample_negative_pixel(x, width, height, min_dist, rng, max_tries=1000):
    """Pixel center drawn uniformly from those at Chebyshev distance ``>= min_dist``.

    Candidates are rejected until one satisfies the constraint.
    """
    x = np.asarray(x, dtype=float)
    for _ in range(max_tries):
        cand = np.array([rng.integers(width), rng.integers(height)]) + 0.5
        if np.max(np.abs(cand - x)) >= min_dist:
            return cand
    raise NegativeTooClose(f"no pixel at distance >= {min_dist} found in {max_tries} draws")


def patch_ce_loss(probs, gt_class):
    """``-log p[gt]``; a zero probability is clamped to 1e-12 with a warning."""
    probs = np.asarray(probs, dtype=float).reshape(-1)
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"class distribution sums to {probs.sum()}, not 1")
    p = probs[int(gt_class)]
    if p < PROB_FLOOR:
        warnings.warn(f"probability {p} of the true class clamped to {PROB_FLOOR}", ZeroProbabilityWarning)
        p = PROB_FLOOR
    return -float(np.log(p))


def total_loss(global_term, patch_term, pixel_term, kl_term, cfg=None):
    cfg = cfg or LossConfig()
    parts = (global_term, patch_term, pixel_term, kl_term)
    if not all(np.isfinite(v) for v in parts):
        raise ValueError("loss components must be finite")
    return cfg.alpha * global_term + cfg.beta * patch_term + cfg.gamma * pixel_term + kl_term


@dataclass
class LocalizationResult:
    query_id: int
    estimate: object  # Pose
    ground_truth: object  # Pose

    @property
    def rte(self):
        return rte(self.estimate, self.ground_truth)

    @property
    def rre(self):
        return rre(self.estimate, self.ground_truth)


def localization_recall(results, thresholds=DEFAULT_THRESHOLDS):
    """Fraction of queries with ``rte <= t`` and ``rre <= r`` for every ``(t, r)``."""
    results = list(results)
    if not results:
        raise EmptyResults("no localization results")
    errs = np.array([(r.rte, r.rre) for r in results])
    return [float(np.mean((errs[:, 0] <= t) & (errs[:, 1] <= r))) for t, r in thresholds]


def retrieval_recall_at_k(rankings, k, rte_threshold=0.1):
    """Fraction of queries with any of the top ``k`` candidate poses within ``rte_threshold``.

    ``rankings`` holds one ``(query_pose, [candidate poses in rank order])``
    pair per query.
    """
    rankings = list(rankings)
    if not rankings:
        raise EmptyResults("no retrieval rankings")
    hits = [any(rte(c, q) < rte_threshold for c in cands[:k]) for q, cands in rankings]
    return float(np.mean(hits))
