"""Coarse-to-fine 2D-3D matching: patch classification, then pixel search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceeded, DataFormatError, DimensionMismatch, NoCorrespondences
from .geometry import read_text


@dataclass(eq=False)
class CorrespondenceSet:
    point_index: np.ndarray  # (N,) int
    X: np.ndarray  # (N, 3) world points
    x: np.ndarray  # (N, 2) pixels
    weights: np.ndarray  # (N, 2), >= 0
    score: np.ndarray  # (N,)

    def __post_init__(self):
        self.point_index = np.asarray(self.point_index, dtype=np.int64).reshape(-1)
        n = len(self.point_index)
        self.X = np.asarray(self.X, dtype=float).reshape(n, 3)
        self.x = np.asarray(self.x, dtype=float).reshape(n, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(n, 2)
        self.score = np.asarray(self.score, dtype=float).reshape(n)
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and non-negative")
        if len(np.unique(self.point_index)) != n:
            raise ValueError("duplicate point_index")

    def __len__(self):
        return len(self.point_index)

    @classmethod
    def from_arrays(cls, X, x, weights=None, score=None):
        n = len(X)
        w = np.ones((n, 2)) if weights is None else weights
        return cls(np.arange(n), X, x, w, np.zeros(n) if score is None else score)

    def subset(self, mask):
        return CorrespondenceSet(
            self.point_index[mask], self.X[mask], self.x[mask], self.weights[mask], self.score[mask]
        )

    def with_weights(self, weights):
        return CorrespondenceSet(self.point_index, self.X, self.x, weights, self.score)


def save_correspondences(path, cs):
    """Text rows ``point_idx u v X Y Z w1 w2 score``."""
    with open(path, "w") as fh:
        for i in range(len(cs)):
            vals = [*cs.x[i], *cs.X[i], *cs.weights[i], cs.score[i]]
            fh.write(f"{cs.point_index[i]} " + " ".join(repr(float(v)) for v in vals) + "\n")


def load_correspondences(path):
    rows = [ln.split() for ln in read_text(path).splitlines() if ln.strip() and not ln.startswith("#")]
    if any(len(r) != 9 for r in rows):
        raise DataFormatError(f"{path}: correspondence rows need 9 columns")
    if not rows:
        return CorrespondenceSet(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    try:
        idx = np.array([int(r[0]) for r in rows])
        a = np.array([[float(v) for v in r[1:]] for r in rows])
    except ValueError:
        raise DataFormatError(f"{path}: unparseable correspondence row") from None
    return CorrespondenceSet(idx, a[:, 2:5], a[:, 0:2], a[:, 5:7], a[:, 7])


class MatchBudget:
    """Per-point counter of descriptor comparisons.

    One point may be compared against every patch, the null class, and the
    ``g*g`` pixels of each patch it is matched into.
    """

    def __init__(self, n_points, n_patches, g, top_n=1):
        self.per_point = n_patches + 1 + top_n * g * g
        self.counts = np.zeros(n_points, dtype=np.int64)

    def charge(self, which, n):
        self.counts[which] += n
        if np.any(self.counts[which] > self.per_point):
            raise BudgetExceeded(f"more than {self.per_point} comparisons for a point")

    @property
    def comparisons_made(self):
        return int(self.counts.sum())

    @property
    def max_per_point(self):
        return int(self.counts.max()) if len(self.counts) else 0


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify_patches(point_descs, patch_descs, classifier):
    """Softmax over ``(#patches + 1)`` classes; argmax ties go to the lower id."""
    point_descs = np.asarray(point_descs)
    patch_descs = np.asarray(patch_descs)
    if point_descs.shape[-1] != classifier.point_dim or patch_descs.shape[-1] != classifier.point_dim:
        raise DimensionMismatch("descriptor dims do not match the classifier")
    probs = softmax(classifier.logits(point_descs, patch_descs))
    return probs, np.argmax(probs, axis=1)


def _sq_distances(a, B):
    a = np.asarray(a, dtype=float)
    B = np.asarray(B, dtype=float)
    d = (a * a).sum(axis=-1)[..., None] - 2.0 * a @ B.T + (B * B).sum(axis=1)
    return np.maximum(d, 0.0)


def match_pixel(point_desc, cls, pixel_features, grid):
    """Pixel center with the nearest feature inside patch ``cls`` and ``-distance``."""
    if cls < 1:
        raise ValueError("patch class must be >= 1")
    d = _sq_distances(point_desc, pixel_features)
    j = int(np.argmin(d))
    return grid.pixel_centers(cls)[j], -float(np.sqrt(d[j]))


@dataclass
class MatchConfig:
    top_n: int = 1
    dedup: bool = True


@dataclass
class MatchResult:
    correspondences: CorrespondenceSet
    budget: MatchBudget
    classes: np.ndarray  # per candidate point, after dedup
    n_candidates: int


def build_correspondences(submaps, image, classifier, config=None):
    """Match the points of retrieved submaps against one query image.

    ``submaps`` is a sequence of ``(points, descriptors)`` in retrieval-rank
    order.  Points repeated across submaps keep their best-ranked copy.
    Weights start at the winning class probability for both components.
    """
    config = config or MatchConfig()
    if len(submaps) < 1:
        raise ValueError("need at least one submap")
    X = np.concatenate([np.asarray(p, dtype=float).reshape(-1, 3) for p, _ in submaps])
    F = np.concatenate([np.asarray(d) for _, d in submaps])
    if config.dedup and len(X):
        _, first = np.unique(X, axis=0, return_index=True)
        keep = np.sort(first)
        X, F = X[keep], F[keep]
    grid = image.grid
    n = len(X)
    budget = MatchBudget(n, grid.n_patches, grid.g, config.top_n)
    if n == 0:
        raise NoCorrespondences("no candidate points")

    probs, classes = classify_patches(F, image.patch_descriptors, classifier)
    budget.charge(slice(None), grid.n_patches + 1)

    if config.top_n > 1:
        order = np.argsort(-probs[:, 1:], axis=1, kind="stable")[:, : config.top_n] + 1
    else:
        order = classes[:, None]
    active = np.flatnonzero(classes > 0)
    if len(active) == 0:
        raise NoCorrespondences("every point fell into the null class")

    best_d = np.full(n, np.inf)
    best_px = np.zeros((n, 2))
    for rank in range(order.shape[1]):
        cand = order[active, rank]
        for c in np.unique(cand):
            members = active[cand == c]
            feats = image.pixel_features(int(c))
            budget.charge(members, len(feats))
            d = _sq_distances(F[members], feats)
            j = np.argmin(d, axis=1)
            dj = d[np.arange(len(members)), j]
            better = dj < best_d[members]
            best_d[members[better]] = dj[better]
            best_px[members[better]] = grid.pixel_centers(int(c))[j[better]]

    conf = probs[active, classes[active]]
    cs = CorrespondenceSet(
        point_index=active,
        X=X[active],
        x=best_px[active],
        weights=np.column_stack([conf, conf]),
        score=-np.sqrt(best_d[active]),
    )
    return MatchResult(cs, budget, classes, n)
