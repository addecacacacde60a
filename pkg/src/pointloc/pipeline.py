"""End-to-end localization: database construction, per-query localization,
batch evaluation and stage benchmarks."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, EmptyResults, PointLocError
from .features import PatchGrid, load_descriptors, save_descriptors
from .geometry import format_pose, parse_pose
from .ipr import IprConfig, ipr
from .losses import DEFAULT_THRESHOLDS, LocalizationResult, localization_recall, retrieval_recall_at_k
from .matcher import MatchConfig, build_correspondences
from .pnp import PnPProblem, refine_weighted, solve_ransac
from .submaps import (
    DEFAULT_M,
    INDOOR_RADIUS,
    Submap,
    SubmapIndex,
    cut_submap,
    downsample,
    load_cloud,
    load_index,
    retrieve_topk,
    save_cloud,
    save_index,
)

STAGES = ("retrieve", "match", "ransac", "refine")


@dataclass
class PipelineConfig:
    g: int = 16
    kernel: int = 9
    frequencies: int = 6
    m: int = DEFAULT_M
    k: int = 4
    radius: float = INDOOR_RADIUS
    ransac_iterations: int = 1000
    inlier_px: float = 4.0
    ransac_confidence: float | None = 0.9999
    top_n: int = 1
    seed: int = 0


@contextmanager
def stage(name, timings):
    """Time a block and tag any package error it raises with the stage name."""
    t0 = time.perf_counter()
    try:
        yield
    except PointLocError as err:
        err.stage = name
        if hasattr(err, "add_note"):
            err.add_note(f"stage: {name}")
        raise
    finally:
        timings[name] = time.perf_counter() - t0


# ---------------------------------------------------------------------------
# database
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Database:
    submaps: list
    descriptors: dict  # submap id -> (n, D) float32 local descriptors
    index: SubmapIndex

    def __post_init__(self):
        self._by_id = {s.id: s for s in self.submaps}

    def submap(self, sid):
        return self._by_id[sid]

    def gather(self, ids):
        return [(self._by_id[i].points, self.descriptors[i]) for i in ids]


def make_submap(cloud, pose, camera, sid, cfg):
    """Frustum cut, invisible point removal from ``pose``, then downsampling to M."""
    idx = cut_submap(cloud, pose, camera, cfg.radius, return_indices=True)
    idx = idx[ipr(cloud[idx], pose, camera, IprConfig(cfg.kernel))]
    idx = idx[downsample(cloud[idx], cfg.m, seed=cfg.seed + sid, return_indices=True)]
    return idx


def partition(cloud, poses, camera, cfg=None):
    """One submap per reference pose, without descriptors."""
    cfg = cfg or PipelineConfig()
    cloud = np.asarray(cloud, dtype=float)
    return [Submap(sid, cloud[make_submap(cloud, pose, camera, sid, cfg)], pose) for sid, pose in enumerate(poses)]


def index_submaps(submaps, embedding, cfg=None, tag=""):
    """Attach global and per-point descriptors from ``embedding`` and build the index."""
    cfg = cfg or PipelineConfig()
    out, descs = [], {}
    for s in submaps:
        out.append(Submap(s.id, s.points, s.origin_pose, embedding.global_(s.points).astype(float)))
        descs[s.id] = embedding.local(s.points)
    index = SubmapIndex.from_submaps(out, m=cfg.m, radius=cfg.radius, tag=tag)
    return Database(out, descs, index)


def build_database(cloud, poses, camera, embedding, cfg=None, tag=""):
    return index_submaps(partition(cloud, poses, camera, cfg), embedding, cfg, tag)


def save_submaps(directory, submaps):
    d = Path(directory)
    (d / "submaps").mkdir(parents=True, exist_ok=True)
    for s in submaps:
        save_cloud(d / "submaps" / f"{s.id:04d}.eppc", s.points)
    (d / "submaps.txt").write_text("".join(f"{s.id} {format_pose(s.origin_pose)}\n" for s in submaps))


def load_submaps(directory):
    d = Path(directory)
    listing = d / "submaps.txt"
    if not listing.exists():
        raise DataFormatError(f"{listing}: missing submap listing")
    out = []
    for line in listing.read_text().splitlines():
        if not line.strip():
            continue
        sid, rest = line.split(maxsplit=1)
        out.append(Submap(int(sid), load_cloud(d / "submaps" / f"{int(sid):04d}.eppc"), parse_pose(rest)))
    return out


def save_database(directory, db):
    d = Path(directory)
    save_submaps(d, db.submaps)
    (d / "descriptors").mkdir(exist_ok=True)
    for sid, desc in db.descriptors.items():
        save_descriptors(d / "descriptors" / f"{sid:04d}.epds", desc)
    save_index(d / "index.epix", db.index)


def load_database(directory):
    d = Path(directory)
    index = load_index(d / "index.epix")
    submaps = load_submaps(d)
    by_id = {int(i): k for k, i in enumerate(index.ids)}
    out, descs = [], {}
    for s in submaps:
        if s.id not in by_id:
            raise DataFormatError(f"submap {s.id} is not in the index")
        g = index.descriptors[by_id[s.id]].astype(float)
        out.append(Submap(s.id, s.points, s.origin_pose, g / np.linalg.norm(g)))
        descs[s.id] = load_descriptors(d / "descriptors" / f"{s.id:04d}.epds")
    return Database(out, descs, index)


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------


@dataclass
class Localization:
    pose: object
    retrieved: list
    n_correspondences: int
    n_inliers: int
    max_comparisons: int
    timings: dict = field(default_factory=dict)


def localize(db, image, camera, classifier, cfg=None):
    """Retrieve top-k submaps, classify and match their points, then RANSAC + LM."""
    cfg = cfg or PipelineConfig()
    t = {}
    with stage("retrieve", t):
        ids = retrieve_topk(db.index, image.global_descriptor, cfg.k)
    with stage("match", t):
        match = build_correspondences(db.gather(ids), image, classifier, MatchConfig(top_n=cfg.top_n))
        problem = PnPProblem.from_correspondences(match.correspondences, camera)
    with stage("ransac", t):
        rs = solve_ransac(
            problem, cfg.ransac_iterations, cfg.inlier_px, seed=cfg.seed, confidence=cfg.ransac_confidence
        )
    with stage("refine", t):
        pose = refine_weighted(problem.subset(rs.inliers), rs.pose).pose
    return Localization(pose, ids, len(problem), rs.n_inliers, match.budget.max_per_point, t)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(estimates, ground_truth, thresholds=DEFAULT_THRESHOLDS):
    """Recall table and mean errors for paired pose lists (``None`` = failed query)."""
    if len(estimates) != len(ground_truth):
        raise ValueError("need one ground-truth pose per estimate")
    if not estimates:
        raise EmptyResults("no queries")
    ok = [i for i, e in enumerate(estimates) if e is not None]
    results = [LocalizationResult(i, estimates[i], ground_truth[i]) for i in ok]
    n = len(estimates)
    recalls = localization_recall(results, thresholds) if results else [0.0] * len(thresholds)
    # failed queries count as misses
    recalls = [r * len(results) / n for r in recalls]
    rtes = np.array([r.rte for r in results])
    rres = np.array([r.rre for r in results])
    out = {"queries": n, "localized": len(results)}
    for (tt, tr), r in zip(thresholds, recalls):
        out[f"recall_{tt:g}m_{tr:g}deg"] = r
    out["rte_mean"] = float(rtes.mean()) if len(rtes) else float("nan")
    out["rte_median"] = float(np.median(rtes)) if len(rtes) else float("nan")
    out["rre_mean"] = float(rres.mean()) if len(rres) else float("nan")
    out["rre_median"] = float(np.median(rres)) if len(rres) else float("nan")
    return out


def latency_stats(timings):
    """Mean, median and 95th percentile of each stage over a list of timing dicts."""
    if not timings:
        raise EmptyResults("no timings")
    out = {}
    for name in STAGES:
        v = np.array([t[name] for t in timings if name in t])
        if len(v):
            out[name] = {"mean": float(v.mean()), "p50": float(np.median(v)), "p95": float(np.percentile(v, 95))}
    return out


@dataclass
class BenchReport:
    metrics: dict
    latency: dict
    retrieval_recall: dict
    max_comparisons: int
    localizations: list
    failures: dict


def run_queries(db, queries, camera, classifier, image_provider, cfg=None, ks=(1, 2, 4)):
    """Localize every ``(query_pose)``; ``image_provider(pose)`` gives its features.

    Failures (any package error) are recorded by query index and count as
    misses.
    """
    cfg = cfg or PipelineConfig()
    queries = list(queries)
    if not queries:
        raise EmptyResults("no queries")
    locs, estimates, failures, rankings = [], [], {}, []
    for qi, gt in enumerate(queries):
        image = image_provider(gt)
        ranked = retrieve_topk(db.index, image.global_descriptor, max(ks))
        rankings.append((gt, [db.submap(i).origin_pose for i in ranked]))
        try:
            loc = localize(db, image, camera, classifier, cfg)
        except PointLocError as err:
            failures[qi] = f"{getattr(err, 'stage', '?')}: {type(err).__name__}: {err}"
            estimates.append(None)
            continue
        locs.append(loc)
        estimates.append(loc.pose)
    metrics = evaluate(estimates, queries)
    rr = {k: retrieval_recall_at_k(rankings, k) for k in ks}
    latency = latency_stats([l.timings for l in locs]) if locs else {}
    worst = max((l.max_comparisons for l in locs), default=0)
    return BenchReport(metrics, latency, rr, worst, locs, failures)


def near_queries(poses, n, rng, max_offset=0.03, max_angle_deg=0.3):
    """Query poses obtained by small perturbations of database poses."""
    from .geometry import Pose, exp_so3

    out = []
    for q in range(n):
        base = poses[q % len(poses)]
        w = rng.normal(size=3)
        w *= np.radians(rng.uniform(0, max_angle_deg)) / np.linalg.norm(w)
        d = rng.normal(size=3)
        d *= rng.uniform(0, max_offset) / np.linalg.norm(d)
        R = exp_so3(w) @ base.rotation
        c = base.center() + d
        out.append(Pose(R, -R @ c))
    return out


def default_grid(camera, g=16):
    return PatchGrid(camera.width, camera.height, g)
