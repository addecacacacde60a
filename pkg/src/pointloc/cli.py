"""Command-line interface.

Every subcommand prints ``key=value`` lines.  Settings come from an optional
``key=value`` config file (``--config``) overridden by ``--set key=value``
flags; unknown keys are rejected.  Exit codes: 0 success, 2 configuration
error, 3 data-format error, 4 algorithmic failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import AlgorithmError, ConfigError, DataFormatError, DimensionMismatch, EmptyResults, PointLocError
from .features import OracleEmbedding, PatchGrid, load_classifier, load_descriptors
from .geometry import format_pose, read_intrinsics, read_poses, rre, rte, write_poses
from .ipr import IprConfig, ipr, rasterize_depth, save_depth_map
from .matcher import load_correspondences
from .pipeline import (
    PipelineConfig,
    evaluate,
    index_submaps,
    latency_stats,
    load_database,
    load_submaps,
    localize,
    partition,
    save_database,
    save_submaps,
)
from .pnp import PnPProblem, SamplerConfig, kl_loss, refine_weighted, solve_ransac
from .submaps import load_cloud, load_index, retrieve_topk
from .synth import default_camera, gen_scene, oracle_image_features, read_scene, write_scene

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    g: int = 16
    s: int = 9
    L: int = 6
    M: int = 65_536
    k: int = 4
    radius: float = 10.0
    ransac_iterations: int = 1000
    inlier_px: float = 4.0
    ransac_confidence: float = 0.9999
    top_n: int = 1
    seed: int = 0
    thresholds: str = "0.1:1,0.25:2,1:5"
    embedding_seed: int = 0
    null_distance: float = 0.3
    sharpness: float = 1e6
    weights: str = ""  # EPMW classifier file; empty means the oracle classifier
    tag: str = ""

    def validate(self):
        checks = [
            (self.g > 0, "g must be positive"),
            (self.s > 0 and self.s % 2 == 1, "s must be a positive odd integer"),
            (self.L >= 1, "L must be >= 1"),
            (self.M >= 1, "M must be >= 1"),
            (self.k >= 1, "k must be >= 1"),
            (self.radius > 0, "radius must be positive"),
            (self.ransac_iterations >= 1, "ransac_iterations must be >= 1"),
            (self.inlier_px > 0, "inlier_px must be positive"),
            (0 < self.ransac_confidence <= 1, "ransac_confidence must be in (0, 1]"),
            (self.top_n >= 1, "top_n must be >= 1"),
            (self.null_distance > 0 and self.sharpness > 0, "null_distance and sharpness must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.threshold_pairs()
        return self

    def threshold_pairs(self):
        try:
            pairs = [tuple(float(v) for v in item.split(":")) for item in self.thresholds.split(",")]
        except ValueError:
            raise ConfigError(f"bad thresholds {self.thresholds!r}") from None
        if not pairs or any(len(p) != 2 or p[0] < 0 or p[1] < 0 for p in pairs):
            raise ConfigError(f"thresholds must look like 0.1:1,0.25:2, got {self.thresholds!r}")
        return pairs

    def pipeline(self):
        return PipelineConfig(
            g=self.g, kernel=self.s, frequencies=self.L, m=self.M, k=self.k, radius=self.radius,
            ransac_iterations=self.ransac_iterations, inlier_px=self.inlier_px,
            ransac_confidence=None if self.ransac_confidence >= 1 else self.ransac_confidence,
            top_n=self.top_n, seed=self.seed,
        )


def _coerce(name, raw):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text, source="config"):
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides=()):
    values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(parse_config_text("\n".join(overrides), "--set"))
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def emit(pairs, out=None):
    """Print ``key=value`` lines and optionally write them to ``out``."""
    text = "".join(f"{k}={v}\n" for k, v in pairs)
    sys.stdout.write(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def oracle_embedding(scene, cfg):
    lo, hi = scene.cloud.min(axis=0), scene.cloud.max(axis=0)
    return OracleEmbedding(seed=cfg.embedding_seed, center=(lo + hi) / 2)


def classifier_for(embedding, cfg):
    if cfg.weights:
        return load_classifier(cfg.weights)
    return embedding.classifier(cfg.null_distance, cfg.sharpness)


def _pose_at(path, index):
    poses = read_poses(path)
    if not 0 <= index < len(poses):
        raise ConfigError(f"{path} has {len(poses)} poses, index {index} requested")
    return poses[index]


def _read_estimates(path):
    """Pose file in which an all-NaN line marks a failed query."""
    return [None if np.isnan(p.translation).any() else p for p in read_poses(path)]


def _failed_line():
    return " ".join(["nan"] * 12)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg):
    camera = default_camera(args.width, args.height, args.fov)
    scene = gen_scene(args.kind, args.points, args.poses, seed=cfg.seed, camera=camera)
    write_scene(scene, args.out, gt=not args.no_gt)
    if args.queries:
        from .pipeline import near_queries

        qs = near_queries(scene.poses, args.queries, np.random.default_rng(cfg.seed + 1))
        write_poses(Path(args.out) / "queries.txt", qs)
    emit([("scene", args.out), ("kind", args.kind), ("points", len(scene.cloud)), ("poses", len(scene.poses)),
          ("queries", args.queries)])


def cmd_ipr(args, cfg):
    cloud = load_cloud(args.cloud).astype(float)
    camera = read_intrinsics(args.intrinsics)
    pose = _pose_at(args.pose, args.pose_index)
    kept = ipr(cloud, pose, camera, IprConfig(cfg.s))
    if args.out:
        Path(args.out).write_text("".join(f"{i}\n" for i in kept))
    if args.depth_out:
        save_depth_map(args.depth_out, rasterize_depth(cloud, pose, camera).depth)
    emit([("points", len(cloud)), ("kept", len(kept)), ("removed_fraction", _fmt(1 - len(kept) / max(len(cloud), 1)))])


def cmd_partition(args, cfg):
    scene = read_scene(args.scene)
    submaps = partition(scene.cloud, scene.poses, scene.camera, cfg.pipeline())
    save_submaps(args.out, submaps)
    sizes = [len(s.points) for s in submaps]
    emit([("submaps", len(submaps)), ("points_min", min(sizes)), ("points_max", max(sizes)), ("out", args.out)])


def cmd_index(args, cfg):
    scene = read_scene(args.scene)
    db = index_submaps(load_submaps(args.db), oracle_embedding(scene, cfg), cfg.pipeline(), tag=cfg.tag)
    save_database(args.db, db)
    emit([("submaps", len(db.index)), ("dim", db.index.dim), ("index", Path(args.db) / "index.epix")])


def _query_image(args, cfg, scene, embedding, pose):
    grid = PatchGrid(scene.camera.width, scene.camera.height, cfg.g)
    return oracle_image_features(scene.boxes, pose, scene.camera, embedding, grid, cfg.radius)


def cmd_retrieve(args, cfg):
    index = load_index(Path(args.db) / "index.epix")
    if args.descriptor:
        q = load_descriptors(args.descriptor)[0]
    else:
        if not (args.scene and args.queries):
            raise ConfigError("retrieve needs --descriptor or --scene with --queries")
        scene = read_scene(args.scene)
        pose = _pose_at(args.queries, args.query_index)
        q = _query_image(args, cfg, scene, oracle_embedding(scene, cfg), pose).global_descriptor
    ids, dist = retrieve_topk(index, q, cfg.k, return_distances=True)
    emit([("ids", ",".join(map(str, ids))), ("distances", ",".join(f"{d:.6g}" for d in dist))])


def _localize_many(args, cfg, indices):
    scene = read_scene(args.scene)
    db = load_database(args.db)
    embedding = oracle_embedding(scene, cfg)
    clf = classifier_for(embedding, cfg)
    queries = read_poses(args.queries)
    out = []
    for qi in indices:
        if not 0 <= qi < len(queries):
            raise ConfigError(f"query index {qi} out of range")
        image = _query_image(args, cfg, scene, embedding, queries[qi])
        try:
            loc = localize(db, image, scene.camera, clf, cfg.pipeline())
        except AlgorithmError as err:
            if len(indices) == 1:
                raise
            out.append((qi, queries[qi], None, err))
            continue
        out.append((qi, queries[qi], loc, None))
    return out


def cmd_localize(args, cfg):
    (_, gt, loc, _), = _localize_many(args, cfg, [args.query_index])
    if args.out:
        write_poses(args.out, [loc.pose])
    pairs = [("pose", format_pose(loc.pose)), ("retrieved", ",".join(map(str, loc.retrieved))),
             ("correspondences", loc.n_correspondences), ("inliers", loc.n_inliers),
             ("max_comparisons", loc.max_comparisons)]
    pairs += [(f"time_{k}", _fmt(v)) for k, v in loc.timings.items()]
    pairs += [("rte", _fmt(rte(loc.pose, gt))), ("rre", _fmt(rre(loc.pose, gt)))]
    emit(pairs)


def cmd_pnp(args, cfg):
    cs = load_correspondences(args.correspondences)
    camera = read_intrinsics(args.intrinsics)
    problem = PnPProblem.from_correspondences(cs, camera)
    pc = cfg.pipeline()
    rs = solve_ransac(problem, pc.ransac_iterations, pc.inlier_px, seed=pc.seed, confidence=pc.ransac_confidence)
    ref = refine_weighted(problem.subset(rs.inliers), rs.pose)
    if args.out:
        write_poses(args.out, [ref.pose])
    pairs = [("pose", format_pose(ref.pose)), ("inliers", rs.n_inliers), ("pairs", len(problem)),
             ("cost", _fmt(ref.cost)), ("lm_iterations", ref.iterations), ("converged", int(ref.converged))]
    if args.kl:
        est = kl_loss(problem.subset(rs.inliers), ref.pose, SamplerConfig(seed=pc.seed), center=ref.pose)
        pairs += [("kl", _fmt(est.loss)), ("kl_se", _fmt(est.standard_error))]
    emit(pairs)


def _figure_path(report, suffix, figures):
    if figures:
        return Path(figures) / f"{suffix}.png"
    if report:
        p = Path(report)
        return p.with_name(f"{p.stem}_{suffix}.png")
    return None


def _metrics_pairs(metrics):
    return [(k, _fmt(v)) for k, v in metrics.items()]


def _error_arrays(estimates, gts):
    e_t = np.array([rte(e, g) if e is not None else np.inf for e, g in zip(estimates, gts)])
    e_r = np.array([rre(e, g) if e is not None else np.inf for e, g in zip(estimates, gts)])
    return e_t, e_r


def cmd_evaluate(args, cfg):
    estimates = _read_estimates(args.estimates)
    gts = read_poses(args.gt)
    if len(estimates) != len(gts):
        raise DataFormatError(f"{len(estimates)} estimates for {len(gts)} ground-truth poses")
    metrics = evaluate(estimates, gts, cfg.threshold_pairs())
    emit(_metrics_pairs(metrics), args.out)
    _figures(args, estimates, gts, None)


def _figures(args, estimates, gts, latency):
    if args.no_figures:
        return
    from . import plotting

    e_t, e_r = _error_arrays(estimates, gts)
    made = []
    path = _figure_path(args.out, "recall", args.figures)
    if path:
        made.append(plotting.plot_recall_curves(e_t, e_r, path))
        made.append(plotting.plot_error_histograms(e_t, e_r, _figure_path(args.out, "errors", args.figures)))
        if latency:
            made.append(plotting.plot_stage_latency(latency, _figure_path(args.out, "latency", args.figures)))
    for p in made:
        sys.stdout.write(f"figure={p}\n")


def cmd_bench(args, cfg):
    queries = read_poses(args.queries)
    n = len(queries) if args.limit is None else min(args.limit, len(queries))
    if n == 0:
        raise EmptyResults("no queries to benchmark")
    results = _localize_many(args, cfg, list(range(n)))
    estimates = [loc.pose if loc else None for _, _, loc, _ in results]
    gts = [gt for _, gt, _, _ in results]
    metrics = evaluate(estimates, gts, cfg.threshold_pairs())
    locs = [loc for _, _, loc, _ in results if loc]
    pairs = _metrics_pairs(metrics)
    latency = latency_stats([loc.timings for loc in locs]) if locs else {}
    for stage, st in latency.items():
        pairs += [(f"latency_{stage}_{k}", _fmt(v)) for k, v in st.items()]
    pairs.append(("max_comparisons", max((loc.max_comparisons for loc in locs), default=0)))
    pairs.append(("failures", len(results) - len(locs)))
    if args.estimates_out:
        lines = [format_pose(e) if e is not None else _failed_line() for e in estimates]
        Path(args.estimates_out).write_text("".join(line + "\n" for line in lines))
    emit(pairs, args.out)
    _figures(args, estimates, gts, latency)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pointloc", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene directory")
    s.add_argument("--kind", choices=["room", "road"], default="room")
    s.add_argument("--points", type=int, default=200_000)
    s.add_argument("--poses", type=int, default=16)
    s.add_argument("--queries", type=int, default=0, help="also write this many query poses")
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--fov", type=float, default=70.0)
    s.add_argument("--no-gt", action="store_true", help="skip ground-truth correspondence files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ipr", parents=[common], help="invisible point removal for one pose")
    s.add_argument("--cloud", required=True)
    s.add_argument("--pose", required=True, help="pose file")
    s.add_argument("--pose-index", type=int, default=0)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--out", help="kept indices, one per line")
    s.add_argument("--depth-out", help="EPDM depth map dump")
    s.set_defaults(func=cmd_ipr)

    s = sub.add_parser("partition", parents=[common], help="cut, clean and downsample submaps")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True, help="database directory")
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("index", parents=[common], help="describe submaps and write the index")
    s.add_argument("--scene", required=True, help="scene directory (oracle descriptor provider)")
    s.add_argument("--db", required=True)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("retrieve", parents=[common], help="top-k submaps for a query")
    s.add_argument("--db", required=True)
    s.add_argument("--descriptor", help="EPDS file holding the query global descriptor")
    s.add_argument("--scene")
    s.add_argument("--queries")
    s.add_argument("--query-index", type=int, default=0)
    s.set_defaults(func=cmd_retrieve)

    for name, func, help_ in (("localize", cmd_localize, "localize one query"),
                              ("bench", cmd_bench, "localize a batch and report latency")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--scene", required=True)
        s.add_argument("--db", required=True)
        s.add_argument("--queries", required=True, help="query pose file (ground truth)")
        s.add_argument("--out")
        if name == "localize":
            s.add_argument("--query-index", type=int, default=0)
        else:
            s.add_argument("--limit", type=int)
            s.add_argument("--estimates-out", help="write estimated poses (NaN rows for failures)")
            s.add_argument("--figures", help="figure directory (default: next to --out)")
            s.add_argument("--no-figures", action="store_true")
        s.set_defaults(func=func)

    s = sub.add_parser("pnp", parents=[common], help="RANSAC + LM on a correspondence file")
    s.add_argument("--correspondences", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--out")
    s.add_argument("--kl", action="store_true", help="also report the KL pose loss estimate and its standard error")
    s.set_defaults(func=cmd_pnp)

    s = sub.add_parser("evaluate", parents=[common], help="recall and error table")
    s.add_argument("--estimates", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.add_argument("--figures")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_evaluate)
    return p


def exit_code(err):
    if isinstance(err, ConfigError):
        return 2
    if isinstance(err, (DataFormatError, DimensionMismatch, OSError)):
        return 3
    return 4


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except (PointLocError, OSError) as err:
        stage = getattr(err, "stage", None)
        prefix = f"stage={stage} " if stage else ""
        sys.stderr.write(f"error: {prefix}{type(err).__name__}: {err}\n")
        return exit_code(err)
    return 0


if __name__ == "__main__":
    sys.exit(main())
