"""Seeded synthetic scenes built from axis-aligned boxes, plus brute-force oracles.

A scene is a set of boxes.  The room box is seen from inside; every other
box is seen from outside.  Points are sampled uniformly by area on the
visible faces, and per-pixel surface points come from exact ray casting
against the same boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataFormatError
from .features import PatchGrid, patch_of
from .geometry import (
    CameraModel,
    Pose,
    project,
    read_intrinsics,
    read_poses,
    read_text,
    write_intrinsics,
    write_poses,
)
from .matcher import CorrespondenceSet, save_correspondences
from .submaps import load_cloud, save_cloud

ROOM_SIZE = (12.0, 8.0, 3.0)
POSE_SPACING = 2.0  # road poses, meters along the trajectory
SURFACE_EPS = 1e-2


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    inside: bool = False  # seen from inside (a room) rather than from outside
    skip_bottom: bool = True  # no points on the face resting on the floor

    def faces(self):
        """``(axis, side, area)`` of every face that carries points."""
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        ext = hi - lo
        out = []
        for axis in range(3):
            other = [a for a in range(3) if a != axis]
            area = ext[other[0]] * ext[other[1]]
            for side in (0, 1):
                if axis == 2 and side == 0 and self.skip_bottom and not self.inside:
                    continue
                out.append((axis, side, area))
        return out


def look_at(center, yaw, pitch=0.0):
    """Pose of a camera at ``center`` looking along ``yaw``/``pitch`` (radians, z up)."""
    f = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    r = np.cross(f, [0.0, 0.0, 1.0])
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.vstack([r, d, f])
    return Pose(R, -R @ np.asarray(center, dtype=float))


def sample_surface(boxes, n, rng):
    """``n`` points drawn uniformly by area over the faces of ``boxes``."""
    faces = [(b, axis, side, area) for b in boxes for axis, side, area in b.faces()]
    areas = np.array([f[3] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    u = rng.random((n, 3))
    pts = np.empty((n, 3))
    for k, (b, axis, side, _) in enumerate(faces):
        sel = which == k
        lo, hi = np.asarray(b.lo), np.asarray(b.hi)
        p = lo + u[sel] * (hi - lo)
        p[:, axis] = hi[axis] if side else lo[axis]
        pts[sel] = p
    # keep coordinates exactly representable in the float32 cloud format
    return pts.astype(np.float32).astype(float)


def raycast(boxes, origins, dirs):
    """Nearest hit distance and surface normal for each ray (``inf`` on a miss)."""
    origins = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
    best = np.full(len(dirs), np.inf)
    normal = np.zeros((len(dirs), 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for b in boxes:
            t1 = (np.asarray(b.lo) - origins) * inv
            t2 = (np.asarray(b.hi) - origins) * inv
            tn, tf = np.minimum(t1, t2), np.maximum(t1, t2)
            tn = np.where(np.isnan(tn), -np.inf, tn)
            tf = np.where(np.isnan(tf), np.inf, tf)
            near, far = tn.max(axis=1), tf.min(axis=1)
            if b.inside:
                t, axis = far, tf.argmin(axis=1)
                hit = (near <= far) & (far > 0)
            else:
                t, axis = near, tn.argmax(axis=1)
                hit = (near <= far) & (near > 0)
            better = hit & (t < best)
            best[better] = t[better]
            n = np.zeros((better.sum(), 3))
            n[np.arange(len(n)), axis[better]] = 1.0
            normal[better] = n
    return best, normal


def pixel_rays(pose, camera):
    """World-frame unit rays through every pixel center, row-major."""
    j, i = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    pix = np.column_stack([j.ravel(), i.ravel()])
    rays_c = camera.backproject(pix, np.ones(len(pix)))
    rays = rays_c @ pose.rotation
    return rays / np.linalg.norm(rays, axis=1, keepdims=True), rays_c


@dataclass
class SurfaceRender:
    points: np.ndarray  # (H*W, 3), NaN where nothing is hit
    depth: np.ndarray  # (H*W,) camera-frame z, inf on a miss
    area: np.ndarray  # (H*W,) surface area seen by each pixel, up to a constant


def render_surface(boxes, pose, camera):
    rays, rays_c = pixel_rays(pose, camera)
    dist, normal = raycast(boxes, pose.center(), rays)
    hit = np.isfinite(dist)
    points = np.where(hit[:, None], pose.center() + dist[:, None] * rays, np.nan)
    cos_axis = 1.0 / np.linalg.norm(rays_c, axis=1)
    depth = np.where(hit, dist * cos_axis, np.inf)
    incidence = np.maximum(np.abs(np.sum(normal * rays, axis=1)), 0.05)
    area = np.where(hit, dist**2 * cos_axis**3 / incidence, 0.0)
    return SurfaceRender(points, depth, area)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SyntheticScene:
    kind: str
    seed: int
    cloud: np.ndarray
    poses: list
    camera: CameraModel
    boxes: list
    _visibility: dict = field(default_factory=dict, repr=False)

    def pixels(self, i):
        """Continuous projections of every point under pose ``i``."""
        return project(self.poses[i].transform(self.cloud), self.camera)[0]

    def visibility(self, i, surface_eps=SURFACE_EPS, kernel=9):
        """Sorted indices of the points the oracle marks visible from pose ``i``."""
        key = (i, surface_eps, kernel)
        if key not in self._visibility:
            self._visibility[key] = oracle_visibility(self.cloud, self.poses[i], self.camera, surface_eps, kernel)
        return self._visibility[key]

    def render(self, pose):
        return render_surface(self.boxes, pose, self.camera)


def default_camera(width=256, height=256, fov_deg=70.0):
    return CameraModel.from_fov(width, height, fov_deg)


def _room(n_points, n_poses, rng, n_clutter=8):
    Lx, Ly, Lz = ROOM_SIZE
    centers, poses = [], []
    for _ in range(n_poses):
        c = np.array([rng.uniform(1.5, Lx - 1.5), rng.uniform(1.5, Ly - 1.5), rng.uniform(1.2, 1.8)])
        yaw, pitch = rng.uniform(-np.pi, np.pi), np.radians(rng.uniform(-20, 5))
        centers.append(c)
        poses.append(look_at(c, yaw, pitch))
    centers = np.array(centers).reshape(-1, 3)
    boxes = [Box((0.0, 0.0, 0.0), (Lx, Ly, Lz), inside=True)]
    for _ in range(50 * n_clutter):
        if len(boxes) > n_clutter:
            break
        size = rng.uniform([0.4, 0.4, 0.4], [1.5, 1.5, 2.0])
        lo = np.r_[rng.uniform(0.2, Lx - size[0] - 0.2), rng.uniform(0.2, Ly - size[1] - 0.2), 0.0]
        hi = lo + size
        gap = np.maximum(np.maximum(lo - centers, centers - hi), 0.0)
        if len(centers) and np.min(np.linalg.norm(gap, axis=1)) < 0.6:
            continue
        boxes.append(Box(tuple(lo), tuple(hi)))
    return boxes, poses


def _road(n_points, n_poses, rng):
    length = POSE_SPACING * max(n_poses - 1, 0)
    poses = [look_at((POSE_SPACING * k, rng.uniform(-0.5, 0.5), 1.7), rng.normal(0, 0.05)) for k in range(n_poses)]
    boxes = [Box((-30.0, -15.0, -0.5), (length + 60.0, 15.0, 0.0))]
    for side in (-1, 1):
        x = -30.0
        while x < length + 60.0:
            w = rng.uniform(6, 15)
            setback = rng.uniform(6, 10)
            h = rng.uniform(6, 15)
            y0, y1 = (setback, setback + 5) if side > 0 else (-setback - 5, -setback)
            boxes.append(Box((x, y0, 0.0), (x + w, y1, h)))
            x += w + rng.uniform(0.5, 3)
    return boxes, poses


def gen_scene(kind, n_points, n_poses, seed=0, camera=None):
    """Deterministic room or road scene; same arguments give bit-equal output."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "room":
        boxes, poses = _room(n_points, n_poses, rng)
    elif kind == "road":
        boxes, poses = _road(n_points, n_poses, rng)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    cloud = sample_surface(boxes, n_points, rng)
    return SyntheticScene(kind, seed, cloud, poses, camera or default_camera(), boxes)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def _zbuffer(pixels, z, valid, camera):
    H, W = camera.height, camera.width
    zb = np.full(H * W, np.inf)
    rows = np.floor(pixels[valid, 1]).astype(np.int64)
    cols = np.floor(pixels[valid, 0]).astype(np.int64)
    np.minimum.at(zb, rows * W + cols, z[valid])
    return zb.reshape(H, W), rows, cols


def visibility_margin(cloud, pose, camera, kernel=9, chunk=2048):
    """Per point, the best over all ``kernel``-windows containing its pixel of
    (window minimum depth - point depth); ``-inf`` when out of frame.

    A window must be centered inside the image and is truncated at the
    borders.  Computed by brute force over explicit neighborhoods.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    px, z, valid = project(pose.transform(cloud), camera)
    margin = np.full(len(cloud), -np.inf)
    if not valid.any():
        return margin
    zb, rows, cols = _zbuffer(px, z, valid, camera)
    s, r = kernel, kernel // 2
    H, W = zb.shape
    pad = np.full((H + 2 * (s - 1), W + 2 * (s - 1)), np.inf)
    pad[s - 1 : s - 1 + H, s - 1 : s - 1 + W] = zb
    offs = np.arange(2 * s - 1)
    centers = np.arange(-r, r + 1)
    idx = np.flatnonzero(valid)
    for k in range(0, len(idx), chunk):
        rr, cc = rows[k : k + chunk], cols[k : k + chunk]
        block = pad[(rr[:, None] + offs)[:, :, None], (cc[:, None] + offs)[:, None, :]]
        wmin = sliding_window_view(block, (s, s), axis=(1, 2)).min(axis=(3, 4))  # (n, s, s)
        inside = ((rr[:, None] + centers >= 0) & (rr[:, None] + centers < H))[:, :, None] & (
            (cc[:, None] + centers >= 0) & (cc[:, None] + centers < W)
        )[:, None, :]
        best = np.where(inside, wmin, -np.inf).max(axis=(1, 2))
        margin[idx[k : k + chunk]] = best - z[idx[k : k + chunk]]
    return margin


def oracle_visibility(cloud, pose, camera, surface_eps=SURFACE_EPS, kernel=9, footprint="window"):
    """Sorted indices of the points a full-resolution z-buffer calls visible.

    ``window``: visible iff some ``kernel``-window containing the point's
    pixel holds nothing nearer than ``depth - surface_eps``.  ``disk``:
    visible iff no point whose ``kernel / 2`` pixel disk covers this pixel is
    nearer than ``depth - surface_eps``.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if footprint == "window":
        return np.flatnonzero(visibility_margin(cloud, pose, camera, kernel) >= -surface_eps)
    if footprint != "disk":
        raise ValueError(f"unknown footprint {footprint!r}")
    px, z, valid = project(pose.transform(cloud), camera)
    if not valid.any():
        return np.zeros(0, dtype=np.int64)
    zb, rows, cols = _zbuffer(px, z, valid, camera)
    H, W = zb.shape
    rad = kernel / 2
    k = int(np.floor(rad))
    dy, dx = np.mgrid[-k : k + 1, -k : k + 1]
    disk = dx**2 + dy**2 <= rad**2
    pad = np.full((H + 2 * k, W + 2 * k), np.inf)
    pad[k : k + H, k : k + W] = zb
    nearest = np.full(len(rows), np.inf)
    for oy, ox in zip(dy[disk], dx[disk]):
        np.minimum(nearest, pad[rows + k + oy, cols + k + ox], out=nearest)
    idx = np.flatnonzero(valid)
    return idx[~(nearest < z[idx] - surface_eps)]


def frustum_oracle(cloud, pose, camera, radius):
    """Exhaustive per-point frustum test, one point at a time."""
    keep = []
    for i, X in enumerate(np.asarray(cloud, dtype=float).reshape(-1, 3)):
        _, z, ok = project(pose.rotation @ X + pose.translation, camera)
        if ok and z <= radius:
            keep.append(i)
    return np.array(keep, dtype=np.int64)


@dataclass
class GroundTruth:
    correspondences: CorrespondenceSet  # visible points, unit weights
    classes: np.ndarray  # (N,) per cloud point, 0 when invisible or out of frame


def gt_correspondences(scene, i, grid=None, pixel_sigma=0.0, seed=0):
    """Visible points of pose ``i`` paired with their projections.

    ``pixel_sigma`` adds Gaussian pixel jitter to the pairs (the class
    labels always use the exact projection).
    """
    grid = grid or PatchGrid(scene.camera.width, scene.camera.height)
    px = scene.pixels(i)
    vis = scene.visibility(i)
    classes = np.zeros(len(scene.cloud), dtype=np.int64)
    if len(vis):
        classes[vis] = patch_of(px[vis], grid)
    x = px[vis]
    if pixel_sigma > 0:
        x = x + np.random.default_rng(seed).normal(0, pixel_sigma, x.shape)
    cs = CorrespondenceSet(vis, scene.cloud[vis], x, np.ones((len(vis), 2)), np.zeros(len(vis)))
    return GroundTruth(cs, classes)


# ---------------------------------------------------------------------------
# scene directories
# ---------------------------------------------------------------------------


def write_scene(scene, directory, gt=True):
    """Cloud (EPPC), poses, intrinsics, box geometry and per-pose gt pairs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_cloud(d / "cloud.eppc", scene.cloud)
    write_poses(d / "poses.txt", scene.poses)
    write_intrinsics(d / "intrinsics.txt", scene.camera)
    lines = [f"# kind={scene.kind} seed={scene.seed}"]
    for b in scene.boxes:
        vals = " ".join(repr(float(v)) for v in (*b.lo, *b.hi))
        lines.append(f"{'inside' if b.inside else 'outside'} {vals}")
    (d / "geometry.txt").write_text("\n".join(lines) + "\n")
    if gt:
        (d / "gt").mkdir(exist_ok=True)
        for i in range(len(scene.poses)):
            save_correspondences(d / "gt" / f"{i:04d}.txt", gt_correspondences(scene, i).correspondences)


def read_scene(directory):
    d = Path(directory)
    text = read_text(d / "geometry.txt").splitlines()
    meta = dict(kv.split("=", 1) for kv in text[0].lstrip("# ").split()) if text and text[0].startswith("#") else {}
    boxes = []
    for line in text:
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7 or parts[0] not in ("inside", "outside"):
            raise DataFormatError(f"{d / 'geometry.txt'}: bad box line {line!r}")
        v = [float(x) for x in parts[1:]]
        boxes.append(Box(tuple(v[:3]), tuple(v[3:]), inside=parts[0] == "inside"))
    cloud = load_cloud(d / "cloud.eppc").astype(float)
    return SyntheticScene(
        meta.get("kind", "room"), int(meta.get("seed", 0)), cloud, read_poses(d / "poses.txt"),
        read_intrinsics(d / "intrinsics.txt"), boxes,
    )


def oracle_image_features(boxes, pose, camera, embedding, grid, radius=None):
    """Oracle query-image features from exact per-pixel surface points.

    The global descriptor weights pixels by the surface area they see and
    ignores surfaces beyond ``radius``, so it summarizes the same surface
    patch as a submap cut from that pose.
    """
    r = render_surface(boxes, pose, camera)
    w = r.area if radius is None else np.where(r.depth <= radius, r.area, 0.0)
    return embedding.image_features(r.points, grid, global_weights=w)
