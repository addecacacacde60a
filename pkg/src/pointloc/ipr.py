"""Depth rasterization and invisible point removal.

A depth map is a plain ``(H, W)`` float array holding, per pixel, the
smallest camera-frame depth among the points that land in it; empty pixels
hold ``+inf``.  Points are removed when they are not the minimum of any
``s x s`` window that contains their pixel, which is exactly the set of
pixels where ``maxpool(minpool(D)) != D``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, TruncatedFile
from .geometry import project


@dataclass(frozen=True)
class IprConfig:
    kernel: int = 9
    depth_tolerance_rel: float = 1e-2
    depth_tolerance_abs: float = 1e-3

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.depth_tolerance_rel < 0 or self.depth_tolerance_abs < 0:
            raise ValueError("depth tolerances must be non-negative")

    def tolerance(self, depth):
        return np.maximum(self.depth_tolerance_abs, self.depth_tolerance_rel * depth)


class Raster(NamedTuple):
    depth: np.ndarray  # (H, W), +inf where empty
    pixel_index: np.ndarray  # (N,) row-major pixel id, -1 when not in frame
    point_depth: np.ndarray  # (N,) camera-frame z of every point


def rasterize_depth(cloud, pose, camera):
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    if len(cloud) == 0:
        return Raster(depth, np.zeros(0, dtype=np.int64), np.zeros(0))
    pixels, z, valid = project(pose.transform(cloud), camera)
    pixel_index = np.full(len(cloud), -1, dtype=np.int64)
    cols = np.floor(pixels[valid, 0]).astype(np.int64)
    rows = np.floor(pixels[valid, 1]).astype(np.int64)
    pixel_index[valid] = rows * W + cols
    np.minimum.at(depth.reshape(-1), pixel_index[valid], z[valid])
    return Raster(depth, pixel_index, z)


def _pool_rows(a, s, op):
    """Sliding ``s``-window reduction down axis 0 with clamp-to-edge padding.

    Van Herk / Gil-Werman: block-wise prefix and suffix scans make the cost
    independent of ``s``.  ``op`` must be np.minimum or np.maximum, so every
    output is a copy of some input entry.
    """
    if s == 1:
        return a.copy()
    r = s // 2
    n = a.shape[0]
    total = -(-(n + 2 * r) // s) * s
    padded = np.concatenate([np.repeat(a[:1], r, 0), a, np.repeat(a[-1:], total - n - r, 0)], 0)
    blocks = padded.reshape(total // s, s, -1)
    prefix = blocks.copy()
    suffix = blocks.copy()
    for k in range(1, s):
        op(prefix[:, k], prefix[:, k - 1], out=prefix[:, k])
        op(suffix[:, s - 1 - k], suffix[:, s - k], out=suffix[:, s - 1 - k])
    prefix = prefix.reshape(padded.shape)
    suffix = suffix.reshape(padded.shape)
    return op(suffix[:n], prefix[s - 1 : s - 1 + n])


def _pool2d(a, s, op):
    rows = _pool_rows(a, s, op)
    return np.ascontiguousarray(_pool_rows(np.ascontiguousarray(rows.T), s, op).T)


def _check_kernel(s):
    if s < 1 or s % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {s}")


def minpool(depth, s):
    """Min over the clamp-to-edge ``s x s`` neighborhood, two 1-D passes."""
    _check_kernel(s)
    depth = np.asarray(depth, dtype=float)
    return _pool2d(depth, s, np.minimum)


def maxpool(depth, s):
    """Max over finite entries of the clamp-to-edge neighborhood.

    ``+inf`` marks an empty pixel and is ignored; a neighborhood with no
    finite entry yields ``+inf``.
    """
    _check_kernel(s)
    depth = np.asarray(depth, dtype=float)
    a = np.where(depth == np.inf, -np.inf, depth)
    out = _pool2d(a, s, np.maximum)
    out[out == -np.inf] = np.inf
    return out


def visibility_mask(depth, s):
    """Pixels where ``maxpool(minpool(D)) == D`` (empty pixels excluded)."""
    opened = maxpool(minpool(depth, s), s)
    return np.isfinite(depth) & (opened == depth)


def ipr(cloud, pose, camera, cfg=None):
    """Indices of the points kept by invisible point removal.

    A point survives when it projects into the frame, its pixel passes the
    pooling test, and its depth is within tolerance of the pixel minimum.
    """
    cfg = cfg or IprConfig()
    raster = rasterize_depth(cloud, pose, camera)
    if len(raster.pixel_index) == 0:
        return np.zeros(0, dtype=np.int64)
    mask = visibility_mask(raster.depth, cfg.kernel).reshape(-1)
    flat = raster.depth.reshape(-1)
    idx = np.flatnonzero(raster.pixel_index >= 0)
    p = raster.pixel_index[idx]
    d = flat[p]
    keep = mask[p] & (raster.point_depth[idx] <= d + cfg.tolerance(d))
    return idx[keep]


# ---------------------------------------------------------------------------
# depth map dump: "EPDM", u32 W, u32 H, float32 row-major, little-endian
# ---------------------------------------------------------------------------

_EPDM = b"EPDM"


def save_depth_map(path, depth):
    depth = np.asarray(depth)
    H, W = depth.shape
    with open(path, "wb") as fh:
        fh.write(_EPDM + struct.pack("<II", W, H))
        fh.write(depth.astype("<f4").tobytes())


def load_depth_map(path):
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise TruncatedFile(f"{path}: header truncated")
    if data[:4] != _EPDM:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    W, H = struct.unpack_from("<II", data, 4)
    need = 12 + 4 * W * H
    if len(data) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, got {len(data)}")
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes")
    return np.frombuffer(data, dtype="<f4", count=W * H, offset=12).reshape(H, W).astype(np.float32)
