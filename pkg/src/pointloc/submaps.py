"""Frustum submaps, downsampling, the global-descriptor index and retrieval."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, EmptySubmap, FormatError, KTooLarge, TruncatedFile
from .geometry import Pose, project

DEFAULT_M = 65_536
INDOOR_RADIUS = 10.0
OUTDOOR_RADIUS = 30.0


@dataclass(eq=False)
class Submap:
    id: int
    points: np.ndarray
    origin_pose: Pose
    global_descriptor: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.global_descriptor is not None:
            g = np.asarray(self.global_descriptor, dtype=float)
            if not np.isclose(np.linalg.norm(g), 1.0, atol=1e-6):
                raise ValueError("global descriptor must be unit norm")
            self.global_descriptor = g


@dataclass(eq=False)
class SubmapIndex:
    ids: np.ndarray
    descriptors: np.ndarray
    m: int = DEFAULT_M
    radius: float = INDOOR_RADIUS
    tag: str = ""
    version: int = field(default=1, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2 or len(self.descriptors) != len(self.ids):
            raise ValueError("need one descriptor row per id")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("submap ids must be unique")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.descriptors.shape[1]

    @classmethod
    def from_submaps(cls, submaps, **meta):
        ids = [s.id for s in submaps]
        desc = np.stack([s.global_descriptor for s in submaps]) if submaps else np.zeros((0, 256))
        return cls(ids, desc, **meta)

    def equals(self, other):
        return (
            np.array_equal(self.ids, other.ids)
            and self.descriptors.tobytes() == other.descriptors.tobytes()
            and self.descriptors.shape == other.descriptors.shape
            and (self.m, self.radius, self.tag) == (other.m, other.radius, other.tag)
        )


def cut_submap(global_cloud, pose, camera, radius=INDOOR_RADIUS, return_indices=False):
    """Points inside the camera frustum with depth in ``(0, radius]``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    cloud = np.asarray(global_cloud, dtype=float).reshape(-1, 3)
    _, z, valid = project(pose.transform(cloud), camera)
    idx = np.flatnonzero(valid & (z <= radius))
    if len(idx) == 0:
        raise EmptySubmap("no point inside the frustum")
    if return_indices:
        return idx
    return cloud[idx]


def downsample(cloud, m, seed=0, mode="uniform", voxel_size=None, return_indices=False):
    """Reduce ``cloud`` to at most ``m`` points.

    ``uniform`` draws without replacement (indices kept in input order);
    ``voxel`` keeps the first point per voxel, then samples uniformly if still
    above ``m``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    n = len(cloud)
    idx = np.arange(n)
    if mode == "voxel":
        if voxel_size is None or voxel_size <= 0:
            raise ValueError("voxel mode needs a positive voxel_size")
        keys = np.floor(cloud / voxel_size).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        idx = np.sort(first)
    elif mode != "uniform":
        raise ValueError(f"unknown downsampling mode {mode!r}")
    if len(idx) > m:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(idx, size=m, replace=False))
    return idx if return_indices else cloud[idx]


def retrieve_topk(index, query_descriptor, k=4, return_distances=False):
    """Ids of the ``k`` nearest descriptors, ascending distance, ties by id."""
    q = np.asarray(query_descriptor, dtype=float).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    if k > len(index):
        raise KTooLarge(f"k={k} exceeds index size {len(index)}")
    diff = index.descriptors.astype(float) - q
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((index.ids, dist))[:k]
    ids = [int(i) for i in index.ids[order]]
    if return_distances:
        return ids, dist[order]
    return ids


# ---------------------------------------------------------------------------
# point-cloud file: "EPPC", u32 count, float32 xyz (little-endian), or text
# ---------------------------------------------------------------------------

_EPPC = b"EPPC"


def save_cloud(path, cloud):
    cloud = np.asarray(cloud).reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(_EPPC + struct.pack("<I", len(cloud)))
        fh.write(cloud.astype("<f4").tobytes())


def load_cloud(path):
    """Read an EPPC file, or whitespace-separated ``x y z`` text."""
    data = Path(path).read_bytes()
    if len(data) < 4 and _EPPC.startswith(data):
        raise TruncatedFile(f"{path}: header truncated")
    if data[:4] != _EPPC:
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: bad magic {data[:4]!r}") from None
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if any(len(r) != 3 for r in rows):
            raise FormatError(f"{path}: text clouds need 3 columns per line")
        try:
            return np.array(rows, dtype=float).reshape(-1, 3)
        except ValueError:
            raise FormatError(f"{path}: unparseable text cloud") from None
    if len(data) < 8:
        raise TruncatedFile(f"{path}: header truncated")
    (count,) = struct.unpack_from("<I", data, 4)
    need = 8 + 12 * count
    if len(data) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, got {len(data)}")
    if len(data) > need:
        raise FormatError(f"{path}: trailing bytes")
    return np.frombuffer(data, dtype="<f4", count=3 * count, offset=8).reshape(count, 3).astype(np.float32)


# ---------------------------------------------------------------------------
# index file: "EPIX", u32 version, u32 dim, u32 count, (u64 id, f32 x dim)*,
# then a metadata trailer: "META", u32 m, f64 radius, u32 len, utf-8 tag
# ---------------------------------------------------------------------------

_EPIX = b"EPIX"
_META = b"META"
INDEX_VERSION = 1


def save_index(path, index):
    rec = np.zeros(len(index), dtype=[("id", "<u8"), ("d", "<f4", (index.dim,))])
    rec["id"] = index.ids
    rec["d"] = index.descriptors
    tag = index.tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_EPIX + struct.pack("<III", INDEX_VERSION, index.dim, len(index)))
        fh.write(rec.tobytes())
        fh.write(_META + struct.pack("<IdI", index.m, index.radius, len(tag)) + tag)


def load_index(path):
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != _EPIX:
        if len(data) < 4:
            raise TruncatedFile(f"{path}: header truncated")
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise TruncatedFile(f"{path}: header truncated")
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    dtype = np.dtype([("id", "<u8"), ("d", "<f4", (dim,))])
    end = 16 + dtype.itemsize * count
    if len(data) < end + 20:
        raise TruncatedFile(f"{path}: expected at least {end + 20} bytes, got {len(data)}")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=16)
    if data[end : end + 4] != _META:
        raise FormatError(f"{path}: missing metadata trailer")
    m, radius, tag_len = struct.unpack_from("<IdI", data, end + 4)
    tag_end = end + 20 + tag_len
    if len(data) < tag_end:
        raise TruncatedFile(f"{path}: metadata tag truncated")
    if len(data) > tag_end:
        raise FormatError(f"{path}: trailing bytes")
    try:
        tag = data[end + 20 : tag_end].decode("utf-8")
    except UnicodeDecodeError:
        raise DataFormatError(f"{path}: tag is not utf-8") from None
    return SubmapIndex(rec["id"].copy(), rec["d"].reshape(count, dim).copy(), m=m, radius=radius, tag=tag)
