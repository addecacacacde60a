"""Patch grids, positional encoding, the pixel MLP and descriptor plumbing.

Descriptors cross module boundaries as float32 arrays so that values read
back from disk are bit-identical to the ones produced in memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionChainBroken, DimensionMismatch, FormatError, OutOfFrame, TruncatedFile

PATCH_DIM = 128
GLOBAL_DIM = 256
DEFAULT_FREQUENCIES = 6


@dataclass(frozen=True)
class PatchGrid:
    image_w: int
    image_h: int
    g: int = 16

    def __post_init__(self):
        if self.g <= 0 or self.image_w % self.g or self.image_h % self.g:
            raise ValueError(f"patch size {self.g} must divide {self.image_w}x{self.image_h}")

    @property
    def cols(self):
        return self.image_w // self.g

    @property
    def rows(self):
        return self.image_h // self.g

    @property
    def n_patches(self):
        return self.cols * self.rows

    @property
    def n_classes(self):
        return self.n_patches + 1

    def patch_origin(self, cls):
        """Top-left pixel corner of patch class ``cls`` (>= 1)."""
        k = np.asarray(cls) - 1
        return np.stack([(k % self.cols) * self.g, (k // self.cols) * self.g], axis=-1).astype(float)

    def pixel_centers(self, cls):
        """Row-major ``(g*g, 2)`` pixel centers of one patch."""
        x0, y0 = self.patch_origin(cls)
        j, i = np.meshgrid(np.arange(self.g), np.arange(self.g))
        return np.column_stack([x0 + j.ravel() + 0.5, y0 + i.ravel() + 0.5])

    def pixel_ids(self, cls):
        """Row-major image pixel ids covered by one patch."""
        x0, y0 = (int(v) for v in self.patch_origin(cls))
        j, i = np.meshgrid(np.arange(self.g), np.arange(self.g))
        return ((y0 + i.ravel()) * self.image_w + x0 + j.ravel()).astype(np.int64)


def patch_of(pixel, grid):
    """Class id of a pixel: 0 outside the frame, else 1 + row-major patch index."""
    p = np.asarray(pixel, dtype=float)
    u, v = p[..., 0], p[..., 1]
    inside = (u >= 0) & (u < grid.image_w) & (v >= 0) & (v < grid.image_h)
    with np.errstate(invalid="ignore"):
        col = np.floor(np.where(inside, u, 0) / grid.g).astype(np.int64)
        row = np.floor(np.where(inside, v, 0) / grid.g).astype(np.int64)
    cls = np.where(inside, 1 + row * grid.cols + col, 0)
    return int(cls) if cls.ndim == 0 else cls


def patch_local(pixel, grid):
    """Pixel position inside its patch, mapped to [-1, 1] per axis."""
    p = np.asarray(pixel, dtype=float)
    cls = np.atleast_1d(patch_of(p, grid))
    if np.any(cls == 0):
        raise OutOfFrame("pixel outside the image")
    local = p - grid.patch_origin(cls).reshape(p.shape)
    return 2.0 * local / grid.g - 1.0


def patch_to_pixel(cls, r, grid):
    """Inverse of ``(patch_of, patch_local)``."""
    return grid.patch_origin(cls) + (np.asarray(r, dtype=float) + 1.0) * grid.g / 2.0


def positional_encoding(p, L=DEFAULT_FREQUENCIES):
    """``[sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``.

    ``p`` is ``(d,)`` or ``(N, d)``; the output has ``2 * L * d`` columns.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    p = np.asarray(p, dtype=float)
    scaled = p[..., None, :] * (np.pi * 2.0 ** np.arange(L))[:, None]  # (..., L, d)
    blocks = np.stack([np.sin(scaled), np.cos(scaled)], axis=-2)  # (..., L, 2, d)
    return blocks.reshape(*p.shape[:-1], 2 * L * p.shape[-1])


# ---------------------------------------------------------------------------
# MLP weights
# ---------------------------------------------------------------------------

IDENTITY, RELU, TANH, SQUARE = 0, 1, 2, 3
_ACTIVATIONS = {
    IDENTITY: lambda x: x,
    RELU: lambda x: np.maximum(x, 0.0),
    TANH: np.tanh,
    SQUARE: np.square,
}
_NULL_BIAS_TAG = 255


@dataclass(eq=False)
class MlpWeights:
    """Layers of ``(W, b, activation)`` with ``y = act(W @ x + b)``."""

    layers: list

    def __post_init__(self):
        fixed = []
        for W, b, act in self.layers:
            W = np.asarray(W, dtype=np.float32)
            b = np.asarray(b, dtype=np.float32).reshape(-1)
            if W.ndim != 2 or b.shape[0] != W.shape[0]:
                raise DimensionChainBroken("bias length must equal weight rows")
            if int(act) not in _ACTIVATIONS:
                raise FormatError(f"unknown activation tag {act}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("weights must be finite")
            fixed.append((W, b, int(act)))
        for (W0, _, _), (W1, _, _) in zip(fixed, fixed[1:]):
            if W1.shape[1] != W0.shape[0]:
                raise DimensionChainBroken(f"layer expects {W1.shape[1]} inputs, previous gives {W0.shape[0]}")
        self.layers = fixed

    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"MLP expects {self.in_dim} inputs, got {x.shape[-1]}")
        for W, b, act in self.layers:
            x = _ACTIVATIONS[act](x @ W.T.astype(float) + b.astype(float))
        return x

    def equals(self, other):
        return len(self.layers) == len(other.layers) and all(
            a[2] == b[2] and a[0].tobytes() == b[0].tobytes() and a[0].shape == b[0].shape
            and a[1].tobytes() == b[1].tobytes()
            for a, b in zip(self.layers, other.layers)
        )

    @classmethod
    def random(cls, dims, rng, activation=RELU, scale=None):
        layers = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            s = scale if scale is not None else 1.0 / np.sqrt(n_in)
            act = activation if i < len(dims) - 2 else IDENTITY
            layers.append((rng.standard_normal((n_out, n_in)) * s, rng.standard_normal(n_out) * 0.1, act))
        return cls(layers)


def pixel_mlp_input_dim(L=DEFAULT_FREQUENCIES, feature_dim=PATCH_DIM):
    return feature_dim + 2 * L * 2


def pixel_feature(patch_feature, pixel, grid, weights, L=DEFAULT_FREQUENCIES):
    """Pixel descriptor(s) from a patch descriptor and the encoded in-patch position.

    ``pixel`` may be a single 2-vector or ``(N, 2)``; the raw MLP output is
    returned (no normalization).
    """
    f = np.asarray(patch_feature, dtype=float).reshape(-1)
    if weights.in_dim != f.shape[0] + 4 * L:
        raise DimensionMismatch(f"weights take {weights.in_dim} inputs, expected {f.shape[0] + 4 * L}")
    pixel = np.asarray(pixel, dtype=float)
    pe = positional_encoding(patch_local(np.atleast_2d(pixel), grid), L)
    x = np.concatenate([np.broadcast_to(f, (len(pe), len(f))), pe], axis=1)
    out = weights(x)
    return out[0] if pixel.ndim == 1 else out


def l2_normalize(x, axis=-1):
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


# ---------------------------------------------------------------------------
# patch classifier: shared pairwise MLP on concat(point, patch) -> logit,
# plus a null-class logit
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PatchClassifier:
    mlp: MlpWeights
    null_bias: float
    chunk: int = 256

    def __post_init__(self):
        if self.mlp.out_dim != 1:
            raise DimensionMismatch("classifier MLP must output one logit")
        self.null_bias = float(np.float32(self.null_bias))

    @property
    def point_dim(self):
        return self.mlp.in_dim // 2

    def logits(self, point_descs, patch_descs):
        """``(N, P + 1)`` logits; column 0 is the null class."""
        A = np.asarray(point_descs, dtype=float)
        B = np.asarray(patch_descs, dtype=float)
        if A.shape[1] + B.shape[1] != self.mlp.in_dim:
            raise DimensionMismatch(f"descriptors give {A.shape[1] + B.shape[1]} inputs, MLP takes {self.mlp.in_dim}")
        W1, b1, act1 = self.mlp.layers[0]
        W1, b1 = W1.astype(float), b1.astype(float)
        Wp, Wv = W1[:, : A.shape[1]], W1[:, A.shape[1] :]  # point and patch halves
        rest = self.mlp.layers[1:]
        out = np.empty((len(A), len(B) + 1))
        out[:, 0] = self.null_bias
        if act1 == SQUARE and len(rest) == 1 and rest[0][2] == IDENTITY:
            # sum_h w_h (u_h + v_h)^2 with u = Wp a + b1, v = Wv b expands into
            # a quadratic form in a, a bilinear cross term and a per-patch term
            w = rest[0][0].astype(float)[0]
            b2 = float(rest[0][1][0])
            Pa = Wp.T @ (w[:, None] * Wp)
            qa = Wp.T @ (w * b1)
            point_term = np.einsum("ij,ij->i", A @ Pa, A) + 2.0 * A @ qa + w @ (b1 * b1)
            V = B @ Wv.T
            G = 2.0 * (V * w) @ Wp  # (P, D): cross term is A @ G.T
            patch_term = (V * V) @ w + 2.0 * (V * w) @ b1
            out[:, 1:] = A @ G.T + (point_term[:, None] + (patch_term + b2)[None, :])
            return out
        U = A @ Wp.T + b1
        V = B @ Wv.T
        for s in range(0, len(A), self.chunk):
            h = _ACTIVATIONS[act1](U[s : s + self.chunk, None, :] + V[None, :, :])
            for W, b, act in rest:
                h = _ACTIVATIONS[act](h @ W.T.astype(float) + b.astype(float))
            out[s : s + self.chunk, 1:] = h[..., 0]
        return out

    def logits_naive(self, point_descs, patch_descs):
        """Pairwise forward pass without the algebraic shortcut (for checks)."""
        A = np.asarray(point_descs, dtype=float)
        B = np.asarray(patch_descs, dtype=float)
        out = np.empty((len(A), len(B) + 1))
        out[:, 0] = self.null_bias
        for i, a in enumerate(A):
            x = np.concatenate([np.broadcast_to(a, B.shape), B], axis=1)
            out[i, 1:] = self.mlp(x)[:, 0]
        return out


def similarity_classifier(dim=PATCH_DIM, sharpness=1e4, threshold=0.99):
    """Classifier whose patch logit is ``sharpness * <point, patch>``.

    Built from a square-activation hidden layer using
    ``4 a.b = |a + b|^2 - |a - b|^2``.  The null logit is
    ``sharpness * threshold``, so a point whose best cosine similarity falls
    below ``threshold`` goes to class 0.
    """
    eye = np.eye(dim)
    W1 = np.block([[eye, eye], [eye, -eye]])
    w2 = np.concatenate([np.full(dim, sharpness / 4), np.full(dim, -sharpness / 4)])
    mlp = MlpWeights([(W1, np.zeros(2 * dim), SQUARE), (w2[None, :], np.zeros(1), IDENTITY)])
    return PatchClassifier(mlp, sharpness * threshold)


# ---------------------------------------------------------------------------
# EPMW weight files: "EPMW", u32 version, u32 layer_count, per layer
# (u32 rows, u32 cols, u32 activation_tag, f32 weights row-major, f32 biases)
# ---------------------------------------------------------------------------

_EPMW = b"EPMW"
WEIGHTS_VERSION = 1


def _write_layers(fh, layers):
    fh.write(_EPMW + struct.pack("<II", WEIGHTS_VERSION, len(layers)))
    for W, b, act in layers:
        fh.write(struct.pack("<III", W.shape[0], W.shape[1], act))
        fh.write(W.astype("<f4").tobytes())
        fh.write(b.astype("<f4").tobytes())


def _read_layers(path):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFile(f"{path}: header truncated")
    if data[:4] != _EPMW:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedFile(f"{path}: header truncated")
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    off = 12
    layers = []
    for _ in range(count):
        if len(data) < off + 12:
            raise TruncatedFile(f"{path}: layer header truncated")
        rows, cols, act = struct.unpack_from("<III", data, off)
        off += 12
        n = rows * cols
        if len(data) < off + 4 * (n + rows):
            raise TruncatedFile(f"{path}: layer payload truncated")
        W = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(rows, cols).astype(np.float32)
        off += 4 * n
        b = np.frombuffer(data, dtype="<f4", count=rows, offset=off).astype(np.float32)
        off += 4 * rows
        layers.append((W, b, act))
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return layers


def save_weights(path, weights):
    with open(path, "wb") as fh:
        _write_layers(fh, weights.layers)


def load_weights(path):
    layers = _read_layers(path)
    if not layers:
        raise FormatError(f"{path}: no layers")
    if any(act == _NULL_BIAS_TAG for _, _, act in layers):
        raise FormatError(f"{path}: classifier file, use load_classifier")
    return MlpWeights(layers)


def save_classifier(path, clf):
    """Classifier MLP followed by a 1x0 pseudo-layer holding the null bias."""
    null = (np.zeros((1, 0), dtype=np.float32), np.array([clf.null_bias], dtype=np.float32), _NULL_BIAS_TAG)
    with open(path, "wb") as fh:
        _write_layers(fh, list(clf.mlp.layers) + [null])


def load_classifier(path):
    layers = _read_layers(path)
    if len(layers) < 2 or layers[-1][2] != _NULL_BIAS_TAG or layers[-1][0].shape != (1, 0):
        raise FormatError(f"{path}: missing null-class bias layer")
    return PatchClassifier(MlpWeights(layers[:-1]), float(layers[-1][1][0]))


# ---------------------------------------------------------------------------
# EPDS descriptor cache: "EPDS", u32 dim, u64 count, f32 payload
# ---------------------------------------------------------------------------

_EPDS = b"EPDS"


def save_descriptors(path, descriptors):
    d = np.asarray(descriptors)
    if d.ndim == 1:
        d = d[None, :]
    with open(path, "wb") as fh:
        fh.write(_EPDS + struct.pack("<IQ", d.shape[1], d.shape[0]))
        fh.write(d.astype("<f4").tobytes())


def load_descriptors(path):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFile(f"{path}: header truncated")
    if data[:4] != _EPDS:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise TruncatedFile(f"{path}: header truncated")
    dim, count = struct.unpack_from("<IQ", data, 4)
    need = 16 + 4 * dim * count
    if len(data) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, got {len(data)}")
    if len(data) > need:
        raise FormatError(f"{path}: trailing bytes")
    return np.frombuffer(data, dtype="<f4", count=dim * count, offset=16).reshape(count, dim).astype(np.float32)


# ---------------------------------------------------------------------------
# image-side descriptor providers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ImageFeatures:
    """Everything the matcher needs from one query image.

    Pixel features come either from a dense ``(H*W, D)`` cache or from the
    pixel MLP applied to the patch descriptors.
    """

    grid: PatchGrid
    patch_descriptors: np.ndarray
    global_descriptor: np.ndarray
    pixel_cache: np.ndarray | None = None
    pixel_mlp: MlpWeights | None = None
    frequencies: int = DEFAULT_FREQUENCIES

    def __post_init__(self):
        self.patch_descriptors = np.asarray(self.patch_descriptors, dtype=np.float32)
        self.global_descriptor = np.asarray(self.global_descriptor, dtype=np.float32).reshape(-1)
        if len(self.patch_descriptors) != self.grid.n_patches:
            raise DimensionMismatch(f"{len(self.patch_descriptors)} patch descriptors for {self.grid.n_patches} patches")
        if self.pixel_cache is None and self.pixel_mlp is None:
            raise ValueError("need a pixel cache or a pixel MLP")
        if self.pixel_cache is not None:
            self.pixel_cache = np.asarray(self.pixel_cache, dtype=np.float32)
            if len(self.pixel_cache) != self.grid.image_w * self.grid.image_h:
                raise DimensionMismatch("pixel cache must hold one row per image pixel")

    def pixel_features(self, cls):
        """``(g*g, D)`` features of the pixel centers of patch ``cls``, row-major."""
        if self.pixel_cache is not None:
            return self.pixel_cache[self.grid.pixel_ids(cls)]
        feats = pixel_feature(
            self.patch_descriptors[cls - 1], self.grid.pixel_centers(cls), self.grid, self.pixel_mlp, self.frequencies
        )
        return l2_normalize(feats).astype(np.float32)


class OracleEmbedding:
    """Seeded geometric descriptors for synthetic scenes.

    Local descriptors embed a 3D position through a random isometry of
    ``(X / scale, 1)`` followed by normalization, so a 3D point and the
    surface seen at its true pixel share a descriptor.  Global descriptors
    embed the centroid and per-axis spread of a point set the same way.
    """

    def __init__(self, seed=0, center=(0.0, 0.0, 0.0), scale=50.0, global_scale=5.0,
                 dim=PATCH_DIM, global_dim=GLOBAL_DIM):
        rng = np.random.default_rng(seed)
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.global_scale = float(global_scale)
        self.Q = np.linalg.qr(rng.standard_normal((dim, 4)))[0]
        self.Qg = np.linalg.qr(rng.standard_normal((global_dim, 7)))[0]

    def local(self, points):
        X = (np.asarray(points, dtype=float).reshape(-1, 3) - self.center) / self.scale
        h = np.column_stack([X, np.ones(len(X))])
        return l2_normalize(h @ self.Q.T).astype(np.float32)

    def global_(self, points, weights=None):
        """Global descriptor of a point set, optionally weighting each point."""
        X = np.asarray(points, dtype=float).reshape(-1, 3)
        w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        w = w / w.sum()
        mean = w @ X
        c = (mean - self.center) / self.global_scale
        spread = np.sqrt(w @ (X - mean) ** 2) / self.global_scale
        return l2_normalize(np.concatenate([c, spread, [1.0]]) @ self.Qg.T).astype(np.float32)

    def classifier(self, null_distance=0.3, sharpness=1e6):
        """Similarity classifier whose null class wins beyond ``null_distance`` meters.

        Near the center ``cos(f(X), f(Y)) ~ 1 - |X - Y|^2 / (2 scale^2)``.
        """
        return similarity_classifier(self.Q.shape[0], sharpness, 1.0 - 0.5 * (null_distance / self.scale) ** 2)

    def image_features(self, surface_points, grid, global_weights=None):
        """Features of an image whose pixel centers see ``surface_points``.

        ``surface_points`` is ``(H*W, 3)`` in row-major pixel order, with NaN
        rows for pixels that see nothing (those rows and all-empty patches
        get a far-away position).  ``global_weights`` (one per pixel) lets
        the global descriptor weight pixels by the surface area they cover.
        """
        S = np.asarray(surface_points, dtype=float).reshape(-1, 3)
        hit = np.all(np.isfinite(S), axis=1)
        far = self.center + np.array([0.0, 0.0, 1e3 * self.scale])
        pixel = self.local(np.where(hit[:, None], S, far))
        pid = np.stack([grid.pixel_ids(c) for c in range(1, grid.n_patches + 1)])
        patch = l2_normalize(pixel[pid].astype(float).mean(axis=1)).astype(np.float32)
        w = np.ones(len(S)) if global_weights is None else np.asarray(global_weights, dtype=float).reshape(-1)
        use = hit & (w > 0)
        g = self.global_(S[use], w[use]) if use.any() else self.global_(far[None])
        return ImageFeatures(grid, patch, g, pixel_cache=pixel)
