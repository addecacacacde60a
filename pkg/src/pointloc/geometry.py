"""Rigid poses, the pinhole camera, projection and pose-error metrics.

Conventions used throughout the package:

* A ``Pose`` maps world coordinates into the camera frame,
  ``X_cam = R @ X_world + t``.
* The camera frame is x right, y down, z forward.
* Pixel ``(u, v)`` with integer part ``(i, j)`` lies in column ``i``, row ``j``;
  integer pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)`` and its center is
  ``(i + 0.5, j + 0.5)``.
* se(3) tangent vectors are ordered ``(v, w)``: translation part first.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


def hat(w):
    """Skew-symmetric matrix such that ``hat(w) @ x == cross(w, x)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(W):
    return np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]]) * 0.5


def exp_so3(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def rotation_angle(R):
    """Rotation angle of ``R`` in radians, stable near 0 and pi."""
    s = np.linalg.norm(vee(R))  # sin(theta)
    c = (np.trace(R) - 1.0) * 0.5  # cos(theta)
    return float(np.arctan2(s, c))


def log_so3(R):
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    if theta < 1e-8:
        return vee(R)
    if np.pi - theta < 1e-6:
        # axis from the symmetric part; sign fixed by the antisymmetric part
        B = (R + np.eye(3)) * 0.5
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        v = vee(R)
        if np.dot(axis, v) < 0:
            axis = -axis
        return axis * theta
    return vee(R) * (theta / np.sin(theta))


def _left_jacobian_so3(w):
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * K @ K


def exp_se3(xi):
    """Map a tangent vector ``(v, w)`` to a ``Pose``."""
    xi = np.asarray(xi, dtype=float)
    v, w = xi[:3], xi[3:]
    return Pose(exp_so3(w), _left_jacobian_so3(w) @ v)


def log_se3(pose):
    w = log_so3(pose.rotation)
    V = _left_jacobian_so3(w)
    return np.concatenate([np.linalg.solve(V, pose.translation), w])


def nearest_rotation(M):
    """Closest rotation matrix to ``M`` in Frobenius norm (polar factor)."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def quaternion_to_rotation(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng):
    """Uniformly distributed rotation (normalized Gaussian quaternion)."""
    return quaternion_to_rotation(rng.standard_normal(4))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform ``X_cam = R X + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def random(cls, rng, translation_scale=1.0):
        return cls(random_rotation(rng), rng.uniform(-1, 1, 3) * translation_scale)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self @ other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def transform(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def orthonormalized(self):
        return Pose(nearest_rotation(self.rotation), self.translation)

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def orthonormality_error(self):
        R = self.rotation
        return float(np.max(np.abs(R.T @ R - np.eye(3))))

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with upper-triangular intrinsics ``K``."""

    intrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=float).reshape(3, 3)
        K.flags.writeable = False
        object.__setattr__(self, "intrinsics", K)
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if np.any(np.tril(K, -1) != 0) or K[2, 2] != 1.0:
            raise ValueError("intrinsics must be upper triangular with K[2,2] == 1")
        if not (0 <= K[0, 2] <= self.width and 0 <= K[1, 2] <= self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width, height, fov_deg=90.0):
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        K = np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])
        return cls(K, width, height)

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]

    def in_frame(self, pixels):
        pixels = np.asarray(pixels, dtype=float)
        u, v = pixels[..., 0], pixels[..., 1]
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def backproject(self, pixels, depth):
        """Camera-frame points at the given depths along pixel rays."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        h = np.column_stack([pixels, np.ones(len(pixels))])
        rays = np.linalg.solve(self.intrinsics, h.T).T
        return rays * np.asarray(depth, dtype=float).reshape(-1, 1)


def transform(pose, points):
    return pose.transform(points)


def project(points, camera):
    """Project camera-frame points.

    Returns ``(pixels, depth, valid)``; ``valid`` is false for points with
    depth <= 0 or whose pixel falls outside ``[0, W) x [0, H)``.
    Accepts a single 3-vector or an ``(N, 3)`` array.
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    P = np.atleast_2d(points)
    K = camera.intrinsics
    z = P[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = P[:, 0] / z
        y = P[:, 1] / z
    u = K[0, 0] * x + K[0, 1] * y + K[0, 2]
    v = K[1, 1] * y + K[1, 2]
    pixels = np.column_stack([u, v])
    valid = (z > 0) & camera.in_frame(pixels)
    if single:
        return pixels[0], float(z[0]), bool(valid[0])
    return pixels, z.copy(), valid


def rte(a, b):
    """Translation error in meters."""
    return float(np.linalg.norm(a.translation - b.translation))


def rre(a, b):
    """Rotation error in degrees.

    Equals ``degrees(arccos((trace(Ra^T Rb) - 1) / 2))`` with the argument
    clamped to [-1, 1], but evaluated through atan2 so that tiny angles keep
    full precision.
    """
    return float(np.degrees(rotation_angle(a.rotation.T @ b.rotation)))


# ---------------------------------------------------------------------------
# text file formats
# ---------------------------------------------------------------------------


def read_text(path):
    """File contents as text; undecodable bytes raise ``DataFormatError``."""
    from .errors import DataFormatError

    try:
        return Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise DataFormatError(f"{path}: not a text file") from None


def format_pose(pose):
    M = np.column_stack([pose.rotation, pose.translation])
    return " ".join(repr(float(x)) for x in M.ravel())


def parse_pose(line):
    from .errors import DataFormatError

    try:
        vals = [float(x) for x in line.split()]
    except ValueError:
        raise DataFormatError(f"unparseable pose line {line!r}") from None
    if len(vals) != 12:
        raise DataFormatError(f"pose line needs 12 floats, got {len(vals)}")
    M = np.array(vals).reshape(3, 4)
    return Pose(M[:, :3], M[:, 3])


def write_poses(path, poses):
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))


def read_poses(path):
    lines = read_text(path).splitlines()
    return [parse_pose(line) for line in lines if line.strip() and not line.startswith("#")]


def write_intrinsics(path, camera):
    K = " ".join(repr(float(x)) for x in camera.intrinsics.ravel())
    Path(path).write_text(f"{K}\n{camera.width} {camera.height}\n")


def read_intrinsics(path, width=None, height=None):
    """Read 9 row-major floats, optionally followed by ``width height``.

    When the size line is absent it must be passed in explicitly.
    """
    from .errors import DataFormatError

    tokens = read_text(path).split()
    if len(tokens) < 9:
        raise DataFormatError("intrinsics file needs 9 floats")
    try:
        K = np.array([float(x) for x in tokens[:9]]).reshape(3, 3)
        if len(tokens) >= 11:
            width, height = int(tokens[9]), int(tokens[10])
    except ValueError:
        raise DataFormatError(f"{path}: unparseable intrinsics") from None
    if width is None or height is None:
        raise DataFormatError("image size missing from intrinsics file")
    try:
        return CameraModel(K, width, height)
    except ValueError as err:
        raise DataFormatError(f"{path}: {err}") from None
