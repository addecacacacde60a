"""Pose from weighted 2D-3D correspondences.

The objective is ``0.5 * sum_i |w_i * (pi(R X_i + t) - x_i)|^2`` with
element-wise 2-vector weights.  Poses are perturbed on the left,
``T <- exp(xi) T`` with ``xi = (v, w)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from .errors import (
    DegenerateConfiguration,
    DegenerateDepth,
    NoConsensus,
    ProposalFallbackWarning,
)
from .geometry import Pose, exp_se3, hat, project

DEPTH_EPS = 1e-6


@dataclass(eq=False)
class PnPProblem:
    points: np.ndarray  # (N, 3)
    pixels: np.ndarray  # (N, 2)
    weights: np.ndarray  # (N, 2)
    camera: object

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(n, 2)
        if self.weights is None:
            self.weights = np.ones((n, 2))
        self.weights = np.asarray(self.weights, dtype=float).reshape(n, 2)

    @classmethod
    def from_correspondences(cls, cs, camera):
        return cls(cs.X, cs.x, cs.weights, camera)

    def __len__(self):
        return len(self.points)

    def subset(self, mask):
        return PnPProblem(self.points[mask], self.pixels[mask], self.weights[mask], self.camera)

    def with_weights(self, weights):
        return PnPProblem(self.points, self.pixels, weights, self.camera)


@dataclass
class ResidualBlock:
    f: np.ndarray  # (2,) weighted reprojection error in pixels
    jacobian: np.ndarray  # (2, 6)


def _projection_jacobian(Xc, K):
    """d pi / d X_cam, shape (N, 2, 3)."""
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = K[0, 0] * iz
    J[:, 0, 1] = K[0, 1] * iz
    J[:, 0, 2] = -(K[0, 0] * x + K[0, 1] * y) * iz * iz
    J[:, 1, 1] = K[1, 1] * iz
    J[:, 1, 2] = -K[1, 1] * y * iz * iz
    return J


def residuals(problem, pose, jacobian=True):
    """Weighted residuals ``(N, 2)`` and, optionally, Jacobians ``(N, 2, 6)``."""
    Xc = pose.transform(problem.points)
    if np.any(Xc[:, 2] <= DEPTH_EPS):
        raise DegenerateDepth("a point is at or behind the camera")
    px, _, _ = project(Xc, problem.camera)
    w = problem.weights
    f = w * (px - problem.pixels)
    if not jacobian:
        return f, None
    dpi = _projection_jacobian(Xc, problem.camera.intrinsics)
    dX = np.zeros((len(Xc), 3, 6))
    dX[:, :, :3] = np.eye(3)
    dX[:, 0, 4], dX[:, 0, 5] = Xc[:, 2], -Xc[:, 1]
    dX[:, 1, 3], dX[:, 1, 5] = -Xc[:, 2], Xc[:, 0]
    dX[:, 2, 3], dX[:, 2, 4] = Xc[:, 1], -Xc[:, 0]
    J = w[:, :, None] * (dpi @ dX)
    return f, J


def residual(point, pixel, weight, pose, camera):
    """Single-pair residual block; raises ``DegenerateDepth`` when z <= eps."""
    prob = PnPProblem(np.atleast_2d(point), np.atleast_2d(pixel), np.atleast_2d(weight), camera)
    f, J = residuals(prob, pose)
    return ResidualBlock(f[0], J[0])


def cost(problem, pose):
    f, _ = residuals(_active(problem), pose, jacobian=False)
    return 0.5 * float(np.sum(f * f))


def reprojection_errors(problem, pose):
    """Unweighted pixel error per pair; ``inf`` for points behind the camera."""
    Xc = pose.transform(problem.points)
    px, z, _ = project(Xc, problem.camera)
    err = np.linalg.norm(px - problem.pixels, axis=1)
    err[z <= DEPTH_EPS] = np.inf
    return err


def _active(problem):
    """Drop pairs whose weights are both zero; they cannot affect anything."""
    keep = np.any(problem.weights != 0, axis=1)
    return problem if keep.all() else problem.subset(keep)


# ---------------------------------------------------------------------------
# EPnP
# ---------------------------------------------------------------------------


def _kabsch(A, B):
    """Rigid ``(R, t)`` minimizing ``sum |R A_i + t - B_i|^2``."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, cb - R @ ca


def _normalized_coords(pixels, camera):
    h = np.column_stack([pixels, np.ones(len(pixels))])
    return np.linalg.solve(camera.intrinsics, h.T).T[:, :2]


def _betas_gauss_newton(V, pairs, d2, beta, iters=10):
    """Refine null-space coefficients against the control-point distances."""
    nc3 = V.shape[0]
    Vc = V.reshape(nc3 // 3, 3, -1)  # (nc, 3, N)
    diffs = np.stack([Vc[i] - Vc[j] for i, j in pairs])  # (P, 3, N)
    for _ in range(iters):
        dv = diffs @ beta  # (P, 3)
        r = np.einsum("pk,pk->p", dv, dv) - d2
        J = 2.0 * np.einsum("pk,pkn->pn", dv, diffs)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        beta = beta + step
        if np.linalg.norm(step) < 1e-14 * (1 + np.linalg.norm(beta)):
            break
    return beta


def solve_epnp(problem):
    """Closed-form PnP from four (or, for planar scenes, three) control points.

    Weights are ignored.  Raises ``DegenerateConfiguration`` for fewer than
    four pairs or collinear points.
    """
    X = problem.points
    n = len(X)
    if n < 4:
        raise DegenerateConfiguration(f"EPnP needs at least 4 pairs, got {n}")
    m = _normalized_coords(problem.pixels, problem.camera)

    c0 = X.mean(axis=0)
    A = X - c0
    lam, vec = np.linalg.eigh(A.T @ A / n)
    lam, vec = lam[::-1], vec[:, ::-1]
    if lam[0] <= 0 or lam[1] <= 1e-10 * lam[0]:
        raise DegenerateConfiguration("points are collinear")
    planar = lam[2] <= 1e-10 * lam[0]
    nc = 3 if planar else 4
    axes = (np.sqrt(lam[: nc - 1]) * vec[:, : nc - 1]).T  # rows: c_j - c0
    ctrl = np.vstack([c0, c0 + axes])
    alpha_rest = np.linalg.lstsq(axes.T, A.T, rcond=None)[0].T  # (n, nc-1)
    alphas = np.column_stack([1.0 - alpha_rest.sum(axis=1), alpha_rest])

    M = np.zeros((2 * n, 3 * nc))
    M[0::2, 0::3] = alphas
    M[0::2, 2::3] = -alphas * m[:, :1]
    M[1::2, 1::3] = alphas
    M[1::2, 2::3] = -alphas * m[:, 1:]
    _, evecs = np.linalg.eigh(M.T @ M)
    V = evecs[:, :nc]  # smallest eigenvalues first

    pairs = [(i, j) for i in range(nc) for j in range(i + 1, nc)]
    d2 = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in pairs])
    Vc = V.reshape(nc, 3, nc)

    def dots(a, b):
        return np.array([np.dot(Vc[i, :, a] - Vc[j, :, a], Vc[i, :, b] - Vc[j, :, b]) for i, j in pairs])

    inits = []
    # N = 1
    dd = dots(0, 0)
    b1 = np.sqrt(max(np.dot(dd, d2) / np.dot(dd, dd), 0.0))
    inits.append(np.r_[b1, np.zeros(nc - 1)])
    # N = 2 and N = 3 through the linearized products beta_a * beta_b
    for N in (2, 3):
        if N == 3 and planar:
            break
        terms = [(a, b) for a in range(N) for b in range(a, N)]
        L = np.column_stack([dots(a, b) * (1 if a == b else 2) for a, b in terms])
        prod, *_ = np.linalg.lstsq(L, d2, rcond=None)
        bb = dict(zip(terms, prod))
        beta = np.zeros(nc)
        beta[0] = np.sqrt(abs(bb[(0, 0)]))
        for k in range(1, N):
            beta[k] = np.sqrt(abs(bb[(k, k)])) * (np.sign(bb[(0, k)]) or 1.0)
        inits.append(beta)

    best = None
    for beta in inits:
        beta = _betas_gauss_newton(V, pairs, d2, beta)
        ctrl_cam = (V @ beta).reshape(nc, 3)
        Xc = alphas @ ctrl_cam
        if np.mean(Xc[:, 2]) < 0:
            Xc = -Xc
        R, t = _kabsch(X, Xc)
        pose = Pose(R, t)
        err = np.mean(reprojection_errors(problem, pose))
        if best is None or err < best[0]:
            best = (err, pose)
    return best[1].orthonormalized()


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


def _polymul(p, q):
    """Product of batched ascending-coefficient polynomials."""
    out = np.zeros((p.shape[0], p.shape[1] + q.shape[1] - 1))
    for i in range(p.shape[1]):
        out[:, i : i + q.shape[1]] += p[:, i : i + 1] * q
    return out


def _polyadd(*ps):
    n = max(p.shape[1] for p in ps)
    out = np.zeros((ps[0].shape[0], n))
    for p in ps:
        out[:, : p.shape[1]] += p
    return out


def _polyval(c, x):
    out = np.zeros_like(x)
    for k in range(c.shape[1] - 1, -1, -1):
        out = out * x + c[:, k : k + 1]
    return out


def _kabsch_batch(A, B):
    ca, cb = A.mean(axis=1), B.mean(axis=1)
    H = np.einsum("nki,nkj->nij", A - ca[:, None], B - cb[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1))))
    d[d == 0] = 1.0
    D = np.tile(np.eye(3), (len(A), 1, 1))
    D[:, 2, 2] = d
    R = np.transpose(Vt, (0, 2, 1)) @ D @ np.transpose(U, (0, 2, 1))
    return R, cb - np.einsum("nij,nj->ni", R, ca)


def p3p(world, bearings):
    """All P3P solutions for a batch of 3-point samples (Grunert).

    ``world`` is ``(B, 3, 3)`` world points and ``bearings`` ``(B, 3, 3)``
    unit rays.  Returns ``(R (S, 3, 3), t (S, 3), sample (S,))`` listing every
    real, positive-depth solution with the index of the sample it solves.
    """
    P1, P2, P3 = world[:, 0], world[:, 1], world[:, 2]
    j1, j2, j3 = bearings[:, 0], bearings[:, 1], bearings[:, 2]
    a2 = np.sum((P2 - P3) ** 2, axis=1)
    b2 = np.sum((P1 - P3) ** 2, axis=1)
    c2 = np.sum((P1 - P2) ** 2, axis=1)
    ca = np.sum(j2 * j3, axis=1)
    cb = np.sum(j1 * j3, axis=1)
    cg = np.sum(j1 * j2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = (a2 - c2) / b2
        r = c2 / b2
    # s2 = u s1, s3 = v s1; u = N(v) / D(v) and the remaining law-of-cosines
    # equation becomes D^2 Q + N^2 - 2 cos(gamma) N D = 0, a quartic in v
    N = np.column_stack([k + 1, -2 * k * cb, k - 1])
    D = np.column_stack([2 * cg, -2 * ca])
    Q = np.column_stack([1 - r, 2 * r * cb, -r])
    quartic = _polyadd(_polymul(_polymul(D, D), Q), _polymul(N, N), -2 * cg[:, None] * _polymul(N, D))

    ok = np.all(np.isfinite(quartic), axis=1) & (np.abs(quartic[:, 4]) > 1e-12 * np.abs(quartic).max(axis=1))
    idx = np.flatnonzero(ok)
    c = quartic[idx] / quartic[idx, 4:5]
    comp = np.zeros((len(idx), 4, 4))
    comp[:, 1:, :3] = np.eye(3)
    comp[:, :, 3] = -c[:, :4]
    roots = np.linalg.eigvals(comp)  # (b, 4)
    real = np.abs(roots.imag) <= 1e-6 * (1 + np.abs(roots.real))
    v = roots.real
    dc = c[:, 1:] * np.arange(1, 5)
    for _ in range(3):  # Newton polish
        dv = _polyval(dc, v)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(dv != 0, v - _polyval(c, v) / dv, v)

    bi, ri = np.nonzero(real)
    sample = idx[bi]
    v = v[bi, ri]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (N[sample, 0] + N[sample, 1] * v + N[sample, 2] * v * v) / (D[sample, 0] + D[sample, 1] * v)
        s1 = np.sqrt(b2[sample] / (1 + v * v - 2 * v * cb[sample]))
    good = np.isfinite(u) & np.isfinite(s1) & (u > 0) & (v > 0)
    sample, u, v, s1 = sample[good], u[good], v[good], s1[good]
    cam = bearings[sample] * np.column_stack([s1, u * s1, v * s1])[:, :, None]
    R, t = _kabsch_batch(world[sample], cam)
    return R, t, sample


@dataclass
class RansacResult:
    pose: Pose
    inliers: np.ndarray
    n_inliers: int
    iterations: int


def _reprojection_errors_batch(R, t, problem):
    Xc = np.einsum("nij,pj->npi", R, problem.points) + t[:, None, :]
    K = problem.camera.intrinsics
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (K[0, 0] * Xc[..., 0] + K[0, 1] * Xc[..., 1]) / z + K[0, 2]
        v = K[1, 1] * Xc[..., 1] / z + K[1, 2]
    err = np.hypot(u - problem.pixels[:, 0], v - problem.pixels[:, 1])
    err[~(z > DEPTH_EPS)] = np.inf
    return err


def solve_ransac(
    problem, iterations=1000, inlier_px=4.0, seed=0, confidence=None, batch=100, min_support=4, score_points=2000
):
    """P3P hypotheses scored by consensus, best one refined with EPnP.

    Samples of three pairs are drawn from a seeded generator, so the result
    is deterministic for a given seed.  A hypothesis' support counts the
    inliers outside its own sample, because the sample fits by construction.
    ``NoConsensus`` is raised when the best support is below
    ``min(min_support, n - 3)``.  With ``confidence`` set, sampling stops
    early once an all-inlier sample has been drawn with that probability.
    Above ``score_points`` pairs, hypotheses are ranked on a fixed random
    subset of that size and only the winner is scored on every pair.
    """
    n = len(problem)
    if n < 4:
        raise DegenerateConfiguration(f"RANSAC needs at least 4 pairs, got {n}")
    rng = np.random.default_rng(seed)
    rays = np.column_stack([_normalized_coords(problem.pixels, problem.camera), np.ones(n)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    if n > score_points:
        scored = np.sort(rng.choice(n, size=score_points, replace=False))
    else:
        scored = np.arange(n)
    scoring = problem.subset(scored)
    position = np.full(n, -1)
    position[scored] = np.arange(len(scored))

    best_support, best_pose, best_sample = -1, None, None
    done = 0
    needed = iterations
    while done < min(iterations, needed):
        m = min(batch, iterations - done)
        samples = np.stack([rng.choice(n, size=3, replace=False) for _ in range(m)])
        done += m
        R, t, which = p3p(problem.points[samples], rays[samples])
        if len(R) == 0:
            continue
        for s in range(0, len(R), 512):
            inl = _reprojection_errors_batch(R[s : s + 512], t[s : s + 512], scoring) < inlier_px
            own = position[samples[which[s : s + 512]]]
            own_inl = np.take_along_axis(inl, np.maximum(own, 0), axis=1) & (own >= 0)
            support = inl.sum(axis=1) - own_inl.sum(axis=1)
            j = int(np.argmax(support))
            if support[j] > best_support:
                best_support = int(support[j])
                best_pose = Pose(R[s + j], t[s + j])
                best_sample = samples[which[s + j]]
        if confidence is not None and best_support > 0:
            w = min((best_support + 3) / len(scored), 1.0)
            if w >= 1.0:
                break
            needed = np.log(1 - confidence) / np.log(1 - w**3)
    if best_pose is None:
        raise NoConsensus("no hypothesis could be formed")
    mask = reprojection_errors(problem, best_pose) < inlier_px
    support = int(mask.sum() - mask[best_sample].sum())
    if support < min(min_support, n - 3):
        raise NoConsensus(f"best hypothesis is supported by {support} pairs")

    try:
        refined = solve_epnp(problem.subset(mask))
        refined_mask = reprojection_errors(problem, refined) < inlier_px
        if refined_mask.sum() >= mask.sum():
            best_pose, mask = refined, refined_mask
    except DegenerateConfiguration:
        pass
    return RansacResult(best_pose.orthonormalized(), mask, int(mask.sum()), done)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    pose: Pose
    cost: float
    iterations: int  # accepted steps
    converged: bool
    singular: bool = False
    history: list = field(default_factory=list)


def _normal_equations(problem, pose):
    f, J = residuals(problem, pose)
    f = f.reshape(-1)
    J = J.reshape(-1, 6)
    return 0.5 * float(f @ f), J.T @ f, J.T @ J


def gradient(problem, pose):
    """Gradient of the cost with respect to a left perturbation ``xi``."""
    _, g, _ = _normal_equations(_active(problem), pose)
    return g


def refine_weighted(problem, init, max_iters=100, tol=1e-10, min_decrease=1e-12, lam=1e-3):
    """Levenberg-Marquardt on the weighted reprojection cost.

    Damping is Marquardt-style (``H + lam * diag(H)``), multiplied by 10
    after a rejected step and divided by 10 after an accepted one.  Pairs
    with zero weights are dropped up front so they cannot influence the
    arithmetic.  A singular system stops the solver and returns the best
    pose so far with ``singular=True``.
    """
    prob = _active(problem)
    pose = init
    c, g, H = _normal_equations(prob, pose)
    history = [c]
    accepted = 0
    converged = False
    singular = False
    while accepted < max_iters:
        if c == 0.0 or not np.any(g):
            converged = True
            break
        D = np.diag(np.diag(H))
        if np.any(np.diag(D) <= 0):
            singular = True
            break
        try:
            step = np.linalg.solve(H + lam * D, -g)
        except np.linalg.LinAlgError:
            singular = True
            break
        if np.linalg.norm(step) < tol:
            converged = True
            break
        candidate = exp_se3(step) @ pose
        try:
            c_new = cost(prob, candidate)
        except DegenerateDepth:
            c_new = np.inf
        if c_new < c:
            decrease = c - c_new
            pose = candidate
            c, g, H = _normal_equations(prob, pose)
            history.append(c)
            accepted += 1
            lam = max(lam / 10.0, 1e-12)
            if decrease < min_decrease:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e16:
                converged = True
                break
    return RefineResult(pose.orthonormalized(), c, accepted, converged, singular, history)


# ---------------------------------------------------------------------------
# KL objective: 0.5 sum |f_i(y_gt)|^2 + log integral exp(-0.5 sum |f_i(y)|^2) dy
# ---------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    n_samples: int = 512
    cov_scale: float = 2.0
    seed: int = 0
    support_quantile: float = 0.9999
    fallback_sigma: float = 0.1


@dataclass
class KlEstimate:
    loss: float
    standard_error: float
    n_samples: int
    data_term: float = 0.0
    log_partition: float = 0.0
    fallback: bool = False
    center: Pose | None = None


def exp_se3_batch(xi):
    """Vectorized ``exp_se3`` returning ``(R (n,3,3), t (n,3))``."""
    xi = np.asarray(xi, dtype=float)
    v, w = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(w, axis=1)
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24, (1 - np.cos(th)) / th**2)
    c = np.where(small, 1.0 / 6 - theta**2 / 120, (th - np.sin(th)) / th**3)
    K = np.zeros((len(xi), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -w[:, 2], w[:, 1], -w[:, 0]
    K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = w[:, 2], -w[:, 1], w[:, 0]
    K2 = K @ K
    eye = np.eye(3)
    R = eye + a[:, None, None] * K + b[:, None, None] * K2
    V = eye + b[:, None, None] * K + c[:, None, None] * K2
    return R, np.einsum("nij,nj->ni", V, v)


def _batch_costs(problem, center, xi):
    R, t = exp_se3_batch(xi)
    Rc = R @ center.rotation
    tc = np.einsum("nij,j->ni", R, center.translation) + t
    Xc = np.einsum("nij,pj->npi", Rc, problem.points) + tc[:, None, :]
    K = problem.camera.intrinsics
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (K[0, 0] * Xc[..., 0] + K[0, 1] * Xc[..., 1]) / z + K[0, 2]
        v = K[1, 1] * Xc[..., 1] / z + K[1, 2]
    f = problem.weights[None] * (np.stack([u, v], axis=-1) - problem.pixels[None])
    c = 0.5 * np.sum(f * f, axis=(1, 2))
    c[np.any(z <= DEPTH_EPS, axis=1)] = np.inf
    return c


def kl_loss(problem, pose_gt, cfg=None, center=None):
    """Importance-sampled estimate of the KL pose loss.

    The integral runs over left perturbations of ``center`` (by default the
    weighted optimum reached from ``pose_gt``), truncated to the proposal's
    ``support_quantile`` Mahalanobis ellipsoid.  The proposal is a Gaussian
    with covariance ``cov_scale * H^-1`` from the Gauss-Newton Hessian, or
    an isotropic ``fallback_sigma`` Gaussian when ``H`` is not positive
    definite (flagged in the result and warned about).
    """
    cfg = cfg or SamplerConfig()
    prob = _active(problem)
    data_term = cost(prob, pose_gt) if len(prob) else 0.0
    if center is None:
        center = refine_weighted(prob, pose_gt).pose if len(prob) else pose_gt

    fallback = False
    H = _normal_equations(prob, center)[2] if len(prob) else np.zeros((6, 6))
    try:
        np.linalg.cholesky(H)
        ev = np.linalg.eigvalsh(H)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise np.linalg.LinAlgError
        cov = cfg.cov_scale * np.linalg.inv(H)
        cov = 0.5 * (cov + cov.T)
    except np.linalg.LinAlgError:
        warnings.warn("Gauss-Newton Hessian not positive definite; isotropic proposal", ProposalFallbackWarning)
        fallback = True
        cov = cfg.fallback_sigma**2 * np.eye(6)
    L = np.linalg.cholesky(cov)

    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((cfg.n_samples, 6))
    xi = z @ L.T
    r2 = np.einsum("ij,ij->i", z, z)
    inside = r2 <= chi2.ppf(cfg.support_quantile, 6)
    log_q = -0.5 * r2 - 0.5 * (6 * np.log(2 * np.pi)) - np.sum(np.log(np.diag(L)))
    costs = _batch_costs(prob, center, xi[inside]) if len(prob) else np.zeros(inside.sum())
    log_w = np.full(cfg.n_samples, -np.inf)
    log_w[inside] = -costs - log_q[inside]
    log_z = float(logsumexp(log_w) - np.log(cfg.n_samples))
    w = np.exp(log_w - log_w.max())
    se = float(np.std(w) / (np.sqrt(cfg.n_samples) * np.mean(w)))
    return KlEstimate(data_term + log_z, se, cfg.n_samples, data_term, log_z, fallback, center)


@dataclass
class WeightFitStep:
    weights: np.ndarray
    loss: float
    inlier_fraction: float


def inlier_mass_fraction(weights, inlier_mask):
    w = np.asarray(weights, dtype=float)
    return float(w[inlier_mask].sum() / w.sum())


def fit_weights(problem, pose_gt, inlier_mask, steps=5, lr=0.5, fd_step=1e-4, cfg=None):
    """Finite-difference gradient descent of ``kl_loss`` on log-weights.

    The sampler seed is held fixed so every evaluation uses the same random
    numbers.  Each step backtracks until the loss strictly decreases.
    Returns the trajectory, starting with the initial weights.
    """
    cfg = cfg or SamplerConfig()
    logw = np.log(np.asarray(problem.weights, dtype=float))

    def loss(lw):
        return kl_loss(problem.with_weights(np.exp(lw)), pose_gt, cfg).loss

    current = loss(logw)
    trajectory = [WeightFitStep(np.exp(logw), current, inlier_mass_fraction(np.exp(logw), inlier_mask))]
    for _ in range(steps):
        grad = np.zeros_like(logw)
        for idx in np.ndindex(logw.shape):
            e = np.zeros_like(logw)
            e[idx] = fd_step
            grad[idx] = (loss(logw + e) - loss(logw - e)) / (2 * fd_step)
        scale = lr / max(np.max(np.abs(grad)), 1e-300)
        for _ in range(30):
            trial = logw - scale * grad
            value = loss(trial)
            if value < current:
                break
            scale *= 0.5
        else:
            break
        logw, current = trial, value
        w = np.exp(logw)
        trajectory.append(WeightFitStep(w, current, inlier_mass_fraction(w, inlier_mask)))
    return trajectory
