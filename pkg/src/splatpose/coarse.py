"""Coarse pose from a NOCS image: decode 2D-3D correspondences, then PnP + RANSAC.

The minimal solver is EPnP: object points are written as barycentric
combinations of four control points (three for planar sets), the control
points' camera coordinates are recovered from the null space of a linear
system and fixed up with a few Gauss-Newton steps on their pairwise
distances.  Hypotheses are scored by 2D reprojection and the consensus
pose is polished with Gauss-Newton on the reprojection error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import lie
from .lie import RigidTransform
from .registration import umeyama
from .render import CameraIntrinsics, Frame
from .scene import Aabb

MIN_CORRESPONDENCES = 6


class InsufficientCorrespondences(ValueError):
    pass


class PnPFailure(ValueError):
    pass


@dataclass(frozen=True)
class Correspondence2D3D:
    pixel: np.ndarray
    point_m: np.ndarray


@dataclass(frozen=True)
class CoarseConfig:
    threshold: float = 0.05  # on the max NOCS channel
    hypotheses: int = 200
    inlier_px: float = 2.0
    min_inliers: int = MIN_CORRESPONDENCES
    sample_size: int = 4
    refine_iters: int = 20
    seed: int = 0


# ---------------------------------------------------------------------------
# NOCS decoding
# ---------------------------------------------------------------------------


def nocs_to_arrays(nocs_img: Frame, mask, aabb: Aabb, threshold: float = 0.05):
    """(N, 2) pixels and (N, 3) object points for masked pixels brighter than ``threshold``."""
    rgb = np.asarray(nocs_img.rgb if isinstance(nocs_img, Frame) else nocs_img, dtype=float)
    if mask is None:
        mask = nocs_img.mask if isinstance(nocs_img, Frame) and nocs_img.mask is not None else np.ones(rgb.shape[:2], bool)
    sel = np.asarray(mask, dtype=bool) & (rgb.max(axis=2) > threshold)
    v, u = np.nonzero(sel)
    if u.size < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondences(f"only {u.size} NOCS pixels above threshold {threshold}")
    colors = np.clip(rgb[v, u], 0.0, 1.0)
    return np.stack([u, v], axis=1).astype(float), aabb.decode(colors)


def nocs_to_correspondences(nocs_img: Frame, mask, aabb: Aabb, threshold: float = 0.05) -> list:
    px, pts = nocs_to_arrays(nocs_img, mask, aabb, threshold)
    return [Correspondence2D3D(a, b) for a, b in zip(px, pts)]


def save_correspondences_csv(corrs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "x", "y", "z"])
        for c in corrs:
            w.writerow([f"{c.pixel[0]:.6g}", f"{c.pixel[1]:.6g}", *(f"{x:.9g}" for x in c.point_m)])


def _as_arrays(corrs):
    if isinstance(corrs, tuple) and len(corrs) == 2:
        return np.asarray(corrs[0], float).reshape(-1, 2), np.asarray(corrs[1], float).reshape(-1, 3)
    px = np.array([c.pixel for c in corrs], dtype=float).reshape(-1, 2)
    pts = np.array([c.point_m for c in corrs], dtype=float).reshape(-1, 3)
    return px, pts


# ---------------------------------------------------------------------------
# EPnP
# ---------------------------------------------------------------------------


def _control_points(pts: np.ndarray):
    c0 = pts.mean(axis=0)
    d = pts - c0
    w, V = np.linalg.eigh(d.T @ d / len(pts))
    w, V = w[::-1], V[:, ::-1]
    planar = w[2] <= 1e-10 * max(w[0], 1e-300)
    n_axes = 2 if planar else 3
    axes = [c0 + np.sqrt(max(w[i], 1e-300)) * V[:, i] for i in range(n_axes)]
    return np.array([c0] + axes)


def _barycentric(pts: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    B = (ctrl[1:] - ctrl[0]).T  # 3 x (nc - 1)
    a, *_ = np.linalg.lstsq(B, (pts - ctrl[0]).T, rcond=None)
    return np.column_stack([1.0 - a.sum(axis=0), a.T])


def _pairs(nc):
    return [(i, j) for i in range(nc) for j in range(i + 1, nc)]


def _betas_gn(V: np.ndarray, d2: np.ndarray, beta: np.ndarray, nc: int, iters: int = 10) -> np.ndarray:
    """Refine null-space weights so the control points keep their pairwise distances."""
    pairs = _pairs(nc)
    Vc = V.reshape(len(beta), nc, 3)
    for _ in range(iters):
        c = np.tensordot(beta, Vc, axes=1)
        r = np.array([np.sum((c[i] - c[j]) ** 2) for i, j in pairs]) - d2
        J = np.array([[2 * np.dot(c[i] - c[j], Vc[k, i] - Vc[k, j]) for k in range(len(beta))] for i, j in pairs])
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        beta = beta + step
        if np.linalg.norm(step) < 1e-12 * (1 + np.linalg.norm(beta)):
            break
    return beta


def _linearized_betas(V: np.ndarray, d2: np.ndarray, nc: int, n: int):
    """Initial weights for the ``n`` smallest null vectors (n = 1, 2, 3)."""
    pairs = _pairs(nc)
    Vc = V[:n].reshape(n, nc, 3)
    dv = np.array([[Vc[k, i] - Vc[k, j] for k in range(n)] for i, j in pairs])  # P x n x 3
    if n == 1:
        num = np.sum(np.sqrt(d2) * np.linalg.norm(dv[:, 0], axis=1))
        den = np.sum(np.linalg.norm(dv[:, 0], axis=1) ** 2)
        return np.array([num / den])
    terms = [(a, b) for a in range(n) for b in range(a, n)]
    if len(terms) > len(pairs):
        return None
    L = np.array([[(1 if a == b else 2) * np.dot(dv[p, a], dv[p, b]) for a, b in terms] for p in range(len(pairs))])
    bb, *_ = np.linalg.lstsq(L, d2, rcond=None)
    prod = dict(zip(terms, bb))
    b0 = np.sqrt(abs(prod[(0, 0)]))
    if b0 == 0:
        return None
    beta = [b0] + [prod[(0, k)] / b0 for k in range(1, n)]
    return np.array(beta)


def epnp(pixels, points, K: CameraIntrinsics) -> RigidTransform:
    """Pose (object to camera) from n >= 4 correspondences; planar sets are supported."""
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(px) < 4:
        raise PnPFailure("epnp needs at least 4 correspondences")
    ctrl = _control_points(pts)
    nc = len(ctrl)
    alphas = _barycentric(pts, ctrl)
    M = np.zeros((2 * len(px), 3 * nc))
    for j in range(nc):
        M[0::2, 3 * j] = alphas[:, j] * K.fx
        M[0::2, 3 * j + 2] = alphas[:, j] * (K.cx - px[:, 0])
        M[1::2, 3 * j + 1] = alphas[:, j] * K.fy
        M[1::2, 3 * j + 2] = alphas[:, j] * (K.cy - px[:, 1])
    _, _, Vt = np.linalg.svd(M.T @ M)
    V = Vt[::-1]  # rows: null-space candidates, smallest singular value first
    d2 = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in _pairs(nc)])
    n_max = min(nc, 4)
    best, best_err = None, np.inf
    for n in range(1, n_max):
        init = _linearized_betas(V, d2, nc, n)
        if init is None:
            continue
        beta = np.zeros(n_max)
        beta[:n] = init
        beta = _betas_gn(V[:n_max], d2, beta, nc)
        c = np.tensordot(beta, V[:n_max].reshape(n_max, nc, 3), axes=1)
        pc = alphas @ c
        if np.mean(pc[:, 2]) < 0:
            pc = -pc
        T = umeyama(pts, pc)
        err = np.mean(reprojection_errors(T, K, px, pts))
        if err < best_err:
            best, best_err = T, err
    if best is None:
        raise PnPFailure("epnp: no valid solution")
    return best


# ---------------------------------------------------------------------------
# reprojection and refinement
# ---------------------------------------------------------------------------


def reprojection_errors(T: RigidTransform, K: CameraIntrinsics, pixels, points) -> np.ndarray:
    pc = T.apply(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
    err = np.linalg.norm(uv - pixels, axis=1)
    return np.where(z > 0, err, np.inf)


def refine_reprojection(T: RigidTransform, K: CameraIntrinsics, pixels, points, iters: int = 20) -> RigidTransform:
    """Damped Gauss-Newton on the reprojection error with left twist updates."""
    lam = 1e-3
    cost = np.sum(reprojection_errors(T, K, pixels, points) ** 2)
    for _ in range(iters):
        pc = T.apply(points)
        x, y, z = pc.T
        r = np.concatenate([K.fx * x / z + K.cx - pixels[:, 0], K.fy * y / z + K.cy - pixels[:, 1]])
        Jpi = np.zeros((len(pc), 2, 3))
        Jpi[:, 0, 0] = K.fx / z
        Jpi[:, 0, 2] = -K.fx * x / z**2
        Jpi[:, 1, 1] = K.fy / z
        Jpi[:, 1, 2] = -K.fy * y / z**2
        J3 = Jpi @ lie.jac_point_left(pc)  # N x 2 x 6
        J = np.concatenate([J3[:, 0], J3[:, 1]])
        H = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(8):
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            T_new = lie.exp_se3(step) @ T
            c_new = np.sum(reprojection_errors(T_new, K, pixels, points) ** 2)
            if c_new < cost:
                T, cost, improved = T_new, c_new, True
                lam = max(lam / 10, 1e-9)
                break
            lam *= 10
        if not improved or np.linalg.norm(step) < 1e-12:
            break
    return T


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


@dataclass
class PnPResult:
    pose: RigidTransform
    inliers: np.ndarray  # indices into the correspondence list
    rms: float
    hypothesis: int


def pnp_ransac(corrs, K: CameraIntrinsics, cfg: CoarseConfig = CoarseConfig()) -> PnPResult:
    """Robust PnP.  Deterministic for a fixed ``cfg.seed``.

    The winner maximises the inlier count, then minimises the inlier RMS,
    then the hypothesis index.
    """
    px, pts = _as_arrays(corrs)
    n = len(px)
    if n < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondences(f"need >= {MIN_CORRESPONDENCES} correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    best_key, best = None, None
    for h in range(cfg.hypotheses):
        sample = rng.choice(n, size=cfg.sample_size, replace=False)
        try:
            T = epnp(px[sample], pts[sample], K)
        except (PnPFailure, np.linalg.LinAlgError):
            continue
        err = reprojection_errors(T, K, px, pts)
        inl = err < cfg.inlier_px
        cnt = int(inl.sum())
        if cnt == 0:
            continue
        rms = float(np.sqrt(np.mean(err[inl] ** 2)))
        key = (-cnt, rms, h)
        if best_key is None or key < best_key:
            best_key, best = key, (T, inl)
    if best is None or -best_key[0] < cfg.min_inliers:
        raise PnPFailure("no hypothesis reached the minimum inlier count")
    T, inl = best
    # polish on the consensus, re-gate, and polish once more on the final set
    for _ in range(2):
        idx = np.nonzero(inl)[0]
        T_ref = refine_reprojection(T, K, px[idx], pts[idx], cfg.refine_iters)
        err = reprojection_errors(T_ref, K, px, pts)
        new_inl = err < cfg.inlier_px
        if new_inl.sum() < cfg.min_inliers:
            break
        T, inl = T_ref, new_inl
    err = reprojection_errors(T, K, px, pts)
    idx = np.nonzero(inl)[0]
    rms = float(np.sqrt(np.mean(err[idx] ** 2)))
    return PnPResult(T, idx, rms, best_key[2])


def coarse_estimate(model, frame_or_nocs: Frame, K: CameraIntrinsics, cfg: CoarseConfig = CoarseConfig(),
                    aabb: Aabb | None = None, mask=None) -> PnPResult:
    """Decode a NOCS frame against the model's bounding box and solve for the pose."""
    box = aabb if aabb is not None else model.aabb()
    px, pts = nocs_to_arrays(frame_or_nocs, mask, box, cfg.threshold)
    return pnp_ransac((px, pts), K, cfg)
