"""Depth correction by ray casting the splat model and point-to-point ICP.

The observed RGB-D frame is back-projected to a target cloud.  Rays through
the observed object pixels are cast into the model's Gaussian centres at the
coarse pose; the first centre close to each ray forms the source cloud.  ICP
then aligns source onto target and the correction is applied on the camera
side of the coarse pose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import lie
from .lie import RigidTransform
from .render import CameraIntrinsics, Frame
from .scene import GaussianModel

log = logging.getLogger(__name__)

FRAMES = ("camera", "object")


@dataclass
class PointCloud:
    points: np.ndarray
    frame_tag: str = "camera"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.frame_tag not in FRAMES:
            raise ValueError(f"frame_tag must be one of {FRAMES}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite values")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def empty(self) -> bool:
        return self.points.shape[0] == 0

    def transformed(self, T: RigidTransform, frame_tag: str | None = None) -> "PointCloud":
        return PointCloud(T.apply(self.points), frame_tag or self.frame_tag)


@dataclass(frozen=True)
class RayCastConfig:
    epsilon: float
    pixel_stride: int = 2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if int(self.pixel_stride) < 1:
            raise ValueError("pixel_stride must be >= 1")

    @classmethod
    def for_model(cls, model: GaussianModel, fraction: float = 0.005, spacing_factor: float = 1.0,
                  pixel_stride: int = 2) -> "RayCastConfig":
        """Threshold from the model: a fraction of the centre bounding-box diagonal,
        raised to ``spacing_factor`` times the median centre spacing.

        A ray narrower than the gaps between centres slips through the front
        surface and reports a centre on the far side.
        """
        eps = fraction * model.aabb().diagonal
        if spacing_factor > 0:
            eps = max(eps, spacing_factor * centre_spacing(model.positions))
        return cls(eps, pixel_stride)


def centre_spacing(points) -> float:
    """Median nearest-neighbour distance of a point set."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 2:
        return 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


# ---------------------------------------------------------------------------
# clouds from images
# ---------------------------------------------------------------------------


def backproject(frame: Frame, K: CameraIntrinsics, stride: int = 1) -> PointCloud:
    """Camera-frame points for masked pixels with positive depth.

    An empty result is a valid cloud; callers check ``.empty``.
    """
    depth = frame.depth
    valid = depth > 0
    if frame.mask is not None:
        valid &= frame.mask
    if stride > 1:
        grid = np.zeros_like(valid)
        grid[::stride, ::stride] = True
        valid &= grid
    v, u = np.nonzero(valid)
    d = depth[v, u]
    pts = np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], axis=1)
    return PointCloud(pts, "camera")


def ray_pixels(frame: Frame, stride: int = 2) -> np.ndarray:
    """(M, 2) pixel coordinates (u, v) of masked pixels on a ``stride`` grid."""
    mask = frame.mask if frame.mask is not None else frame.depth > 0
    sel = np.zeros_like(mask, dtype=bool)
    sel[::stride, ::stride] = True
    v, u = np.nonzero(mask & sel)
    return np.stack([u, v], axis=1).astype(float)


def _ray_dirs(pixels, K: CameraIntrinsics) -> np.ndarray:
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    d = np.stack([(px[:, 0] - K.cx) / K.fx, (px[:, 1] - K.cy) / K.fy, np.ones(len(px))], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _first_hit(p: np.ndarray, cand: np.ndarray, d: np.ndarray, eps: float) -> int:
    """Index into ``cand`` of the hit closest to the origin, or -1."""
    q = p[cand]
    t = q @ d
    perp = np.linalg.norm(q - t[:, None] * d, axis=1)
    ok = (t >= 0) & (perp < eps)
    if not ok.any():
        return -1
    idx = cand[ok]
    r = np.linalg.norm(p[idx], axis=1)
    # nearest to the camera centre, ties to the lowest point index
    return int(idx[np.lexsort((idx, r))[0]])


def raycast_source(model_points: PointCloud, T_coarse: RigidTransform, K: CameraIntrinsics, pixels,
                   cfg: RayCastConfig) -> PointCloud:
    """Cast one ray per pixel from the camera centre; keep the nearest point within ``epsilon``.

    ``model_points`` is in the object frame and is moved to the camera by
    ``T_coarse``.  Candidates are gathered from a k-d tree over point
    directions and then filtered exactly, so the result equals
    :func:`raycast_source_bruteforce`.
    """
    p = T_coarse.apply(model_points.points) if model_points.frame_tag == "object" else model_points.points
    dirs = _ray_dirs(pixels, K)
    if len(p) == 0 or len(dirs) == 0:
        return PointCloud(np.zeros((0, 3)), "camera")
    eps = float(cfg.epsilon)
    r = np.linalg.norm(p, axis=1)
    at_origin = np.nonzero(r < 1e-12)[0]
    far = np.nonzero(r >= 1e-12)[0]
    hits = []
    if far.size:
        units = p[far] / r[far, None]
        tree = cKDTree(units)
        # perp < eps with t >= 0 means sin(angle) < eps / r <= eps / r_min;
        # translate that bound on the angle into a chord length on the sphere
        s = min(eps / r[far].min(), 1.0)
        chord = 2.0 * np.sin(0.5 * np.arcsin(s)) * (1 + 1e-9) + 1e-12
        if s >= 1.0:
            chord = np.sqrt(2.0) + 1e-9
        groups = tree.query_ball_point(dirs, chord)
    else:
        groups = [[] for _ in range(len(dirs))]
    for i, g in enumerate(groups):
        cand = far[np.asarray(g, dtype=np.int64)] if len(g) else np.zeros(0, dtype=np.int64)
        if at_origin.size:
            cand = np.concatenate([cand, at_origin])
        if cand.size == 0:
            continue
        k = _first_hit(p, cand, dirs[i], eps)
        if k >= 0:
            hits.append(k)
    return PointCloud(p[np.asarray(hits, dtype=np.int64)] if hits else np.zeros((0, 3)), "camera")


def raycast_source_bruteforce(model_points: PointCloud, T_coarse: RigidTransform, K: CameraIntrinsics,
                              pixels, cfg: RayCastConfig) -> PointCloud:
    """Reference O(rays x points) enumeration of :func:`raycast_source`."""
    p = T_coarse.apply(model_points.points) if model_points.frame_tag == "object" else model_points.points
    dirs = _ray_dirs(pixels, K)
    out = []
    allidx = np.arange(len(p))
    for d in dirs:
        if len(p) == 0:
            break
        k = _first_hit(p, allidx, d, cfg.epsilon)
        if k >= 0:
            out.append(p[k])
    return PointCloud(np.array(out).reshape(-1, 3), "camera")


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


def umeyama(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform with ``R @ src + t ~ dst`` (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return RigidTransform(R, mu_d - R @ mu_s)


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    residuals: list = field(default_factory=list)  # truncated mean squared distance per iteration
    converged: bool = False
    gate: float = 0.0

    @property
    def rms(self) -> float:
        return float(np.sqrt(self.residuals[-1])) if self.residuals else float("nan")


def _truncated(d: np.ndarray, gate: float) -> float:
    return float(np.mean(np.minimum(d, gate) ** 2))


def icp(source: PointCloud, target: PointCloud, max_iters: int = 50, tol: float = 1e-6,
        gate_factor: float = 3.0, init: RigidTransform | None = None) -> IcpResult:
    """Point-to-point ICP aligning ``source`` onto ``target``.

    Correspondences farther than ``gate_factor`` times the initial median
    distance are dropped.  The gate is fixed for the run, which makes the
    truncated cost ``mean(min(d, gate)^2)`` non-increasing; this is asserted
    every iteration.
    """
    if source.empty or target.empty:
        raise ValueError("icp: empty point cloud")
    src = source.points
    tree = cKDTree(target.points)
    T = init if init is not None else RigidTransform.identity()
    d, j = tree.query(T.apply(src))
    med = float(np.median(d))
    gate = gate_factor * med if med > 0 else np.inf
    residuals = [_truncated(d, gate)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        keep = d <= gate
        if keep.sum() < 3:
            raise ValueError("icp: fewer than 3 correspondences")
        step = umeyama(T.apply(src[keep]), target.points[j[keep]])
        T = step @ T
        d, j = tree.query(T.apply(src))
        residuals.append(_truncated(d, gate))
        assert residuals[-1] <= residuals[-2] * (1 + 1e-9) + 1e-18, "icp residual increased"
        change = np.linalg.norm(lie.log_so3(step.R)) + np.linalg.norm(step.t)
        if change < tol:
            converged = True
            break
    return IcpResult(T, it, residuals, converged, gate)


def mean_nn_distance(source: PointCloud, target: PointCloud) -> float:
    d, _ = cKDTree(target.points).query(source.points)
    return float(d.mean())


# ---------------------------------------------------------------------------
# GS-ICP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GsIcpConfig:
    epsilon_fraction: float = 0.005  # of the centre bounding-box diagonal
    spacing_factor: float = 1.0  # lower bound on epsilon, in median centre spacings
    pixel_stride: int = 2
    max_iters: int = 50
    tol: float = 1e-6
    gate_factor: float = 3.0
    max_rotation_deg: float = 30.0  # larger corrections are treated as divergence
    # gross-failure bound only, of the bbox diagonal; sparse centres leave a
    # residual of a few percent even when aligned, so fitness judges quality
    max_residual_fraction: float = 0.05
    min_fitness: float = 0.5  # share of aligned source points within epsilon of the target
    min_points: int = 10


@dataclass
class GsIcpResult:
    pose: RigidTransform
    delta: RigidTransform
    diverged: bool
    reason: str
    residual_before: float
    residual_after: float
    fitness: float
    n_source: int
    n_target: int
    iterations: int = 0


def gs_icp(model: GaussianModel, frame: Frame, K: CameraIntrinsics, T_coarse: RigidTransform,
           cfg: GsIcpConfig = GsIcpConfig()) -> GsIcpResult:
    """Correct ``T_coarse`` (object to camera) by aligning the ray-cast model to the observed depth.

    Never returns a pose whose source-to-target mean nearest-neighbour
    distance is worse than at ``T_coarse``; on any failure the coarse pose is
    passed through with ``diverged`` set and a ``reason``.
    """
    ident = RigidTransform.identity()
    target = backproject(frame, K)
    diag = model.aabb().diagonal
    rc = RayCastConfig.for_model(model, cfg.epsilon_fraction, cfg.spacing_factor, cfg.pixel_stride)
    source = raycast_source(PointCloud(model.positions, "object"), T_coarse, K, ray_pixels(frame, cfg.pixel_stride), rc)

    def fallback(reason, before=float("nan"), after=float("nan"), iters=0, fit=float("nan")):
        log.info("gs_icp fallback: %s", reason)
        return GsIcpResult(T_coarse, ident, True, reason, before, after, fit, len(source), len(target), iters)

    if target.empty:
        return fallback("empty target cloud")
    if len(source) < cfg.min_points:
        return fallback("empty source cloud")
    before = mean_nn_distance(source, target)
    try:
        res = icp(source, target, cfg.max_iters, cfg.tol, cfg.gate_factor)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return fallback(f"icp failed: {exc}", before)
    d, _ = cKDTree(target.points).query(res.transform.apply(source.points))
    after = float(d.mean())
    fit = float(np.mean(d < rc.epsilon))
    info = (before, after, res.iterations, fit)
    if not np.isfinite(after) or after > before:
        return fallback("residual increased", *info)
    if np.degrees(lie.rotation_angle(res.transform.R)) > cfg.max_rotation_deg:
        return fallback("rotation correction too large", *info)
    if after > cfg.max_residual_fraction * diag:
        return fallback("residual too large after alignment", *info)
    if fit < cfg.min_fitness:
        return fallback("low fitness after alignment", *info)
    return GsIcpResult(res.transform @ T_coarse, res.transform, False, "ok", before, after, fit,
                       len(source), len(target), res.iterations)
