"""Projection, rasterisation and pose gradients for Gaussian-splat models.

Pixel ``(u, v)`` is column ``u``, row ``v``; its centre sits at integer
coordinates, so a point on the optical axis lands exactly on ``(cx, cy)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie
from ._raster import T_MIN, composite_backward, composite_forward, covering_splats
from .lie import RigidTransform
from .losses import LossResult, LossWeights, loss
from .scene import SH_OFFSET, GaussianModel, sh_basis, sh_basis_grad

Z_NEAR = 0.01
DILATION = 0.3  # px^2 added to every projected covariance
CUTOFF_SIGMA = 3.0
MODES = ("color", "depth", "nocs", "all")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 45.0) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy], axis=1)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Splat2D:
    p: np.ndarray
    sigma: np.ndarray
    z: float
    color: np.ndarray | None = None
    alpha: float = 1.0


@dataclass
class Frame:
    """An RGB-D image pair; rendered frames additionally carry coverage.

    ``alpha`` is the accumulated opacity and ``wdepth`` the opacity-weighted
    depth sum, so ``depth = wdepth / alpha`` wherever ``mask`` is set.
    """

    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray | None = None
    alpha: np.ndarray | None = None
    wdepth: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth sizes differ")
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)

    @property
    def shape(self):
        return self.depth.shape


def perspective_jacobian(p_c, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = np.asarray(p_c, dtype=float).reshape(3)
    return np.array(
        [[K.fx / z, 0.0, -K.fx * x / z**2], [0.0, K.fy / z, -K.fy * y / z**2]]
    )


def project_gaussian(T: RigidTransform, K: CameraIntrinsics, mu_m, sigma_m, z_near: float = Z_NEAR):
    """Project one 3D Gaussian; returns None when it lies behind ``z_near``."""
    p_c = T.apply(np.asarray(mu_m, dtype=float).reshape(3))
    if p_c[2] <= z_near:
        return None
    J = perspective_jacobian(p_c, K)
    sigma_c = T.R @ np.asarray(sigma_m, dtype=float) @ T.R.T
    return Splat2D(p=K.project(p_c)[0], sigma=J @ sigma_c @ J.T, z=float(p_c[2]))


# ---------------------------------------------------------------------------
# batched projection
# ---------------------------------------------------------------------------


@dataclass
class _Projected:
    p_c: np.ndarray
    J: np.ndarray
    cov3: np.ndarray  # object-frame covariances
    cov_c: np.ndarray
    cov2: np.ndarray
    conic: np.ndarray  # (N, 3): a, b, c of the inverse 2D covariance
    uv: np.ndarray
    color: np.ndarray
    color_raw: np.ndarray
    basis: np.ndarray
    dirs: np.ndarray
    dir_norm: np.ndarray
    cam_center: np.ndarray
    order: np.ndarray
    bbox: np.ndarray
    cut2: float


def _project_all(model: GaussianModel, T: RigidTransform, K: CameraIntrinsics, colors=None,
                 dilation: float = DILATION, cutoff: float = CUTOFF_SIGMA) -> _Projected:
    p_c = T.apply(model.positions)
    x, y, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    visible = z > Z_NEAR
    zs = np.where(visible, z, 1.0)
    n = len(model)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * x / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * y / zs**2
    cov3 = model.covariances()
    cov_c = T.R[None] @ cov3 @ T.R.T[None]
    cov2 = J @ cov_c @ J.transpose(0, 2, 1)
    cov2[:, 0, 0] += dilation
    cov2[:, 1, 1] += dilation
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    visible &= det > 0
    det = np.where(det > 0, det, 1.0)
    conic = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], axis=1)
    uv = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)

    cam_center = -T.R.T @ T.t
    v = model.positions - cam_center
    dir_norm = np.linalg.norm(v, axis=1)
    dirs = v / np.where(dir_norm > 0, dir_norm, 1.0)[:, None]
    if colors is None:
        basis = sh_basis(dirs)
        color_raw = np.einsum("nck,nk->nc", model.sh, basis) + SH_OFFSET
        color = np.clip(color_raw, 0.0, 1.0)
    else:
        basis = None
        color_raw = np.asarray(colors, dtype=float)
        color = np.clip(color_raw, 0.0, 1.0)

    # ellipse bounding boxes at the cutoff radius
    rx = cutoff * np.sqrt(np.maximum(cov2[:, 0, 0], 0))
    ry = cutoff * np.sqrt(np.maximum(cov2[:, 1, 1], 0))
    x0 = np.ceil(uv[:, 0] - rx)
    x1 = np.floor(uv[:, 0] + rx)
    y0 = np.ceil(uv[:, 1] - ry)
    y1 = np.floor(uv[:, 1] + ry)
    visible &= (x1 >= 0) & (x0 <= K.width - 1) & (y1 >= 0) & (y0 <= K.height - 1)
    visible &= np.isfinite(uv).all(axis=1)
    bbox = np.zeros((n, 4), dtype=np.int64)
    bbox[visible, 0] = np.clip(x0[visible], 0, K.width - 1)
    bbox[visible, 1] = np.clip(x1[visible], 0, K.width - 1)
    bbox[visible, 2] = np.clip(y0[visible], 0, K.height - 1)
    bbox[visible, 3] = np.clip(y1[visible], 0, K.height - 1)

    idx = np.nonzero(visible)[0]
    order = idx[np.argsort(z[idx], kind="stable")].astype(np.int64)
    return _Projected(p_c, J, cov3, cov_c, cov2, conic, uv, color, color_raw, basis, dirs, dir_norm,
                      cam_center, order, bbox, cutoff**2)


def _composite(model: GaussianModel, pr: _Projected, K: CameraIntrinsics):
    return composite_forward(
        pr.order, pr.uv, pr.conic, model.opacities, pr.color, pr.p_c[:, 2].copy(), pr.bbox,
        pr.cut2, K.height, K.width,
    )


def rasterize(model: GaussianModel, T: RigidTransform, K: CameraIntrinsics, mode: str = "all",
              nocs_aabb=None, dilation: float = DILATION, cutoff: float = CUTOFF_SIGMA) -> Frame:
    """Render colour, depth and coverage.

    In ``"nocs"`` mode the colour channel holds normalised object coordinates
    (divided by coverage so that partially covered pixels decode correctly).
    """
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    if len(model) == 0:
        raise ValueError("rasterize: empty model")
    if mode == "nocs":
        return _render_nocs(model, T, K, nocs_aabb, dilation, cutoff)
    pr = _project_all(model, T, K, dilation=dilation, cutoff=cutoff)
    frame, _ = _frame_from(model, pr, K)
    return frame


NOCS_MIN_COS = 0.2
SURFACE_CANDIDATES = 16
SURFACE_MIN_ALPHA = 0.05
FLAT_RATIO = 0.5  # smallest / middle scale below which a splat is treated as a surface patch


def _surface_hits(model, T, K, box, dilation, cutoff, min_cos: float = NOCS_MIN_COS, colors=None,
                  max_candidates: int = SURFACE_CANDIDATES, min_alpha: float = SURFACE_MIN_ALPHA):
    """Where each covered pixel's ray first meets the surface.

    Every flat splat covering the pixel offers the intersection of the ray with
    its tangent plane (the axis of smallest scale is the normal); a round one
    offers the point of the ray closest to its centre.  An offer counts only
    if the hit lies inside the box (not silhouette bleed) and, for flat
    splats, on the splat's own footprint (not an extension of some other
    face).  The nearest surviving offer wins; the pixel is dropped when that
    surface is seen at a grazing angle.  Splats lying on a common surface
    agree exactly, whichever one is picked, where blended centre depths bend
    the surface at edges and oblique faces.
    Returns ``(frame, v, u, ok, depth, hit_m)``.
    """
    pr = _project_all(model, T, K, colors=colors, dilation=dilation, cutoff=cutoff)
    frame, _ = _frame_from(model, pr, K)
    axes = lie.quat_to_rotmat(model.rotations)
    thin = np.argmin(model.scales, axis=1)
    n_c = axes[np.arange(len(model)), :, thin] @ T.R.T
    offset = np.sum(n_c * pr.p_c, axis=1)
    cand = covering_splats(pr.order, pr.uv, pr.conic, model.opacities, pr.bbox, pr.cut2, K.height, K.width,
                           max_candidates, min_alpha)
    v, u = np.nonzero(frame.mask & (cand[:, :, 0] >= 0))
    k = cand[v, u]  # (M, C)
    present = k >= 0
    k = np.where(present, k, 0)
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(u.size)], axis=1)
    denom = np.einsum("mcj,mj->mc", n_c[k], rays)
    flat = np.sort(model.scales, axis=1)
    flat = (flat[:, 0] < FLAT_RATIO * flat[:, 1])[k]
    grazing = flat & (np.abs(denom) <= min_cos * np.linalg.norm(rays, axis=1)[:, None])
    parallel = flat & (np.abs(denom) < 1e-12)
    ok = present & ~parallel
    t_plane = offset[k] / np.where(ok & flat, denom, 1.0)
    # round splats have no tangent plane: take the point of the ray closest to the centre
    t_round = np.einsum("mcj,mj->mc", pr.p_c[k], rays) / np.sum(rays * rays, axis=1)[:, None]
    t = np.where(ok, np.where(flat, t_plane, t_round), 0.0)
    ok &= t > 0
    hit_m = T.inverse().apply((t[:, :, None] * rays[:, None, :]).reshape(-1, 3)).reshape(t.shape + (3,))
    tol = 1e-3 * box.diagonal
    ok &= np.all((hit_m >= box.min - tol) & (hit_m <= box.max + tol), axis=2)
    local = np.einsum("mcji,mcj->mci", axes[k], hit_m - model.positions[k]) / model.scales[k]
    np.put_along_axis(local, thin[k][:, :, None], 0.0, axis=2)
    ok &= ~flat | (np.sum(local * local, axis=2) <= cutoff * cutoff)
    best = np.argmin(np.where(ok, t, np.inf), axis=1)
    rows = np.arange(u.size)
    # a grazing first surface still hides what lies behind it
    keep = ok[rows, best] & ~grazing[rows, best]
    return frame, v, u, keep, t[rows, best], hit_m[rows, best]


def _render_nocs(model, T, K, nocs_aabb, dilation, cutoff, min_cos: float = NOCS_MIN_COS) -> Frame:
    """NOCS colours of the surface seen through each pixel; rejected pixels are black."""
    box = nocs_aabb if nocs_aabb is not None else model.aabb()
    frame, v, u, ok, _, hit_m = _surface_hits(model, T, K, box, dilation, cutoff, min_cos,
                                              colors=box.encode(model.positions))
    nocs = np.zeros_like(frame.rgb)
    nocs[v[ok], u[ok]] = box.encode(hit_m[ok])
    frame.rgb = nocs
    return frame


def observe(model: GaussianModel, T: RigidTransform, K: CameraIntrinsics, min_cos: float = 0.05, dilation: float = DILATION,
            cutoff: float = CUTOFF_SIGMA) -> Frame:
    """A noiseless sensor frame: rendered colour and coverage mask, depth of the surface itself.

    Pixels without a reliable surface hit carry depth 0 (no reading).
    """
    if len(model) == 0:
        raise ValueError("observe: empty model")
    frame, v, u, ok, t, _ = _surface_hits(model, T, K, model.aabb(), dilation, cutoff, min_cos)
    depth = np.zeros(frame.depth.shape)
    depth[v[ok], u[ok]] = t[ok]
    return Frame(frame.rgb, depth, frame.mask)


def _frame_from(model, pr, K):
    rgb, wdepth, acc, T_final, last, t_last = _composite(model, pr, K)
    mask = acc >= 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(mask, wdepth / acc, 0.0)
    frame = Frame(np.clip(rgb, 0.0, 1.0), depth, mask, acc, wdepth)
    return frame, (last, t_last)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


@dataclass
class RenderGrad:
    loss: LossResult
    frame: Frame
    pose_grad: np.ndarray | None
    sh_grad: np.ndarray | None


def _backward(model: GaussianModel, pr: _Projected, K: CameraIntrinsics, lres: LossResult, cache):
    last, t_last = cache
    g_uv, g_conic, g_color, g_depth = composite_backward(
        pr.order, pr.uv, pr.conic, model.opacities, pr.color, pr.p_c[:, 2].copy(), pr.bbox, pr.cut2,
        last, t_last, np.ascontiguousarray(lres.d_rgb), lres.d_wdepth, lres.d_alpha,
    )
    return g_uv, g_conic, g_color, g_depth


def _chain_to_camera(pr: _Projected, K: CameraIntrinsics, g_uv, g_conic, g_depth):
    """Per-Gaussian dL/dp_c (N, 3) and the summed dL/dR (3, 3)."""
    x, y, z = pr.p_c[:, 0], pr.p_c[:, 1], pr.p_c[:, 2]
    z = np.where(z > Z_NEAR, z, 1.0)
    # conic -> 2D covariance: d(Q)/d(S) = -Q dS Q
    G_Q = np.empty((len(z), 2, 2))
    G_Q[:, 0, 0] = g_conic[:, 0]
    G_Q[:, 1, 1] = g_conic[:, 2]
    G_Q[:, 0, 1] = G_Q[:, 1, 0] = 0.5 * g_conic[:, 1]
    Q = np.empty_like(G_Q)
    Q[:, 0, 0] = pr.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = pr.conic[:, 1]
    Q[:, 1, 1] = pr.conic[:, 2]
    G_S = -Q @ G_Q @ Q
    # S = J C J^T
    Jt = pr.J.transpose(0, 2, 1)
    G_C = Jt @ G_S @ pr.J
    G_J = 2.0 * G_S @ pr.J @ pr.cov_c

    g_p = np.zeros((len(z), 3))
    # projected mean
    g_p[:, 0] += g_uv[:, 0] * K.fx / z
    g_p[:, 1] += g_uv[:, 1] * K.fy / z
    g_p[:, 2] += -g_uv[:, 0] * K.fx * x / z**2 - g_uv[:, 1] * K.fy * y / z**2
    # depth channel
    g_p[:, 2] += g_depth
    # Jacobian entries
    g_p[:, 0] += G_J[:, 0, 2] * (-K.fx / z**2)
    g_p[:, 1] += G_J[:, 1, 2] * (-K.fy / z**2)
    g_p[:, 2] += (
        G_J[:, 0, 0] * (-K.fx / z**2)
        + G_J[:, 0, 2] * (2 * K.fx * x / z**3)
        + G_J[:, 1, 1] * (-K.fy / z**2)
        + G_J[:, 1, 2] * (2 * K.fy * y / z**3)
    )
    return g_p, G_C


def _color_grads(model: GaussianModel, pr: _Projected, g_color):
    """dL/dSH (N, 3, 16) and dL/d(camera centre in object frame) (3,)."""
    inside = (pr.color_raw > 0.0) & (pr.color_raw < 1.0)
    gc = g_color * inside
    g_sh = gc[:, :, None] * pr.basis[:, None, :]
    # colour depends on the viewing direction through degree >= 1 terms
    if np.any(model.sh[:, :, 1:]):
        dB = sh_basis_grad(pr.dirs)  # (N, 16, 3)
        g_dir = np.einsum("nc,nck,nkj->nj", gc, model.sh, dB)
        d = pr.dirs
        g_v = (g_dir - d * np.sum(g_dir * d, axis=1, keepdims=True)) / pr.dir_norm[:, None]
        g_center = -g_v.sum(axis=0)
    else:
        g_center = np.zeros(3)
    return g_sh, g_center


def render_and_grad(model: GaussianModel, T: RigidTransform, K: CameraIntrinsics, frame_obs: Frame,
                    weights: LossWeights = LossWeights(), side: str | None = "left", want_sh: bool = False,
                    dilation: float = DILATION, cutoff: float = CUTOFF_SIGMA) -> RenderGrad:
    """Render at ``T``, evaluate the loss against ``frame_obs`` and backpropagate.

    ``side`` selects the perturbation used for the pose gradient: ``"left"``
    (``exp(tau) T``) or ``"right"`` (``T exp(tau)``); None skips it.
    """
    pr = _project_all(model, T, K, dilation=dilation, cutoff=cutoff)
    frame, cache = _frame_from(model, pr, K)
    lres = loss(frame_obs, frame, weights.lam, weights.beta)
    if side is None and not want_sh:
        return RenderGrad(lres, frame, None, None)
    if pr.order.size == 0:
        raise ValueError("degenerate render: every Gaussian was culled")
    g_uv, g_conic, g_color, g_depth = _backward(model, pr, K, lres, cache)
    g_sh, g_center = _color_grads(model, pr, g_color)
    pose_grad = None
    if side is not None:
        g_p, G_C = _chain_to_camera(pr, K, g_uv, g_conic, g_depth)
        pose_grad = _pose_from_camera(model, pr, T, g_p, G_C, g_center, side)
    return RenderGrad(lres, frame, pose_grad, g_sh if want_sh else None)


def _pose_from_camera(model, pr, T: RigidTransform, g_p, G_C, g_center, side):
    R = T.R
    # Sigma_c = R Sigma_m R^T  =>  dL/dR = 2 sum_k G_k R Sigma_m,k  (G_k symmetric)
    G_R = 2.0 * np.einsum("nij,jk,nkl->il", G_C, R, pr.cov3)
    grad = np.zeros(6)
    if side == "left":
        Jp = lie.jac_point_left(pr.p_c.reshape(-1, 3))
        grad += np.einsum("ni,nij->j", g_p, Jp)
        grad[3:] += lie.rotation_grad_left(G_R, R)
        # camera centre o = -R^T t moves by -R^T rho under a left perturbation
        grad[:3] += -R @ g_center
    elif side == "right":
        Jp = lie.jac_point_right(T, model.positions.reshape(-1, 3))
        grad += np.einsum("ni,nij->j", g_p, Jp)
        grad[3:] += lie.rotation_grad_right(G_R, R)
        # o -> exp(-tau) o:  do/drho = -I, do/dphi = hat(o)
        o = pr.cam_center
        grad[:3] += -g_center
        grad[3:] += lie.hat3(o).T @ g_center
    else:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return grad


def pose_gradient(model, T, K, frame_obs, weights: LossWeights = LossWeights(), side: str = "left") -> np.ndarray:
    """Analytic dL/dtau at tau = 0 for the chosen perturbation side."""
    return render_and_grad(model, T, K, frame_obs, weights, side=side).pose_grad


def perturb(T: RigidTransform, tau, side: str) -> RigidTransform:
    if side == "left":
        return lie.exp_se3(tau) @ T
    if side == "right":
        return T @ lie.exp_se3(tau)
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def pose_gradient_fd(model, T, K, frame_obs, weights: LossWeights = LossWeights(), side: str = "left",
                     step: float = 1e-4) -> np.ndarray:
    """Central finite differences of render + loss over the six twist coordinates."""
    grad = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = step
        lp = render_loss(model, perturb(T, e, side), K, frame_obs, weights)
        lm = render_loss(model, perturb(T, -e, side), K, frame_obs, weights)
        grad[i] = (lp - lm) / (2 * step)
    return grad


def render_loss(model, T, K, frame_obs, weights: LossWeights = LossWeights()) -> float:
    return render_and_grad(model, T, K, frame_obs, weights, side=None).loss.value


__all__ = [
    "CameraIntrinsics", "Frame", "Splat2D", "T_MIN", "project_gaussian", "rasterize", "pose_gradient",
    "pose_gradient_fd", "render_and_grad", "render_loss", "perturb", "perspective_jacobian",
]
