"""Photometric + depth loss with per-pixel gradients.

loss = lam * L1 + (1 - lam) * DSSIM + beta * L_depth

* L1 and DSSIM compare the rendered colour with the observation over the
  whole image.  The renderer composites on black, so observations are
  expected on a black background (see ``mask_background``).
* DSSIM = (1 - SSIM) / 2 with an 11x11 Gaussian window, sigma 1.5.
* L_depth averages ``alpha * |depth_pred - depth_obs|`` over observation
  pixels with valid depth.  Weighting by the rendered coverage keeps the term
  continuous where the silhouette moves.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
WINDOW = 11
WINDOW_SIGMA = 1.5


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.8
    beta: float = 0.1


@dataclass
class LossResult:
    value: float
    terms: dict
    d_rgb: np.ndarray
    d_wdepth: np.ndarray
    d_alpha: np.ndarray

    @property
    def photometric(self) -> float:
        return self.terms["photometric"]


def _gauss_kernel() -> np.ndarray:
    x = np.arange(WINDOW) - WINDOW // 2
    g = np.exp(-(x**2) / (2 * WINDOW_SIGMA**2))
    return g / g.sum()


_KERNEL = _gauss_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # separable window with zero padding; the kernel is symmetric so this
    # operator is its own adjoint
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def _support(x: np.ndarray, y: np.ndarray, pad: int):
    """Bounding slices of the pixels where either image is non-zero, grown by ``pad``."""
    nz = np.any(x != 0, axis=-1) | np.any(y != 0, axis=-1)
    rows = np.nonzero(nz.any(axis=1))[0]
    cols = np.nonzero(nz.any(axis=0))[0]
    if rows.size == 0:
        return None
    h, w = nz.shape
    return (slice(max(rows[0] - pad, 0), min(rows[-1] + pad + 1, h)),
            slice(max(cols[0] - pad, 0), min(cols[-1] + pad + 1, w)))


def ssim(x: np.ndarray, y: np.ndarray, return_grad: bool = False):
    """Mean SSIM of two (H, W) or (H, W, C) images; optional gradient w.r.t. ``y``.

    Where both images are zero the SSIM map is exactly 1 and the gradient
    vanishes, so only the joint support (plus two window radii) is evaluated.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("ssim: shape mismatch")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
        y = y[:, :, None]
    n_total = x.size
    grad = np.zeros_like(y)
    roi = _support(x, y, 2 * (WINDOW // 2))
    if roi is None:
        value = 1.0
    else:
        xs, ys = x[roi], y[roi]
        smap, g = _ssim_core(xs, ys, return_grad)
        value = float((smap.sum() + (n_total - smap.size)) / n_total)
        if return_grad:
            grad[roi] = g * (smap.size / n_total)
    if not return_grad:
        return value
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


def _ssim_core(x, y, return_grad):
    mu_x = _blur(x)
    mu_y = _blur(y)
    exx = _blur(x * x)
    eyy = _blur(y * y)
    exy = _blur(x * y)
    sxx = exx - mu_x * mu_x
    syy = eyy - mu_y * mu_y
    sxy = exy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    if not return_grad:
        return smap, None
    n = smap.size
    d_mu = 2 * smap * (mu_x * (1 / a1 - 1 / a2) - mu_y * (1 / b1 - 1 / b2))
    d_eyy = -smap / b2
    d_exy = 2 * smap / a2
    grad = (_blur(d_mu) + 2 * y * _blur(d_eyy) + x * _blur(d_exy)) / n
    return smap, grad


def loss(frame_obs, frame_pred, lam: float = 0.8, beta: float = 0.1) -> LossResult:
    """Scalar loss and its gradients w.r.t. the rendered rgb, weighted depth and alpha.

    ``frame_pred`` should be a rendered frame (carrying ``alpha`` and
    ``wdepth``); plain frames fall back to their mask as coverage.
    """
    obs_rgb = np.asarray(frame_obs.rgb, dtype=float)
    pred_rgb = np.asarray(frame_pred.rgb, dtype=float)
    if obs_rgb.shape != pred_rgb.shape or frame_obs.depth.shape != frame_pred.depth.shape:
        raise ValueError("loss: frame size mismatch")
    h, w = obs_rgb.shape[:2]

    diff = pred_rgb - obs_rgb
    l1 = float(np.abs(diff).mean())
    d_l1 = np.sign(diff) / diff.size

    s, d_s = ssim(obs_rgb, pred_rgb, return_grad=True)
    dssim = (1.0 - s) / 2.0
    d_dssim = -0.5 * d_s

    alpha, wdepth = _coverage(frame_pred)
    obs_depth = np.asarray(frame_obs.depth, dtype=float)
    valid = obs_depth > 0
    if frame_obs.mask is not None:
        valid &= frame_obs.mask.astype(bool)
    n_valid = int(valid.sum())
    d_wdepth = np.zeros((h, w))
    d_alpha = np.zeros((h, w))
    if n_valid and beta != 0.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            pred_depth = np.where(alpha > 0, wdepth / alpha, 0.0)
        r = np.where(valid, pred_depth - obs_depth, 0.0)
        l_depth = float((alpha * np.abs(r)).sum() / n_valid)
        sgn = np.sign(r) * valid
        d_wdepth = sgn / n_valid
        # alpha * |wdepth / alpha - obs| = |wdepth - alpha * obs| for alpha > 0
        d_alpha = -sgn * obs_depth / n_valid
    else:
        l_depth = 0.0

    photometric = lam * l1 + (1 - lam) * dssim
    value = photometric + beta * l_depth
    return LossResult(
        value=float(value),
        terms={"l1": l1, "dssim": dssim, "depth": l_depth, "photometric": float(photometric)},
        d_rgb=lam * d_l1 + (1 - lam) * d_dssim,
        d_wdepth=beta * d_wdepth,
        d_alpha=beta * d_alpha,
    )


def mask_background(frame):
    """Copy of an observed frame with colour and depth zeroed outside its mask."""
    if frame.mask is None:
        return frame
    m = frame.mask.astype(bool)
    return replace(frame, rgb=frame.rgb * m[:, :, None], depth=np.where(m, frame.depth, 0.0))


def _coverage(frame):
    alpha = getattr(frame, "alpha", None)
    wdepth = getattr(frame, "wdepth", None)
    if alpha is None or wdepth is None:
        mask = frame.mask if frame.mask is not None else frame.depth > 0
        alpha = mask.astype(float)
        wdepth = frame.depth * alpha
    return np.asarray(alpha, dtype=float), np.asarray(wdepth, dtype=float)
