"""Render-and-compare pose refinement.

Three stages run in a fixed order:

1. GS-ICP corrects the coarse pose along the viewing direction.
2. The camera stage moves the pose by left twists ``exp(tau) T`` (motion
   expressed in the camera frame).
3. The object stage moves it by right twists ``T exp(tau)`` (motion about
   the object's own origin).  When GS-light is enabled every pose step is
   followed by one step on the model's spherical-harmonic coefficients, so
   the colours can follow the scene illumination while the geometry stays
   locked.  By default the step goes through a per-channel illumination
   gain shared by all splats; free per-coefficient steps can repaint the
   texture to match a misaligned view and stall the pose.

Each stage keeps the best pose seen so far, so its output never has a
higher loss than its input.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import lie
from .losses import LossWeights
from .registration import GsIcpConfig, GsIcpResult, gs_icp
from .render import CameraIntrinsics, Frame, render_and_grad
from .scene import SH_C0, SH_OFFSET, GaussianModel

log = logging.getLogger(__name__)

STAGES = ("gs_icp", "camera", "object")


GS_LIGHT_MODES = ("gain", "free")


@dataclass(frozen=True)
class RefineConfig:
    learning_rate: float = 0.001
    total_iters: int = 175
    camera_iters: int = 75
    object_iters: int = 100
    lam: float = 0.8
    beta: float = 0.1
    gs_light_enabled: bool = True
    gs_light_mode: str = "gain"  # "gain": shared per-channel gain; "free": every coefficient
    sh_learning_rate: float = 0.02
    gain_learning_rate: float = 0.01
    convergence_tol: float = 1e-7
    patience: int = 5
    gs_icp_enabled: bool = True
    camera_enabled: bool = True
    object_enabled: bool = True
    camera_rotation_only: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    icp_max_iters: int = 50
    icp_tol: float = 1e-6
    ray_stride: int = 2
    ray_epsilon_fraction: float = 0.005

    def __post_init__(self):
        if min(self.learning_rate, self.sh_learning_rate, self.gain_learning_rate) <= 0:
            raise ValueError("learning rates must be positive")
        if self.gs_light_mode not in GS_LIGHT_MODES:
            raise ValueError(f"gs_light_mode must be one of {GS_LIGHT_MODES}")
        if min(self.total_iters, self.camera_iters, self.object_iters) < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.camera_iters + self.object_iters != self.total_iters:
            raise ValueError("camera_iters + object_iters must equal total_iters")

    @classmethod
    def with_total(cls, total: int, **kwargs) -> "RefineConfig":
        """Config with ``total`` iterations split 3:4 between the camera and object stages."""
        cam = int(round(total * 75 / 175))
        return cls(total_iters=total, camera_iters=cam, object_iters=total - cam, **kwargs)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.beta)

    def gs_icp_config(self) -> GsIcpConfig:
        return GsIcpConfig(epsilon_fraction=self.ray_epsilon_fraction, pixel_stride=self.ray_stride,
                           max_iters=self.icp_max_iters, tol=self.icp_tol)

    def replace(self, **kwargs) -> "RefineConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# config files: flat key = value, '#' comments
# ---------------------------------------------------------------------------


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_kv(text: str) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_dict(d: dict, base: RefineConfig | None = None) -> RefineConfig:
    base = base or RefineConfig()
    types = {f.name: f.type for f in dataclasses.fields(RefineConfig)}
    kwargs = {}
    for k, v in d.items():
        if k not in types:
            raise ValueError(f"unknown refine option {k!r}")
        kwargs[k] = _parse_value(v, types[k]) if isinstance(v, str) else v
    if "total_iters" in kwargs and "camera_iters" not in kwargs and "object_iters" not in kwargs:
        total = kwargs.pop("total_iters")
        fields = {**base.to_dict(), **kwargs}
        for key in ("total_iters", "camera_iters", "object_iters"):
            fields.pop(key)
        return RefineConfig.with_total(total, **fields)
    return base.replace(**kwargs)


def load_config(path) -> RefineConfig:
    with open(path) as fh:
        return config_from_dict(parse_kv(fh.read()))


def dump_config(cfg: RefineConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.to_dict().items())


# ---------------------------------------------------------------------------
# optimiser and trace
# ---------------------------------------------------------------------------


class Adam:
    """Adam moment estimates over an array of any shape; ``step`` returns the update."""

    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TraceRecord:
    stage: str
    iteration: int
    loss: float
    photometric: float
    step_norm: float
    sh_updated: bool
    best_loss: float


@dataclass
class RefineTrace:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)  # stage-level notes (fallbacks, errors)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def extend(self, other: "RefineTrace") -> None:
        self.records.extend(other.records)
        self.events.extend(other.events)

    def stage(self, name: str) -> list:
        return [r for r in self.records if r.stage == name]

    def losses(self, stage: str | None = None) -> np.ndarray:
        recs = self.records if stage is None else self.stage(stage)
        return np.array([r.loss for r in recs])

    def to_jsonl(self, path=None) -> str:
        lines = [json.dumps(dataclasses.asdict(r)) for r in self.records]
        lines += [json.dumps({"event": e}) for e in self.events]
        text = "\n".join(lines) + ("\n" if lines else "")
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# GS-light
# ---------------------------------------------------------------------------


class GainLight:
    """Per-channel illumination gain applied to the radiance of every splat.

    Scaling radiance ``SH_C0 * c0 + SH_OFFSET + (higher bands)`` by ``g``
    maps the coefficients of the base model to
    ``c0' = g * c0 + (g - 1) * SH_OFFSET / SH_C0`` and ``c_l' = g * c_l``,
    so the SH gradient contracts to three numbers.  Use it in place of an
    ``Adam`` optimiser in ``gs_light_step``.
    """

    def __init__(self, base: GaussianModel, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.base = np.array(base.sh, dtype=float)
        self.gain = np.ones(3)
        self.opt = Adam(3, lr, beta1, beta2, eps)

    def sh(self) -> np.ndarray:
        out = self.base * self.gain[None, :, None]
        out[:, :, 0] += (self.gain - 1.0) * SH_OFFSET / SH_C0
        return out

    def grad(self, sh_grad: np.ndarray) -> np.ndarray:
        return np.einsum("kcl,kcl->c", sh_grad, self.base) + sh_grad[:, :, 0].sum(axis=0) * SH_OFFSET / SH_C0

    def step(self, sh_grad: np.ndarray) -> np.ndarray:
        self.gain = self.gain + self.opt.step(self.grad(sh_grad))
        return self.sh()


def gs_light_step(model: GaussianModel, frame: Frame, K: CameraIntrinsics, T: lie.RigidTransform,
                  lr: float = 0.02, optimizer: Adam | GainLight | None = None,
                  weights: LossWeights = LossWeights(), sh_grad: np.ndarray | None = None) -> GaussianModel:
    """One step on the SH coefficients; geometry arrays are passed through untouched.

    With an ``Adam`` optimiser (the default) every coefficient moves freely;
    with a ``GainLight`` all of them follow its shared gain.  Pass the same
    optimiser across calls to keep its state.  ``sh_grad`` skips the render
    when the gradient is already known.
    """
    if sh_grad is None:
        sh_grad = render_and_grad(model, T, K, frame, weights, side=None, want_sh=True).sh_grad
    if optimizer is None:
        optimizer = Adam(model.sh.shape, lr)
    if isinstance(optimizer, GainLight):
        return model.with_sh(optimizer.step(sh_grad))
    return model.with_sh(model.sh + optimizer.step(sh_grad))


def light_optimizer(model: GaussianModel, cfg: "RefineConfig") -> Adam | GainLight:
    if cfg.gs_light_mode == "gain":
        return GainLight(model, cfg.gain_learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return Adam(model.sh.shape, cfg.sh_learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# pose stages
# ---------------------------------------------------------------------------


def _run_stage(stage: str, model: GaussianModel, frame: Frame, K: CameraIntrinsics, T_in: lie.RigidTransform,
               cfg: RefineConfig, iters: int, side: str, light: bool):
    weights = cfg.weights
    opt = Adam(6, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    sh_opt = light_optimizer(model, cfg) if light else None
    trace = RefineTrace()
    T = T_in
    best_T, best_loss = T_in, np.inf
    quiet = 0
    for it in range(iters):
        rg = render_and_grad(model, T, K, frame, weights, side=side, want_sh=light)
        val = rg.loss.value
        if val < best_loss:
            best_T, best_loss = T, val
        grad = rg.pose_grad
        if stage == "camera" and cfg.camera_rotation_only:
            grad = np.concatenate([np.zeros(3), grad[3:]])
        step = opt.step(grad)
        if stage == "camera" and cfg.camera_rotation_only:
            step[:3] = 0.0
        T = lie.exp_se3(step) @ T if side == "left" else T @ lie.exp_se3(step)
        if light:
            model = gs_light_step(model, frame, K, T, optimizer=sh_opt, sh_grad=rg.sh_grad)
        norm = float(np.linalg.norm(step))
        trace.append(TraceRecord(stage, it, val, rg.loss.photometric, norm, light, best_loss))
        quiet = quiet + 1 if norm < cfg.convergence_tol else 0
        if quiet >= cfg.patience:
            break
    if iters > 0:
        # the last step has not been scored yet
        val = render_and_grad(model, T, K, frame, weights, side=None).loss.value
        if val < best_loss:
            best_T, best_loss = T, val
    return best_T, trace, model


def camera_refine(model: GaussianModel, frame: Frame, K: CameraIntrinsics, T_in: lie.RigidTransform,
                  cfg: RefineConfig = RefineConfig()):
    """Left-perturbation stage; returns ``(T_out, trace)``."""
    T, trace, _ = _run_stage("camera", model, frame, K, T_in, cfg, cfg.camera_iters, "left", False)
    return T, trace


def object_refine(model: GaussianModel, frame: Frame, K: CameraIntrinsics, T_in: lie.RigidTransform,
                  cfg: RefineConfig = RefineConfig(), return_model: bool = False):
    """Right-perturbation stage with optional GS-light; returns ``(T_out, trace[, model])``."""
    T, trace, adapted = _run_stage("object", model, frame, K, T_in, cfg, cfg.object_iters, "right",
                                   cfg.gs_light_enabled)
    return (T, trace, adapted) if return_model else (T, trace)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    pose: lie.RigidTransform
    trace: RefineTrace
    stage_poses: dict
    model: GaussianModel
    icp: GsIcpResult | None = None
    errors: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return float(self.trace.records[-1].best_loss) if self.trace.records else float("nan")


def _render_loss(model, frame, K, T, cfg) -> float:
    return render_and_grad(model, T, K, frame, cfg.weights, side=None).loss.value


def refine_pipeline(model: GaussianModel, frame: Frame, K: CameraIntrinsics, T_coarse: lie.RigidTransform,
                    cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """GS-ICP, then the camera stage, then the object stage (with GS-light).

    A stage that fails leaves the pose from the previous stage in place and
    records the error under its name.  GS-light works on a private copy of
    the SH coefficients; the caller's model is never modified.
    """
    trace = RefineTrace()
    poses = {"coarse": T_coarse}
    errors = {}
    T = T_coarse
    icp_res = None
    if cfg.gs_icp_enabled:
        try:
            icp_res = gs_icp(model, frame, K, T, cfg.gs_icp_config())
            if icp_res.diverged:
                trace.events.append(f"gs_icp: {icp_res.reason}")
            elif _render_loss(model, frame, K, icp_res.pose, cfg) > _render_loss(model, frame, K, T, cfg):
                # rendered depth and the centre cloud disagree by a few mm; never trade image fit for that
                trace.events.append("gs_icp: correction raised the render loss, kept the coarse pose")
                icp_res = dataclasses.replace(icp_res, pose=T, reason="render loss increased")
            else:
                T = icp_res.pose
        except ValueError as exc:
            errors["gs_icp"] = str(exc)
            trace.events.append(f"gs_icp failed: {exc}")
    poses["gs_icp"] = T
    if cfg.camera_enabled and cfg.camera_iters > 0:
        try:
            T, t_cam = camera_refine(model, frame, K, T, cfg)
            trace.extend(t_cam)
        except ValueError as exc:
            errors["camera"] = str(exc)
            trace.events.append(f"camera failed: {exc}")
    poses["camera"] = T
    adapted = model
    if cfg.object_enabled and cfg.object_iters > 0:
        try:
            T, t_obj, adapted = object_refine(model, frame, K, T, cfg, return_model=True)
            trace.extend(t_obj)
        except ValueError as exc:
            errors["object"] = str(exc)
            trace.events.append(f"object failed: {exc}")
    poses["object"] = T
    for name, err in errors.items():
        log.warning("refine stage %s failed: %s", name, err)
    return RefineResult(T, trace, poses, adapted, icp_res, errors)
