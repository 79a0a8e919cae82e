"""Experiment plumbing shared by the command line and the acceptance suite.

An experiment is a model, a set of ground-truth views, a rule for producing
coarse poses (injected perturbations or a NOCS render fed to PnP) and a
refinement config.  Everything random is derived from one integer seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import lie
from .coarse import CoarseConfig, coarse_estimate
from .lie import RigidTransform
from .metrics import PoseError, Thresholds, diameter, pose_error
from .refine import RefineConfig, config_from_dict, parse_kv, refine_pipeline
from .render import CameraIntrinsics, Frame, rasterize, render_and_grad
from .scene import GaussianModel

INIT_MODES = ("perturb", "nocs")


@dataclass(frozen=True)
class PerturbSpec:
    rot_deg: float = 15.0  # upper bound of the rotation offset
    trans_frac: float = 0.1  # upper bound of the translation offset, as a fraction of the diameter
    depth_bias: float = 0.0  # relative offset along the optical axis

    def __post_init__(self):
        if min(self.rot_deg, self.trans_frac) < 0:
            raise ValueError("perturbation bounds must be non-negative")


@dataclass(frozen=True)
class Experiment:
    perturb: PerturbSpec = PerturbSpec()
    init: str = "perturb"
    nocs_noise: float = 0.01
    brightness: float = 0.0  # observed colours scaled by a factor in [1 - b, 1 + b]
    trials: int = 1  # per view
    seed: int = 0
    symmetric: bool = False
    accept: dict = field(default_factory=dict)  # report field -> minimum rate
    refine: RefineConfig = RefineConfig()
    coarse: CoarseConfig = CoarseConfig()

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0 <= self.brightness < 1:
            raise ValueError("brightness must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d, sort_keys=True, default=str))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_EXPERIMENT_KEYS = {
    "rot_deg": float, "trans_frac": float, "depth_bias": float, "init": str, "nocs_noise": float,
    "brightness": float, "trials": int, "seed": int, "symmetric": bool,
}
_COARSE_KEYS = {"nocs_threshold": ("threshold", float), "ransac_hypotheses": ("hypotheses", int),
                "ransac_inlier_px": ("inlier_px", float), "ransac_min_inliers": ("min_inliers", int)}


def experiment_from_kv(d: dict) -> Experiment:
    """Split a flat key/value mapping into experiment, coarse, acceptance and refine options."""
    exp, coarse, accept, refine = {}, {}, {}, {}
    for k, v in d.items():
        if k in _EXPERIMENT_KEYS:
            typ = _EXPERIMENT_KEYS[k]
            if typ is bool:
                exp[k] = str(v).strip().lower() in ("1", "true", "yes", "on")
            else:
                exp[k] = typ(v)
        elif k in _COARSE_KEYS:
            name, typ = _COARSE_KEYS[k]
            coarse[name] = typ(v)
        elif k.startswith("accept_"):
            accept[k[len("accept_"):]] = float(v)
        else:
            refine[k] = v
    perturb = PerturbSpec(exp.pop("rot_deg", 15.0), exp.pop("trans_frac", 0.1), exp.pop("depth_bias", 0.0))
    return Experiment(perturb=perturb, accept=accept, refine=config_from_dict(refine),
                      coarse=CoarseConfig(**coarse), **exp)


def load_experiment(path) -> Experiment:
    with open(path) as fh:
        return experiment_from_kv(parse_kv(fh.read()))


# ---------------------------------------------------------------------------
# views and perturbations
# ---------------------------------------------------------------------------


def standard_camera(width: int = 128, height: int = 128, fov_deg: float = 40.0) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(width, height, fov_deg)


def view_poses(n: int, seed: int = 0, distance: float = 0.5, lateral: float = 0.02) -> list:
    """``n`` object-to-camera poses with uniformly random orientation in front of the camera."""
    rng = np.random.default_rng(seed)
    Rs = Rotation.random(n, random_state=rng).as_matrix().reshape(n, 3, 3)
    out = []
    for R in Rs:
        t = np.array([*rng.normal(scale=lateral, size=2), distance])
        out.append(RigidTransform(R, t))
    return out


def random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_pose(T_gt: RigidTransform, rng, spec: PerturbSpec, diameter_m: float) -> RigidTransform:
    """Rotate about the object origin by up to ``rot_deg``, shift by up to ``trans_frac``
    of the diameter, then push along the optical axis by ``depth_bias``."""
    ang = math.radians(rng.uniform(0.0, spec.rot_deg))
    R = T_gt.R @ lie.exp_so3(random_unit(rng) * ang)
    t = T_gt.t + random_unit(rng) * rng.uniform(0.0, spec.trans_frac * diameter_m)
    t = t + np.array([0.0, 0.0, spec.depth_bias * T_gt.t[2]])
    return RigidTransform(R, t)


def rebrighten(frame: Frame, factor: float) -> Frame:
    return dataclasses.replace(frame, rgb=np.clip(frame.rgb * factor, 0.0, 1.0))


def noisy_nocs(nocs: Frame, rng, sigma: float) -> Frame:
    if sigma <= 0:
        return nocs
    rgb = nocs.rgb + rng.normal(scale=sigma, size=nocs.rgb.shape) * nocs.mask[:, :, None]
    return dataclasses.replace(nocs, rgb=np.clip(rgb, 0.0, 1.0))


def trial_rng(seed: int, view_index: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, view_index, trial]))


# ---------------------------------------------------------------------------
# running one trial
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    frame_id: str
    trial: int
    status: str  # "ok" | "failed"
    T_gt: RigidTransform | None = None
    T_coarse: RigidTransform | None = None
    T_precise: RigidTransform | None = None
    stage_poses: dict = field(default_factory=dict)
    error: PoseError | None = None
    coarse_error: PoseError | None = None
    final_loss: float = float("nan")
    photometric: float = float("nan")
    icp_reason: str = ""
    message: str = ""
    trace_jsonl: str = ""
    final_render: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        def pose(T):
            return None if T is None else np.round(T.matrix(), 12).tolist()

        return {
            "frame_id": self.frame_id,
            "trial": self.trial,
            "status": self.status,
            "T_gt": pose(self.T_gt),
            "T_coarse": pose(self.T_coarse),
            "T_precise": pose(self.T_precise),
            "stages": {k: pose(v) for k, v in self.stage_poses.items()},
            "error": None if self.error is None else _round(self.error.to_dict()),
            "coarse_error": None if self.coarse_error is None else _round(self.coarse_error.to_dict()),
            "final_loss": _r(self.final_loss),
            "photometric": _r(self.photometric),
            "icp": self.icp_reason,
            "message": self.message,
        }


def _r(x, nd=10):
    return None if x is None or not np.isfinite(x) else round(float(x), nd)


def _round(d: dict) -> dict:
    return {k: _r(v) for k, v in d.items()}


def coarse_pose(model: GaussianModel, T_gt: RigidTransform, K: CameraIntrinsics, exp: Experiment, rng,
                diameter_m: float, nocs: Frame | None = None) -> RigidTransform:
    if exp.init == "perturb":
        return perturb_pose(T_gt, rng, exp.perturb, diameter_m)
    if nocs is None:
        nocs = rasterize(model, T_gt, K, mode="nocs")
    nocs = noisy_nocs(nocs, rng, exp.nocs_noise)
    cfg = dataclasses.replace(exp.coarse, seed=int(rng.integers(2**31)))
    return coarse_estimate(model, nocs, K, cfg).pose


def run_trial(model: GaussianModel, frame: Frame, K: CameraIntrinsics, T_gt: RigidTransform, exp: Experiment,
              frame_id: str, view_index: int, trial: int = 0, diameter_m: float | None = None,
              nocs: Frame | None = None, refine_cfg: RefineConfig | None = None, keep_render: bool = False) -> TrialResult:
    """Coarse pose, refinement, errors.  Failures are captured, never raised."""
    rng = trial_rng(exp.seed, view_index, trial)
    dia = diameter(model.positions) if diameter_m is None else diameter_m
    cfg = refine_cfg or exp.refine
    res = TrialResult(frame_id, trial, "failed", T_gt=T_gt)
    try:
        if exp.brightness > 0:
            frame = rebrighten(frame, rng.uniform(1 - exp.brightness, 1 + exp.brightness))
        T0 = coarse_pose(model, T_gt, K, exp, rng, dia, nocs)
        res.T_coarse = T0
        res.coarse_error = pose_error(model.positions, T_gt, T0)
        out = refine_pipeline(model, frame, K, T0, cfg)
        res.T_precise = out.pose
        res.stage_poses = out.stage_poses
        res.error = pose_error(model.positions, T_gt, out.pose)
        final = render_and_grad(out.model, out.pose, K, frame, cfg.weights, side=None)
        res.final_loss = final.loss.value
        res.photometric = final.loss.photometric
        res.icp_reason = out.icp.reason if out.icp is not None else "disabled"
        res.trace_jsonl = out.trace.to_jsonl()
        if keep_render:
            res.final_render = final.frame.rgb
        res.status = "ok" if not out.errors else "failed"
        res.message = "; ".join(f"{k}: {v}" for k, v in out.errors.items())
    except (ValueError, np.linalg.LinAlgError) as exc:
        res.message = str(exc)
    return res


# ---------------------------------------------------------------------------
# ablation rows
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    ("coarse", dict(gs_icp_enabled=False, camera_enabled=False, object_enabled=False, gs_light_enabled=False)),
    ("+gs_icp", dict(gs_icp_enabled=True, camera_enabled=False, object_enabled=False, gs_light_enabled=False)),
    ("+gs_icp+camera", dict(gs_icp_enabled=True, camera_enabled=True, object_enabled=False, gs_light_enabled=False)),
    ("+gs_icp+object", dict(gs_icp_enabled=True, camera_enabled=False, object_enabled=True, gs_light_enabled=False)),
    ("+camera+object", dict(gs_icp_enabled=False, camera_enabled=True, object_enabled=True, gs_light_enabled=False)),
    ("+gs_icp+camera+object", dict(gs_icp_enabled=True, camera_enabled=True, object_enabled=True, gs_light_enabled=False)),
    ("full", dict(gs_icp_enabled=True, camera_enabled=True, object_enabled=True, gs_light_enabled=True)),
)


def ablation_configs(base: RefineConfig) -> list:
    return [(label, base.replace(**toggles), toggles) for label, toggles in ABLATION_ROWS]
