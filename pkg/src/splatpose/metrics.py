"""Pose error metrics: ADD, ADD-S, rotation/translation error, success rates."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist

from . import lie
from .lie import RigidTransform

EXACT_DIAMETER_MAX = 5000


@dataclass(frozen=True)
class PoseError:
    rotation_deg: float
    translation_m: float
    add: float = float("nan")
    add_s: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Thresholds:
    add_fraction: float = 0.1  # of the model diameter
    rotation_deg: float = 5.0
    translation_m: float = 0.01


def _points(points_m) -> np.ndarray:
    pts = getattr(points_m, "points", points_m)
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty point cloud")
    return pts


def add(points_m, T_gt: RigidTransform, T_est: RigidTransform) -> float:
    """Mean distance between corresponding model points under both poses."""
    p = _points(points_m)
    return float(np.linalg.norm(T_gt.apply(p) - T_est.apply(p), axis=1).mean())


def add_s(points_m, T_gt: RigidTransform, T_est: RigidTransform) -> float:
    """Mean distance from each ground-truth point to the closest estimated point."""
    p = _points(points_m)
    d, _ = cKDTree(T_est.apply(p)).query(T_gt.apply(p))
    return float(d.mean())


def pose_errors(T_gt: RigidTransform, T_est: RigidTransform) -> tuple[float, float]:
    """Geodesic rotation error in degrees and translation error in metres."""
    rot = math.degrees(lie.rotation_angle(T_gt.R.T @ T_est.R))
    return rot, float(np.linalg.norm(T_gt.t - T_est.t))


def pose_error(points_m, T_gt: RigidTransform, T_est: RigidTransform) -> PoseError:
    rot, trans = pose_errors(T_gt, T_est)
    return PoseError(rot, trans, add(points_m, T_gt, T_est), add_s(points_m, T_gt, T_est))


def diameter(points_m) -> float:
    """Largest pairwise distance.  Beyond a few thousand points only hull vertices are compared."""
    p = _points(points_m)
    if len(p) < 2:
        return 0.0
    if len(p) > EXACT_DIAMETER_MAX:
        try:
            p = p[ConvexHull(p).vertices]
        except QhullError:
            pass
    return float(pdist(p).max())


def angular_histogram(rotation_deg, bin_deg: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Counts in bins ``[k, k+1) * bin_deg`` covering every sample; returns (edges, counts)."""
    r = np.asarray(rotation_deg, dtype=float)
    top = max(1, int(math.floor(r.max() / bin_deg)) + 1) if r.size else 1
    edges = np.arange(top + 1) * bin_deg
    idx = np.minimum((r // bin_deg).astype(int), top - 1)
    counts = np.bincount(idx, minlength=top)
    return edges, counts


@dataclass
class SuccessReport:
    n: int
    add_rate: float
    rot_rate: float
    rot_trans_rate: float
    diameter: float
    thresholds: Thresholds
    symmetric: bool
    hist_edges: list = field(default_factory=list)
    hist_counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = asdict(self.thresholds)
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def histogram_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lo_deg", "hi_deg", "count"])
            for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts):
                w.writerow([lo, hi, c])


def success_report(errors, diameter_m: float, thresholds: Thresholds = Thresholds(),
                   symmetric: bool = False) -> SuccessReport:
    """Fractions of errors strictly below each threshold, plus a 1-degree histogram.

    The ADD criterion uses ADD-S when ``symmetric`` is set.
    """
    errors = list(errors)
    if not errors:
        raise ValueError("success_report needs at least one error")
    rot = np.array([e.rotation_deg for e in errors])
    trans = np.array([e.translation_m for e in errors])
    dist = np.array([e.add_s if symmetric else e.add for e in errors])
    add_ok = dist < thresholds.add_fraction * diameter_m
    rot_ok = rot < thresholds.rotation_deg
    both = rot_ok & (trans < thresholds.translation_m)
    edges, counts = angular_histogram(rot)
    return SuccessReport(
        n=len(errors),
        add_rate=float(add_ok.mean()),
        rot_rate=float(rot_ok.mean()),
        rot_trans_rate=float(both.mean()),
        diameter=float(diameter_m),
        thresholds=thresholds,
        symmetric=symmetric,
        hist_edges=edges.tolist(),
        hist_counts=counts.tolist(),
    )
