"""Image and pose files.

* RGB and NOCS: 8-bit PNG.
* Depth: 16-bit PNG in millimetres (0 = no depth).
* Masks: 8-bit PNG with values {0, 255}.
* Poses: JSON, object-to-camera 4x4 matrices under the key ``T_m_c``.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .lie import RigidTransform
from .render import CameraIntrinsics, Frame

POSE_KEY = "T_m_c"


def _ensure_dir(path) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, rgb) -> None:
    _ensure_dir(path)
    Image.fromarray(to_uint8(rgb)).save(path)


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def save_depth(path, depth_m) -> None:
    _ensure_dir(path)
    mm = np.clip(np.rint(np.asarray(depth_m, dtype=float) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 1000.0


def save_mask(path, mask) -> None:
    _ensure_dir(path)
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def frame_paths(root, frame_id: str) -> dict:
    return {k: os.path.join(root, f"{frame_id}_{k}.png") for k in ("rgb", "depth", "mask", "nocs")}


def save_frame(root, frame_id: str, frame: Frame, nocs: Frame | None = None) -> dict:
    paths = frame_paths(root, frame_id)
    save_rgb(paths["rgb"], frame.rgb)
    save_depth(paths["depth"], frame.depth)
    save_mask(paths["mask"], frame.mask if frame.mask is not None else frame.depth > 0)
    if nocs is not None:
        save_rgb(paths["nocs"], nocs.rgb)
    return paths


def load_frame(root, frame_id: str) -> Frame:
    """Observed frame with colour and depth zeroed outside the mask."""
    paths = frame_paths(root, frame_id)
    rgb = load_rgb(paths["rgb"])
    depth = load_depth(paths["depth"])
    mask = load_mask(paths["mask"]) if os.path.exists(paths["mask"]) else depth > 0
    return Frame(rgb * mask[:, :, None], np.where(mask, depth, 0.0), mask)


def load_nocs(root, frame_id: str) -> Frame:
    paths = frame_paths(root, frame_id)
    rgb = load_rgb(paths["nocs"])
    mask = load_mask(paths["mask"]) if os.path.exists(paths["mask"]) else rgb.max(axis=2) > 0
    return Frame(rgb, np.zeros(rgb.shape[:2]), mask)


def pose_to_json(T: RigidTransform) -> list:
    return T.matrix().tolist()


def pose_from_json(m) -> RigidTransform:
    return RigidTransform.from_matrix(np.asarray(m, dtype=float))


def save_poses(path, intrinsics: CameraIntrinsics, frames: dict, extra: dict | None = None) -> None:
    """``frames`` maps frame id to object-to-camera pose."""
    doc = {
        "intrinsics": intrinsics.to_dict(),
        "frames": [{"id": fid, POSE_KEY: pose_to_json(T)} for fid, T in sorted(frames.items())],
    }
    if extra:
        doc.update(extra)
    _ensure_dir(path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_poses(path):
    """Returns ``(intrinsics, {frame_id: pose}, document)``."""
    with open(path) as fh:
        doc = json.load(fh)
    K = CameraIntrinsics.from_dict(doc["intrinsics"])
    frames = {f["id"]: pose_from_json(f[POSE_KEY]) for f in doc["frames"]}
    return K, frames, doc


def write_json(path, obj) -> None:
    _ensure_dir(path)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
