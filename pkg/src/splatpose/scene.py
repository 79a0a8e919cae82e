"""Gaussian-splat object models.

A model stores, per Gaussian, its object-frame mean, a unit (w, x, y, z)
rotation quaternion, linear per-axis scales, an opacity in [0, 1] and 16 real
spherical-harmonic coefficients per RGB channel (degrees 0..3).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .lie import RigidTransform, quat_to_rotmat, rotmat_to_quat

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
SH_COEFFS = 16
SH_OFFSET = 0.5


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------


def sh_basis(dirs) -> np.ndarray:
    """Real SH basis up to degree 3 for unit directions, shape (N, 16)."""
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    B = np.empty((d.shape[0], SH_COEFFS))
    B[:, 0] = SH_C0
    B[:, 1] = -SH_C1 * y
    B[:, 2] = SH_C1 * z
    B[:, 3] = -SH_C1 * x
    B[:, 4] = SH_C2[0] * x * y
    B[:, 5] = SH_C2[1] * y * z
    B[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
    B[:, 7] = SH_C2[3] * x * z
    B[:, 8] = SH_C2[4] * (xx - yy)
    B[:, 9] = SH_C3[0] * y * (3 * xx - yy)
    B[:, 10] = SH_C3[1] * x * y * z
    B[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    B[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    B[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    B[:, 14] = SH_C3[5] * z * (xx - yy)
    B[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return B


def sh_basis_grad(dirs) -> np.ndarray:
    """Partial derivatives of ``sh_basis`` w.r.t. (x, y, z), shape (N, 16, 3).

    The basis is treated as a polynomial in the direction components; the
    caller chains through the normalisation.
    """
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    G = np.zeros((d.shape[0], SH_COEFFS, 3))
    G[:, 1, 1] = -SH_C1
    G[:, 2, 2] = SH_C1
    G[:, 3, 0] = -SH_C1
    G[:, 4, 0] = SH_C2[0] * y
    G[:, 4, 1] = SH_C2[0] * x
    G[:, 5, 1] = SH_C2[1] * z
    G[:, 5, 2] = SH_C2[1] * y
    G[:, 6, 0] = SH_C2[2] * (-2 * x)
    G[:, 6, 1] = SH_C2[2] * (-2 * y)
    G[:, 6, 2] = SH_C2[2] * (4 * z)
    G[:, 7, 0] = SH_C2[3] * z
    G[:, 7, 2] = SH_C2[3] * x
    G[:, 8, 0] = SH_C2[4] * (2 * x)
    G[:, 8, 1] = SH_C2[4] * (-2 * y)
    G[:, 9, 0] = SH_C3[0] * 6 * x * y
    G[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
    G[:, 10, 0] = SH_C3[1] * y * z
    G[:, 10, 1] = SH_C3[1] * x * z
    G[:, 10, 2] = SH_C3[1] * x * y
    G[:, 11, 0] = SH_C3[2] * (-2 * x * y)
    G[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
    G[:, 11, 2] = SH_C3[2] * (8 * y * z)
    G[:, 12, 0] = SH_C3[3] * (-6 * x * z)
    G[:, 12, 1] = SH_C3[3] * (-6 * y * z)
    G[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
    G[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
    G[:, 13, 1] = SH_C3[4] * (-2 * x * y)
    G[:, 13, 2] = SH_C3[4] * (8 * x * z)
    G[:, 14, 0] = SH_C3[5] * (2 * x * z)
    G[:, 14, 1] = SH_C3[5] * (-2 * y * z)
    G[:, 14, 2] = SH_C3[5] * (xx - yy)
    G[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
    G[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return G


def eval_sh(direction, coeffs) -> np.ndarray:
    """Display colour for one viewing direction.

    ``coeffs`` is (3, 16) (or (16,) for a single channel).  Returns the SH sum
    plus the 0.5 offset, clamped to [0, 1].
    """
    direction = np.asarray(direction, dtype=float).reshape(3)
    coeffs = np.asarray(coeffs, dtype=float)
    raw = coeffs @ sh_basis(direction)[0]
    return np.clip(raw + SH_OFFSET, 0.0, 1.0)


_BANDS = [(0, 1), (1, 4), (4, 9), (9, 16)]


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    ang = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)


def rotate_sh(sh: np.ndarray, R) -> np.ndarray:
    """Rotate SH coefficient sets so that ``f'(d) = f(R^T d)``.

    Each band is closed under rotation, so the band-wise linear map is
    recovered exactly by least squares over a fixed direction set.
    """
    R = np.asarray(R, dtype=float)
    dirs = _fibonacci_sphere(64)
    Y = sh_basis(dirs)
    Yr = sh_basis(dirs @ R)  # rows are (R^T d)^T
    out = np.array(sh, dtype=float, copy=True)
    for lo, hi in _BANDS[1:]:
        M, *_ = np.linalg.lstsq(Y[:, lo:hi], Yr[:, lo:hi], rcond=None)
        out[..., lo:hi] = sh[..., lo:hi] @ M.T
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(3)
        hi = np.asarray(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("Aabb min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def encode(self, points) -> np.ndarray:
        """Map object points to NOCS colours in [0, 1]; flat axes map to 0.5."""
        points = np.asarray(points, dtype=float)
        ext = self.extent
        flat = ext <= 0
        safe = np.where(flat, 1.0, ext)
        out = (points - self.min) / safe
        out = np.where(flat, 0.5, out)
        return np.clip(out, 0.0, 1.0)

    def decode(self, colors) -> np.ndarray:
        return self.min + np.asarray(colors, dtype=float) * self.extent

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Aabb":
        return cls(d["min"], d["max"])


@dataclass(frozen=True)
class GaussianModel:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = pos.shape[0]
        rot = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        scl = np.asarray(self.scales, dtype=float).reshape(n, 3)
        opa = np.asarray(self.opacities, dtype=float).reshape(n)
        sh = np.asarray(self.sh, dtype=float).reshape(n, 3, SH_COEFFS)
        if np.any(np.abs(np.linalg.norm(rot, axis=1) - 1.0) > 1e-6):
            raise ValueError("rotations must be unit quaternions")
        if np.any(scl <= 0):
            raise ValueError("scales must be positive")
        if np.any((opa < 0) | (opa > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        for name, val in (("positions", pos), ("rotations", rot), ("scales", scl), ("opacities", opa), ("sh", sh)):
            object.__setattr__(self, name, val)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def aabb(self) -> Aabb:
        return Aabb(self.positions.min(axis=0), self.positions.max(axis=0))

    def covariances(self) -> np.ndarray:
        Rs = quat_to_rotmat(self.rotations)
        M = Rs * self.scales[:, None, :]
        return M @ M.transpose(0, 2, 1)

    def with_sh(self, sh) -> "GaussianModel":
        return replace(self, sh=np.array(sh, dtype=float))

    def transformed(self, T: RigidTransform) -> "GaussianModel":
        """The model rigidly moved by ``T`` (means, orientations and SH)."""
        Rs = quat_to_rotmat(self.rotations)
        new_rot = rotmat_to_quat(T.R[None] @ Rs)
        return replace(
            self,
            positions=T.apply(self.positions),
            rotations=new_rot,
            sh=rotate_sh(self.sh, T.R),
        )

    def geometry_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.positions, self.rotations, self.scales, self.opacities):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def covariance(r, s) -> np.ndarray:
    """Sigma = R S S^T R^T for a unit quaternion ``r`` and scales ``s``."""
    r = np.asarray(r, dtype=float).reshape(4)
    s = np.asarray(s, dtype=float).reshape(3)
    if abs(np.linalg.norm(r) - 1.0) > 1e-6:
        raise ValueError("covariance: quaternion must have unit norm")
    if np.any(s <= 0):
        raise ValueError("covariance: scales must be positive")
    M = quat_to_rotmat(r) * s[None, :]
    return M @ M.T


def eval_gaussian(x, mu, sigma) -> float:
    x = np.asarray(x, dtype=float).reshape(3)
    mu = np.asarray(mu, dtype=float).reshape(3)
    sigma = np.asarray(sigma, dtype=float).reshape(3, 3)
    d = x - mu
    try:
        cho = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError("eval_gaussian: covariance is singular or not positive definite") from exc
    w = np.linalg.solve(cho, d)
    return float(np.exp(-0.5 * w @ w))


def make_nocs_model(model: GaussianModel, aabb: Aabb | None = None) -> GaussianModel:
    """Copy of ``model`` whose DC colour encodes each centre's normalised coordinates."""
    if len(model) == 0:
        raise ValueError("make_nocs_model: empty model")
    box = aabb if aabb is not None else model.aabb()
    colors = box.encode(model.positions)
    sh = np.zeros_like(model.sh)
    sh[:, :, 0] = (colors - SH_OFFSET) / SH_C0
    return replace(model, sh=sh, meta={**model.meta, "nocs_aabb": box.to_dict()})


def dc_colors(model: GaussianModel) -> np.ndarray:
    """View-independent base colour of each Gaussian, (N, 3)."""
    return np.clip(model.sh[:, :, 0] * SH_C0 + SH_OFFSET, 0.0, 1.0)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

SHAPES = ("cube", "sphere", "blob")


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "cube"
    count: int = 2000
    seed: int = 0
    size: float = 0.1  # cube side, sphere radius, blob radius (meters)
    textureless: bool = False
    opacity: float = 0.95
    sh_noise: float = 0.0  # std of random degree >= 1 coefficients
    base_color: tuple = (0.6, 0.6, 0.6)


def _frame_from_normal(n: np.ndarray) -> np.ndarray:
    """Rotation matrices whose third column is the given unit normal."""
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def _cube_surface(count: int, side: float, rng: np.random.Generator):
    half = side / 2.0
    per_face = np.full(6, count // 6)
    per_face[: count % 6] += 1
    pos, nrm, spacing = [], [], []
    for f in range(6):
        k = int(per_face[f])
        if k == 0:
            continue
        m = int(np.ceil(np.sqrt(k)))
        cells = rng.choice(m * m, size=k, replace=False)
        cu = (cells % m + rng.uniform(0.2, 0.8, k)) / m
        cv = (cells // m + rng.uniform(0.2, 0.8, k)) / m
        a, b = (cu - 0.5) * side, (cv - 0.5) * side
        axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
        p = np.zeros((k, 3))
        others = [i for i in range(3) if i != axis]
        p[:, axis] = sign * half
        p[:, others[0]] = a
        p[:, others[1]] = b
        n = np.zeros((k, 3))
        n[:, axis] = sign
        pos.append(p)
        nrm.append(n)
        spacing.append(np.full(k, side / m))
    return np.concatenate(pos), np.concatenate(nrm), np.concatenate(spacing)


def _sphere_surface(count: int, radius: float, rng: np.random.Generator):
    dirs = _fibonacci_sphere(count)
    # random global rotation keeps the seed meaningful while staying exactly on the sphere
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    dirs = dirs @ quat_to_rotmat(q).T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    spacing = np.full(count, radius * np.sqrt(4 * np.pi / count))
    return radius * dirs, dirs, spacing


def _texture(points: np.ndarray, size: float, normals: np.ndarray) -> np.ndarray:
    k = 2 * np.pi / (0.6 * size)
    waves = np.array([[1.0, 0.3, -0.5], [-0.4, 1.0, 0.6], [0.5, -0.7, 1.0]])
    phase = np.array([0.3, 1.7, 2.9])
    col = 0.5 + 0.3 * np.sin(k * points @ waves.T + phase)
    col += 0.1 * normals @ np.array([[0.8, -0.3, 0.2], [0.1, 0.7, -0.4], [-0.5, 0.2, 0.9]]).T
    return np.clip(col, 0.08, 0.92)


def synth_scene(spec: SceneSpec | None = None, **kwargs) -> GaussianModel:
    """Deterministic synthetic object centred at the origin."""
    spec = replace(spec or SceneSpec(), **kwargs)
    if spec.count < 1:
        raise ValueError("synth_scene: count must be >= 1")
    if spec.shape not in SHAPES:
        raise ValueError(f"synth_scene: unknown shape {spec.shape!r}; expected one of {SHAPES}")
    rng = np.random.default_rng(spec.seed)
    n = spec.count

    if spec.shape == "cube":
        pos, nrm, spacing = _cube_surface(n, spec.size, rng)
        frames = _frame_from_normal(nrm)
        s_in = 0.65 * spacing
        scales = np.stack([s_in, s_in, 0.15 * s_in], axis=1)
    elif spec.shape == "sphere":
        pos, nrm, spacing = _sphere_surface(n, spec.size, rng)
        frames = _frame_from_normal(nrm)
        s_in = 0.65 * spacing
        scales = np.stack([s_in, s_in, 0.15 * s_in], axis=1)
    else:
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = spec.size * rng.uniform(0, 1, n) ** (1 / 3)
        pos = u * r[:, None] * np.array([1.0, 0.75, 0.55])
        nrm = u
        frames = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        s = 0.8 * spec.size * n ** (-1 / 3)
        scales = np.full((n, 3), s)

    rotations = rotmat_to_quat(frames)
    sh = np.zeros((n, 3, SH_COEFFS))
    if spec.textureless:
        colors = np.broadcast_to(np.asarray(spec.base_color, dtype=float), (n, 3))
    else:
        colors = _texture(pos, spec.size, nrm)
    sh[:, :, 0] = (colors - SH_OFFSET) / SH_C0
    if spec.sh_noise > 0 and not spec.textureless:
        sh[:, :, 1:] = rng.normal(scale=spec.sh_noise, size=(n, 3, SH_COEFFS - 1))
    return GaussianModel(
        positions=pos,
        rotations=rotations,
        scales=scales,
        opacities=np.full(n, spec.opacity),
        sh=sh,
        meta={"shape": spec.shape, "seed": spec.seed, "size": spec.size, "textureless": spec.textureless},
    )
