"""Binary PLY reader/writer for Gaussian-splat models.

Layout follows the common 3DGS checkpoint convention: ``x y z nx ny nz
f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3``, all float32, with
opacity stored as a logit and scales as logs.  ``f_rest`` is channel-major.
"""

from __future__ import annotations

import os

import numpy as np

from .scene import SH_COEFFS, GaussianModel

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

N_REST = 3 * (SH_COEFFS - 1)
PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    + [f"f_rest_{i}" for i in range(N_REST)]
    + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)
REQUIRED = [p for p in PROPERTIES if p not in ("nx", "ny", "nz")]

_OPACITY_EPS = 1e-7


class PlyError(ValueError):
    pass


def _read_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError("not a PLY file (missing magic)")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("malformed header: no end_header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
            elif count is not None:
                # vertex element must be last for our flat layout reader
                raise PlyError("unsupported PLY: elements after 'vertex'")
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise PlyError("list properties are not supported for splat models")
            if tokens[1] not in _TYPES:
                raise PlyError(f"unknown property type {tokens[1]!r}")
            props.append((tokens[2], _TYPES[tokens[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"unsupported PLY format {fmt!r}; expected binary_little_endian")
    if count is None:
        raise PlyError("malformed header: no vertex element")
    return count, props


def load_ply(path) -> GaussianModel:
    with open(path, "rb") as fh:
        count, props = _read_header(fh)
        names = [p[0] for p in props]
        missing = [p for p in REQUIRED if p not in names]
        if missing:
            raise PlyError(f"missing properties: {', '.join(missing[:6])}{'...' if len(missing) > 6 else ''}")
        if count == 0:
            raise PlyError("PLY contains 0 vertices")
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        data = np.fromfile(fh, dtype=dtype, count=count)
    if data.shape[0] != count:
        raise PlyError(f"truncated PLY: expected {count} vertices, read {data.shape[0]}")

    col = lambda n: data[n].astype(np.float64)  # noqa: E731
    pos = np.stack([col("x"), col("y"), col("z")], axis=1)
    sh = np.zeros((count, 3, SH_COEFFS))
    for c in range(3):
        sh[:, c, 0] = col(f"f_dc_{c}")
        for k in range(1, SH_COEFFS):
            sh[:, c, k] = col(f"f_rest_{c * (SH_COEFFS - 1) + k - 1}")
    opacity = 1.0 / (1.0 + np.exp(-col("opacity")))
    scales = np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1))
    rot = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise PlyError("zero-length rotation quaternion")
    return GaussianModel(pos, rot / norms, scales, opacity, sh)


def save_ply(model: GaussianModel, path) -> None:
    n = len(model)
    data = np.zeros(n, dtype=[(p, "<f4") for p in PROPERTIES])
    for i, axis in enumerate("xyz"):
        data[axis] = model.positions[:, i]
    for c in range(3):
        data[f"f_dc_{c}"] = model.sh[:, c, 0]
        for k in range(1, SH_COEFFS):
            data[f"f_rest_{c * (SH_COEFFS - 1) + k - 1}"] = model.sh[:, c, k]
    a = np.clip(model.opacities, _OPACITY_EPS, 1 - _OPACITY_EPS)
    data["opacity"] = np.log(a / (1 - a))
    for i in range(3):
        data[f"scale_{i}"] = np.log(model.scales[:, i])
    for i in range(4):
        data[f"rot_{i}"] = model.rotations[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in PROPERTIES]
    header.append("end_header")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        data.tofile(fh)


def save_points_ascii(points, path) -> None:
    """Plain ASCII point cloud for inspection in external viewers."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {points.shape[0]}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        np.savetxt(fh, points, fmt="%.7g")
