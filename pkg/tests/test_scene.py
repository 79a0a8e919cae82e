import numpy as np
import pytest

from splatpose import scene
from splatpose.lie import RigidTransform, exp_so3, quat_to_rotmat
from splatpose.plyio import PlyError, load_ply, save_ply
from splatpose.scene import Aabb, GaussianModel, synth_scene


def one_gaussian(pos=(0, 0, 0), sh=None, opacity=0.9):
    return GaussianModel(np.array([pos]), [[1, 0, 0, 0]], [[0.01] * 3], [opacity],
                         np.zeros((1, 3, 16)) if sh is None else sh)


def test_covariance_examples():
    assert np.allclose(scene.covariance([1, 0, 0, 0], [1, 1, 1]), np.eye(3))
    assert np.allclose(scene.covariance([1, 0, 0, 0], [2, 1, 1]), np.diag([4, 1, 1]))


def test_covariance_eigenvalues_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.1, 3, 3)
        ev = np.linalg.eigvalsh(scene.covariance(q, s))
        assert np.allclose(np.sort(ev), np.sort(s**2), atol=1e-9)


def test_covariance_rejects_bad_input():
    with pytest.raises(ValueError):
        scene.covariance([2, 0, 0, 0], [1, 1, 1])
    with pytest.raises(ValueError):
        scene.covariance([1, 0, 0, 0], [1, 0, 1])


def test_eval_gaussian_examples():
    assert scene.eval_gaussian([1, 2, 3], [1, 2, 3], np.eye(3)) == 1.0
    assert np.isclose(scene.eval_gaussian([1, 0, 0], [0, 0, 0], np.eye(3)), np.exp(-0.5))
    rng = np.random.default_rng(1)
    for _ in range(100):
        A = rng.normal(size=(3, 3))
        S = A @ A.T + 0.1 * np.eye(3)
        x, mu = rng.normal(size=3), rng.normal(size=3)
        d = x - mu
        assert np.isclose(scene.eval_gaussian(x, mu, S), np.exp(-0.5 * d @ np.linalg.inv(S) @ d), rtol=1e-10)


def test_sh_dc_and_zero():
    c = np.zeros((3, 16))
    assert np.allclose(scene.eval_sh([0, 0, 1], c), 0.5)
    c[:, 0] = [0.3, -0.2, 0.1]
    rng = np.random.default_rng(2)
    for _ in range(10):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        assert np.allclose(scene.eval_sh(d, c), 0.282095 * c[:, 0] + 0.5, atol=1e-6)


def test_sh_odd_bands_antisymmetric():
    rng = np.random.default_rng(3)
    c = np.zeros((3, 16))
    c[:, 1:4] = rng.normal(scale=0.1, size=(3, 3))
    c[:, 9:16] = rng.normal(scale=0.1, size=(3, 7))
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        a, b = scene.eval_sh(d, c), scene.eval_sh(-d, c)
        assert np.allclose(a - 0.5, 0.5 - b, atol=1e-12)


def test_sh_basis_orthonormal():
    # quadrature over a dense near-uniform point set
    d = scene._fibonacci_sphere(200_000)
    Y = scene.sh_basis(d)
    gram = 4 * np.pi * Y.T @ Y / len(d)
    assert np.allclose(gram, np.eye(16), atol=2e-3)


def test_sh_basis_grad_fd():
    rng = np.random.default_rng(4)
    d = rng.normal(size=(5, 3))
    G = scene.sh_basis_grad(d)
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (scene.sh_basis(d + e) - scene.sh_basis(d - e)) / (2 * h)
        assert np.allclose(G[:, :, a], fd, atol=1e-6)


def test_rotate_sh():
    rng = np.random.default_rng(5)
    sh = rng.normal(scale=0.1, size=(2, 3, 16))
    R = exp_so3(rng.normal(size=3))
    shr = scene.rotate_sh(sh, R)
    for _ in range(10):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        for n in range(2):
            assert np.allclose(shr[n] @ scene.sh_basis(d)[0], sh[n] @ scene.sh_basis(R.T @ d)[0], atol=1e-10)


def test_model_transformed_moves_geometry():
    m = synth_scene(count=100, seed=0)
    T = RigidTransform(exp_so3([0.1, 0.2, 0.3]), [0.1, 0, 0])
    mt = m.transformed(T)
    assert np.allclose(mt.positions, T.apply(m.positions))
    assert np.allclose(mt.covariances(), T.R @ m.covariances() @ T.R.T, atol=1e-12)


def test_nocs_model_examples():
    box = Aabb([0, 0, 0], [1, 2, 4])
    m = GaussianModel([[0, 0, 0], [0.5, 1, 2], [1, 2, 4]], [[1, 0, 0, 0]] * 3, [[0.1] * 3] * 3, [1] * 3,
                      np.zeros((3, 3, 16)))
    nm = scene.make_nocs_model(m, box)
    col = scene.dc_colors(nm)
    assert np.allclose(col[0], 0) and np.allclose(col[1], 0.5) and np.allclose(col[2], 1)
    assert np.array_equal(nm.positions, m.positions)


def test_nocs_quantisation_bound():
    rng = np.random.default_rng(6)
    box = Aabb([-0.05, -0.04, -0.03], [0.05, 0.04, 0.03])
    p = rng.uniform(box.min, box.max, size=(1000, 3))
    q = np.rint(box.encode(p) * 255) / 255
    err = np.linalg.norm(box.decode(q) - p, axis=1)
    assert err.max() <= box.diagonal / 255


def test_aabb_validation():
    with pytest.raises(ValueError):
        Aabb([1, 0, 0], [0, 1, 1])


def test_model_validation():
    with pytest.raises(ValueError):
        GaussianModel([[0, 0, 0]], [[2, 0, 0, 0]], [[1, 1, 1]], [0.5], np.zeros((1, 3, 16)))
    with pytest.raises(ValueError):
        GaussianModel([[0, 0, 0]], [[1, 0, 0, 0]], [[1, 1, 1]], [1.5], np.zeros((1, 3, 16)))


def test_synth_scene_contracts():
    a, b = synth_scene(seed=3, count=500), synth_scene(seed=3, count=500)
    for f in ("positions", "rotations", "scales", "opacities", "sh"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert a.geometry_hash() == b.geometry_hash()
    s = synth_scene(shape="sphere", size=0.1, count=700, seed=1)
    assert np.allclose(np.linalg.norm(s.positions, axis=1), 0.1, atol=1e-9)
    t = synth_scene(textureless=True, count=500)
    assert np.all(np.ptp(t.sh, axis=0) == 0)  # identical coefficients, i.e. zero variance
    c = synth_scene(count=600, size=0.1)
    assert np.allclose(np.abs(c.positions).max(axis=1), 0.05)
    # the thinnest axis of every splat is the face normal
    Rs = quat_to_rotmat(c.rotations)
    n = Rs[np.arange(len(c)), :, np.argmin(c.scales, axis=1)]
    face = np.argmax(np.abs(c.positions), axis=1)
    assert np.allclose(np.abs(n[np.arange(len(c)), face]), 1.0)
    with pytest.raises(ValueError):
        synth_scene(shape="torus")


def test_ply_roundtrip(tmp_path):
    m = synth_scene(count=300, seed=2, sh_noise=0.05)
    path = tmp_path / "m.ply"
    save_ply(m, path)
    back = load_ply(path)
    for f in ("positions", "rotations", "scales", "opacities", "sh"):
        assert np.abs(getattr(back, f) - getattr(m, f)).max() < 1e-6


def test_ply_roundtrip_random(tmp_path):
    rng = np.random.default_rng(7)
    path = tmp_path / "r.ply"
    for _ in range(20):
        n = int(rng.integers(1, 50))
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        m = GaussianModel(rng.normal(scale=0.1, size=(n, 3)), q, rng.uniform(1e-3, 1e-1, (n, 3)),
                          rng.uniform(0.01, 0.99, n), rng.normal(scale=0.5, size=(n, 3, 16)))
        save_ply(m, path)
        back = load_ply(path)
        for f in ("positions", "scales", "opacities", "sh"):
            assert np.abs(getattr(back, f) - getattr(m, f)).max() < 1e-6
        assert np.abs(back.covariances() - m.covariances()).max() < 1e-6


def _write_ply(path, n, opacity_logit=0.0):
    from splatpose.plyio import PROPERTIES

    data = np.zeros(n, dtype=[(p, "<f4") for p in PROPERTIES])
    data["opacity"] = opacity_logit
    data["rot_0"] = 1.0
    header = "ply\nformat binary_little_endian 1.0\nelement vertex %d\n" % n
    header += "".join(f"property float {p}\n" for p in PROPERTIES) + "end_header\n"
    with open(path, "wb") as fh:
        fh.write(header.encode())
        data.tofile(fh)


def test_ply_opacity_logit_and_empty(tmp_path):
    _write_ply(tmp_path / "a.ply", 2)
    assert np.allclose(load_ply(tmp_path / "a.ply").opacities, 0.5)
    _write_ply(tmp_path / "z.ply", 0)
    with pytest.raises(PlyError):
        load_ply(tmp_path / "z.ply")


def test_ply_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(b"not a ply file\n")
    with pytest.raises(PlyError):
        load_ply(p)
    p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n")
    with pytest.raises(PlyError):
        load_ply(p)
