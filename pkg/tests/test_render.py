import numpy as np
import pytest

from splatpose import render as R
from splatpose.lie import RigidTransform, exp_so3
from splatpose.losses import LossWeights
from splatpose.render import CameraIntrinsics, Frame, project_gaussian, rasterize
from splatpose.scene import SH_C0, GaussianModel, covariance, synth_scene

K_ODD = CameraIntrinsics.from_fov(65, 65, 40)  # principal point on a pixel centre


def splats(pos, scale, opacity, color):
    n = len(pos)
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = (np.asarray(color, float) - 0.5) / SH_C0
    return GaussianModel(np.asarray(pos, float), [[1, 0, 0, 0]] * n, np.asarray(scale, float), opacity, sh)


def test_project_gaussian_on_axis():
    eps = 1e-6
    K = CameraIntrinsics(500, 400, 320, 240, 640, 480)
    s = project_gaussian(RigidTransform.identity(), K, [0, 0, 1], eps * np.eye(3))
    assert np.allclose(s.p, [K.cx, K.cy])
    assert np.allclose(s.sigma, np.diag([K.fx**2 * eps, K.fy**2 * eps]))
    s2 = project_gaussian(RigidTransform.identity(), K, [0, 0, 2], eps * np.eye(3))
    assert np.allclose(np.sqrt(np.diag(s2.sigma)), 0.5 * np.sqrt(np.diag(s.sigma)))
    assert project_gaussian(RigidTransform.identity(), K, [0, 0, -1], np.eye(3)) is None


def test_project_gaussian_fd_propagation():
    rng = np.random.default_rng(0)
    K = CameraIntrinsics(300, 320, 64, 60, 128, 128)
    h = 1e-6
    for _ in range(50):
        T = RigidTransform(exp_so3(rng.normal(size=3)), [0, 0, 0.5])
        mu = rng.normal(scale=0.05, size=3)
        q = rng.normal(size=4)
        S = covariance(q / np.linalg.norm(q), rng.uniform(1e-3, 1e-2, 3))
        out = project_gaussian(T, K, mu, S)
        # numerically linearise pixel(T x) around mu and push the covariance through
        J = np.zeros((2, 3))
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            J[:, a] = (K.project(T.apply(mu + e))[0] - K.project(T.apply(mu - e))[0]) / (2 * h)
        ref = J @ S @ J.T
        assert np.abs(out.sigma - ref).max() < 1e-3 * np.abs(ref).max()


def test_single_gaussian_on_axis():
    m = splats([[0, 0, 0.5]], [[0.004] * 3], [1.0], [[0.8, 0.6, 0.4]])
    f = rasterize(m, RigidTransform.identity(), K_ODD)
    lum = f.rgb.sum(axis=2)
    v, u = np.unravel_index(np.argmax(lum), lum.shape)
    assert (u, v) == (K_ODD.cx, K_ODD.cy)
    assert abs(f.depth[v, u] - 0.5) < 1e-3
    assert np.allclose(f.rgb[v, u], [0.8, 0.6, 0.4])


def test_model_behind_camera_is_empty():
    m = synth_scene(count=200)
    f = rasterize(m, RigidTransform(np.eye(3), [0, 0, -0.5]), K_ODD)
    assert not f.rgb.any() and not f.depth.any() and not f.mask.any()


def _alpha_map(model, k, K, cutoff=R.CUTOFF_SIGMA):
    """Tapered footprint of splat k evaluated directly on the pixel grid."""
    sp = project_gaussian(RigidTransform.identity(), K, model.positions[k], model.covariances()[k])
    S = sp.sigma + R.DILATION * np.eye(2)
    v, u = np.mgrid[0:K.height, 0:K.width]
    d = np.stack([u - sp.p[0], v - sp.p[1]], -1)
    m = np.einsum("...i,ij,...j->...", d, np.linalg.inv(S), d)
    e = np.exp(-0.5 * cutoff**2)
    a = model.opacities[k] * (np.exp(-0.5 * m) - e) / (1 - e)
    return np.where(m <= cutoff**2, np.maximum(a, 0), 0.0)


def test_two_splat_compositing_closed_form():
    c1, c2 = np.array([0.9, 0.2, 0.1]), np.array([0.1, 0.3, 0.95])
    m = splats([[0.002, 0, 0.4], [-0.003, 0.001, 0.6]], [[0.003] * 3, [0.005] * 3], [0.7, 0.9], [c1, c2])
    f = rasterize(m, RigidTransform.identity(), K_ODD)
    a1, a2 = _alpha_map(m, 0, K_ODD), _alpha_map(m, 1, K_ODD)
    rgb = a1[..., None] * c1 + ((1 - a1) * a2)[..., None] * c2
    acc = a1 + (1 - a1) * a2
    wdepth = a1 * 0.4 + (1 - a1) * a2 * 0.6
    assert np.abs(f.rgb - rgb).max() < 1e-12
    assert np.abs(f.alpha - acc).max() < 1e-12
    assert np.abs(f.wdepth - wdepth).max() < 1e-12


def test_opaque_near_splat_hides_far_one():
    m = splats([[0, 0, 0.4], [0, 0, 0.6]], [[0.01] * 3, [0.002] * 3], [1.0, 1.0], [[1, 0, 0], [0, 0, 1]])
    f = rasterize(m, RigidTransform.identity(), K_ODD)
    c = (int(K_ODD.cy), int(K_ODD.cx))
    assert np.allclose(f.rgb[c], [1, 0, 0])
    assert f.depth[c] == pytest.approx(0.4)


def test_rasterize_rejects_bad_mode():
    with pytest.raises(ValueError):
        rasterize(synth_scene(count=10), RigidTransform.identity(), K_ODD, mode="normals")


def test_pose_gradient_zero_residual(cube, T_view, K, cube_frame):
    for side in ("left", "right"):
        assert np.linalg.norm(R.pose_gradient(cube, T_view, K, cube_frame, side=side)) < 1e-8


def smooth_setup():
    """DSSIM only, and splats whose cutoff ellipse lies outside the image: the loss is C-infinity in the pose."""
    K = CameraIntrinsics.from_fov(32, 32, 40)
    rng = np.random.default_rng(5)
    m = splats(rng.normal(scale=0.01, size=(4, 3)), np.full((4, 3), 0.1), [0.5] * 4, rng.uniform(0.2, 0.8, (4, 3)))
    T = RigidTransform(np.eye(3), [0, 0, 0.5])
    return m, T, K, rasterize(m, T, K), LossWeights(lam=0.0, beta=0.0)


def test_pose_gradient_fd_zero_residual():
    m, T, K, obs, w = smooth_setup()
    for side in ("left", "right"):
        assert np.linalg.norm(R.pose_gradient_fd(m, T, K, obs, w, side, step=1e-5)) < 1e-8


def test_fd_richardson():
    m, T, K, obs, w = smooth_setup()
    Tp = R.perturb(T, [0.004, -0.003, 0.01, 0.05, -0.04, 0.03], "left")
    gs = [R.pose_gradient_fd(m, Tp, K, obs, w, "left", step=h) for h in (4e-3, 2e-3, 1e-3)]
    ratio = np.linalg.norm(gs[0] - gs[1]) / np.linalg.norm(gs[1] - gs[2])
    assert 3.5 < ratio < 4.5  # 4 for an O(h^2) scheme
    g = R.pose_gradient(m, Tp, K, obs, w, "left")
    assert np.abs(g - gs[2]).max() < 1e-2 * np.linalg.norm(g)


def test_pose_gradient_fd_small_cases(K):
    rng = np.random.default_rng(11)
    for s in range(4):
        m = synth_scene(count=2000, seed=200 + s)
        T = RigidTransform(exp_so3(rng.normal(size=3)), [0.01, -0.01, 0.5])
        obs = rasterize(m, T, K)
        side = ("left", "right")[s % 2]
        Tp = R.perturb(T, np.r_[rng.normal(size=3) * 0.005, rng.normal(size=3) * 0.03], side)
        g = R.pose_gradient(m, Tp, K, obs, side=side)
        gf = R.pose_gradient_fd(m, Tp, K, obs, side=side)
        assert (np.abs(g - gf) / np.linalg.norm(gf)).max() < 1e-2


def test_left_equals_right_at_identity(K):
    m = synth_scene(count=1500, seed=3)
    m = GaussianModel(m.positions + [0, 0, 0.5], m.rotations, m.scales, m.opacities, m.sh)
    obs = rasterize(m, RigidTransform(exp_so3([0.05, -0.03, 0.02]), [0.003, 0, 0]), K)
    gl = R.pose_gradient(m, RigidTransform.identity(), K, obs, side="left")
    gr = R.pose_gradient(m, RigidTransform.identity(), K, obs, side="right")
    assert np.allclose(gl, gr, rtol=1e-10, atol=1e-12)


def test_render_and_grad_sh_gradient_fd(K, cube, T_view, cube_frame):
    rng = np.random.default_rng(6)
    bright = Frame(np.clip(cube_frame.rgb * 1.2, 0, 1), cube_frame.depth, cube_frame.mask)
    rg = R.render_and_grad(cube, T_view, K, bright, side=None, want_sh=True)
    idx = np.argsort(-np.abs(rg.sh_grad).reshape(-1))[:5]
    h = 1e-5
    for flat in idx:
        i = np.unravel_index(flat, cube.sh.shape)
        sp, sm = cube.sh.copy(), cube.sh.copy()
        sp[i] += h
        sm[i] -= h
        fd = (R.render_loss(cube.with_sh(sp), T_view, K, bright) - R.render_loss(cube.with_sh(sm), T_view, K, bright)) / (2 * h)
        assert abs(fd - rg.sh_grad[i]) < 1e-2 * abs(rg.sh_grad[i])


def test_nocs_render_decodes_to_surface(K):
    box_tol = 1e-3
    for seed in range(4):
        rng = np.random.default_rng(seed)
        cube = synth_scene(count=2000, seed=seed)
        T = RigidTransform(exp_so3(rng.normal(size=3)), [0, 0, 0.5])
        nocs = rasterize(cube, T, K, mode="nocs")
        box = cube.aabb()
        v, u = np.nonzero(nocs.rgb.max(axis=2) > 0.05)
        pts = box.decode(nocs.rgb[v, u])
        # exact ray / cube intersection in the object frame
        Ti = T.inverse()
        d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(u.size)], 1) @ Ti.R.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            t0, t1 = (box.min - Ti.t) / d, (box.max - Ti.t) / d
        t_in, t_out = np.minimum(t0, t1).max(axis=1), np.maximum(t0, t1).min(axis=1)
        dia = box.diagonal
        err = np.linalg.norm(pts - (Ti.t + t_in[:, None] * d), axis=1)
        assert np.mean(err < 0.02 * dia) >= 0.99
        # every decoded point lies on its pixel ray, between entry and exit (8-bit quantisation aside)
        t = np.sum((pts - Ti.t) * d, axis=1)
        off_ray = np.linalg.norm(pts - (Ti.t + t[:, None] * d), axis=1)
        q = dia / 255
        assert off_ray.max() < q
        hit = t_in <= t_out
        assert np.all(t[hit] > t_in[hit] - q - box_tol * dia) and np.all(t[hit] < t_out[hit] + q + box_tol * dia)
        # rays that skim past an edge may still decode, but only onto the box edge they graze
        ts = np.linspace(0.3, 0.7, 4001)
        ray_pts = Ti.t + ts[None, :, None] * d[~hit][:, None, :]
        gap = np.linalg.norm(ray_pts - np.clip(ray_pts, box.min, box.max), axis=2).min(axis=1)
        assert np.all(gap < box_tol * dia)
        assert np.mean(~hit) < 0.01
