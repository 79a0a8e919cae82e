import math

import numpy as np
import pytest

from splatpose.lie import RigidTransform, exp_so3
from splatpose.metrics import (
    PoseError, Thresholds, add, add_s, angular_histogram, diameter, pose_error, pose_errors, success_report,
)


def rand_T(rng):
    return RigidTransform(exp_so3(rng.normal(size=3)), rng.normal(size=3))


def test_add_examples():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(50, 3))
    T = rand_T(rng)
    assert add(P, T, T) == 0.0
    t = np.array([0.3, -0.4, 1.2])
    T2 = RigidTransform(T.R, T.t + t)
    assert math.isclose(add(P, T, T2), np.linalg.norm(t), rel_tol=1e-12)


def test_add_and_add_s_brute_force_exact():
    rng = np.random.default_rng(1)
    for _ in range(50):
        P = rng.normal(size=(int(rng.integers(1, 11)), 3))
        A, B = rand_T(rng), rand_T(rng)
        pa, pb = A.apply(P), B.apply(P)
        ref_add = np.mean([np.linalg.norm(pa[i] - pb[i]) for i in range(len(P))])
        ref_s = np.mean([min(np.linalg.norm(pa[i] - pb[j]) for j in range(len(P))) for i in range(len(P))])
        assert add(P, A, B) == pytest.approx(ref_add, rel=1e-12)
        assert add_s(P, A, B) == pytest.approx(ref_s, rel=1e-12)
        assert add_s(P, A, B) <= add(P, A, B) + 1e-15


def test_add_s_symmetric_ring():
    ang = np.arange(36) * 2 * np.pi / 36
    ring = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], 1) * 0.05
    T = RigidTransform(np.eye(3), [0, 0, 0.5])
    Tr = RigidTransform(exp_so3([0, 0, 2 * np.pi / 36 * 3]), [0, 0, 0.5])
    assert add_s(ring, T, Tr) < 1e-12
    assert add(ring, T, Tr) > 0.01
    assert add_s(ring, T, T) == 0.0


def test_pose_errors_examples():
    T = RigidTransform(exp_so3([0.2, 0.1, 0.3]), [0, 0, 1])
    assert pose_errors(T, T) == (0.0, 0.0)
    T5 = RigidTransform(T.R @ exp_so3([0, 0, math.radians(5)]), T.t)
    assert abs(pose_errors(T, T5)[0] - 5.0) < 1e-9


def test_pose_errors_quaternion_formula():
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(2)
    for _ in range(100):
        A, B = rand_T(rng), rand_T(rng)
        qa = Rotation.from_matrix(A.R).as_quat()
        qb = Rotation.from_matrix(B.R).as_quat()
        ref = math.degrees(2 * math.acos(min(1.0, abs(float(qa @ qb)))))
        assert pose_errors(A, B)[0] == pytest.approx(ref, abs=1e-6)


def test_success_report_examples():
    zero = [PoseError(0.0, 0.0, 0.0, 0.0)] * 3
    rep = success_report(zero, 0.1)
    assert rep.add_rate == rep.rot_rate == rep.rot_trans_rate == 1.0
    edge = [PoseError(5.0, 0.01, 0.1, 0.1)]
    rep = success_report(edge, 1.0)  # ADD threshold 0.1 * 1.0 is exact
    assert rep.add_rate == rep.rot_rate == rep.rot_trans_rate == 0.0
    just = [PoseError(np.nextafter(5.0, 0), np.nextafter(0.01, 0), np.nextafter(0.1, 0), 0)]
    rep = success_report(just, 1.0)
    assert rep.add_rate == rep.rot_rate == rep.rot_trans_rate == 1.0


def test_success_report_enumeration():
    errs = [PoseError(1, 0.001, 0.001, 0.001), PoseError(4.9, 0.02, 0.02, 0.005), PoseError(7, 0.005, 0.5, 0.001),
            PoseError(0.5, 0.009, 0.011, 0.0)]
    rep = success_report(errs, 0.1)
    assert rep.n == 4
    assert rep.rot_rate == 3 / 4
    assert rep.rot_trans_rate == 2 / 4
    assert rep.add_rate == 1 / 4
    assert success_report(errs, 0.1, symmetric=True).add_rate == 4 / 4
    assert rep.hist_counts == [1, 1, 0, 0, 1, 0, 0, 1]
    with pytest.raises(ValueError):
        success_report([], 0.1)


def test_histogram_and_report_files(tmp_path):
    edges, counts = angular_histogram([0.0, 0.99, 1.0, 2.5])
    assert edges.tolist() == [0, 1, 2, 3] and counts.tolist() == [2, 1, 1]
    rep = success_report([PoseError(1, 0, 0, 0)], 0.1, Thresholds())
    rep.to_json(tmp_path / "r.json")
    rep.histogram_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "lo_deg,hi_deg,count"


def test_diameter():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0]], float)
    assert diameter(P) == pytest.approx(math.sqrt(5))
    rng = np.random.default_rng(3)
    Q = rng.normal(size=(6000, 3))
    from scipy.spatial.distance import pdist

    assert diameter(Q) == pytest.approx(pdist(Q[::1]).max())
    with pytest.raises(ValueError):
        diameter(np.zeros((0, 3)))


def test_pose_error_bundle():
    rng = np.random.default_rng(4)
    P = rng.normal(size=(20, 3))
    A, B = rand_T(rng), rand_T(rng)
    e = pose_error(P, A, B)
    assert e.add == add(P, A, B) and e.add_s == add_s(P, A, B)
