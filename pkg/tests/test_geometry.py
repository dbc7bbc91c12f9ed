import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egotwin.errors import CutLocus, Degenerate, NonUnitAxis
from egotwin.geometry import (
    Correspondence,
    Pose,
    Twist,
    rotation_about_axis,
    robust_register,
    se3_exp,
    se3_left_jacobian,
    se3_log,
    se3_log_vec,
    se3_right_jacobian_inv,
    weighted_kabsch,
)


def random_pose(rng, max_angle=np.pi * 0.95, scale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return se3_exp(np.concatenate([axis * rng.uniform(0, max_angle), rng.normal(scale=scale, size=3)]))


def unit(rng):
    a = rng.normal(size=3)
    return a / np.linalg.norm(a)


def test_exp_zero_is_identity():
    p = se3_exp(Twist(np.zeros(3), np.zeros(3)))
    assert p.is_close(Pose.identity(), 0.0)


def test_exp_quarter_turn_about_z():
    p = se3_exp(Twist([0, 0, np.pi / 2], [0, 0, 0]))
    np.testing.assert_allclose(p.apply([1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_log_exp_round_trip_100_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        w = unit(rng) * rng.uniform(0, np.pi - 1e-3)
        x = np.concatenate([w, rng.normal(size=3)])
        np.testing.assert_allclose(se3_log_vec(se3_exp(x)), x, atol=1e-7)


def test_log_identity_and_pure_translation():
    assert np.all(se3_log(Pose.identity()).vector() == 0)
    tw = se3_log(Pose(np.eye(3), [0, 0, 0.5]))
    np.testing.assert_allclose(tw.translational, [0, 0, 0.5])
    np.testing.assert_allclose(tw.rotational, 0)


def test_log_at_pi_raises():
    with pytest.raises(CutLocus):
        se3_log(Pose(rotation_about_axis([0, 0, 1], np.pi), np.zeros(3)))


def test_log_just_inside_cut_locus():
    th = np.pi - 1e-5
    a = np.array([1.0, 2.0, 2.0]) / 3
    tw = se3_log(Pose(rotation_about_axis(a, th), [0.1, 0.2, 0.3]))
    np.testing.assert_allclose(tw.rotational, a * th, atol=1e-6)


def test_rotation_about_axis_examples():
    np.testing.assert_allclose(rotation_about_axis([0, 0, 1], np.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    assert np.array_equal(rotation_about_axis([0, 1, 0], 0.0), np.eye(3))
    with pytest.raises(NonUnitAxis):
        rotation_about_axis([0, 0, 1.1], 0.3)


def test_rotation_composition_with_negated_angle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, th = unit(rng), rng.uniform(-4, 4)
        np.testing.assert_allclose(rotation_about_axis(a, th) @ rotation_about_axis(a, -th), np.eye(3), atol=1e-12)


def test_pose_invariants():
    rng = np.random.default_rng(3)
    for _ in range(50):
        P, Q, S = random_pose(rng), random_pose(rng), random_pose(rng)
        assert abs(np.linalg.det(P.rotation) - 1) < 1e-9
        assert (P @ P.inverse()).is_close(Pose.identity(), 1e-9)
        assert ((P @ Q) @ S).is_close(P @ (Q @ S), 1e-9)
        assert (P @ Q).inverse().is_close(Q.inverse() @ P.inverse(), 1e-9)


def test_quaternion_is_canonical():
    rng = np.random.default_rng(4)
    for _ in range(50):
        P = random_pose(rng)
        q = P.to_quaternion()
        assert q[0] >= 0 and abs(np.linalg.norm(q) - 1) < 1e-12
        assert Pose.from_quaternion(q, P.translation).is_close(P, 1e-12)


def test_right_jacobian_inverse_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(20):
        X = random_pose(rng, max_angle=2.5)
        e0 = se3_log_vec(X)
        Jinv = se3_right_jacobian_inv(e0)
        num = np.zeros((6, 6))
        h = 1e-6
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            num[:, k] = (se3_log_vec(X @ se3_exp(d)) - se3_log_vec(X @ se3_exp(-d))) / (2 * h)
        np.testing.assert_allclose(Jinv, num, atol=1e-6)


def test_left_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    xi = np.concatenate([unit(rng) * 1.3, rng.normal(size=3)])
    num = np.zeros((6, 6))
    h = 1e-6
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        num[:, k] = (se3_log_vec(se3_exp(d) @ se3_exp(xi)) - se3_log_vec(se3_exp(-d) @ se3_exp(xi))) / (2 * h)
    np.testing.assert_allclose(np.linalg.inv(se3_left_jacobian(xi)), num, atol=1e-6)


def _cloud(rng, n=10):
    return rng.uniform(-1, 1, size=(n, 3))


def test_kabsch_exact_fit_and_zero_weight_outliers():
    rng = np.random.default_rng(7)
    P = random_pose(rng)
    src = _cloud(rng)
    corrs = [Correspondence(s, P.apply(s), 1.0) for s in src]
    est = weighted_kabsch(corrs)
    assert est.is_close(P, 1e-9)
    outliers = [Correspondence(rng.normal(size=3), rng.normal(size=3), 0.0) for _ in range(3)]
    est2 = weighted_kabsch(corrs + outliers)
    assert est2.is_close(est, 1e-12)


def test_kabsch_noise_monte_carlo():
    rng = np.random.default_rng(8)
    errs = []
    for _ in range(100):
        P = random_pose(rng)
        src = _cloud(rng, 30)
        tgt = P.apply(src) + rng.normal(scale=0.005, size=src.shape)
        est = weighted_kabsch((src, tgt, np.ones(len(src))))
        errs.append(np.linalg.norm(est.translation - P.translation))
    assert max(errs) < 0.005


def test_kabsch_degenerate():
    src = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0.0]])
    with pytest.raises(Degenerate):
        weighted_kabsch((src, src, np.ones(4)))
    with pytest.raises(Degenerate):
        weighted_kabsch((src[:2], src[:2], np.ones(2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_kabsch_weight_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    P = random_pose(rng)
    src = _cloud(rng, 12)
    tgt = P.apply(src) + rng.normal(scale=0.01, size=src.shape)
    w = rng.uniform(0.1, 1, size=12)
    a = weighted_kabsch((src, tgt, w))
    b = weighted_kabsch((src, tgt, w * scale))
    assert a.is_close(b, 1e-9)


def test_robust_all_inliers_matches_kabsch():
    rng = np.random.default_rng(9)
    P = random_pose(rng)
    src = _cloud(rng, 40)
    tgt = P.apply(src)
    pose, mask = robust_register((src, tgt, np.ones(40)), 0.02, 256, seed=1)
    assert mask.all()
    assert pose.is_close(weighted_kabsch((src, tgt, np.ones(40))), 1e-12)


def test_robust_with_outliers():
    rng = np.random.default_rng(10)
    for trial in range(10):
        P = random_pose(rng, max_angle=1.0)
        src = rng.uniform(-0.5, 0.5, size=(100, 3))
        tgt = P.apply(src) + rng.normal(scale=0.003, size=src.shape)
        out = rng.random(100) < 0.3
        tgt[out] = rng.uniform(-1.5, 1.5, size=(out.sum(), 3))
        pose, mask = robust_register((src, tgt, np.ones(100)), 0.02, 1024, seed=trial)
        dR = pose.rotation.T @ P.rotation
        ang = np.degrees(np.arccos(np.clip((np.trace(dR) - 1) / 2, -1, 1)))
        assert ang < 1.0
        assert np.linalg.norm(pose.translation - P.translation) < 0.01


def test_robust_is_deterministic():
    rng = np.random.default_rng(11)
    src = rng.uniform(-1, 1, size=(60, 3))
    tgt = src + rng.normal(scale=0.05, size=src.shape)
    w = rng.uniform(0, 1, 60)
    a, ma = robust_register((src, tgt, w), 0.05, 512, seed=42)
    b, mb = robust_register((src, tgt, w), 0.05, 512, seed=42)
    assert np.array_equal(a.matrix(), b.matrix()) and np.array_equal(ma, mb)


def test_robust_two_correspondences_degenerate():
    with pytest.raises(Degenerate):
        robust_register([Correspondence([0, 0, 0], [0, 0, 0]), Correspondence([1, 0, 0], [1, 0, 0])])
