import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delivr import so2
from delivr.errors import ConfigError, ValidationError
from delivr.so2 import Rotation2

mpmath.mp.dps = 40

angles = st.floats(-math.pi + 1e-6, math.pi - 1e-6)
reals = st.floats(-50.0, 50.0)


def test_hat_examples():
    np.testing.assert_array_equal(so2.hat(0.0), np.zeros((2, 2)))
    np.testing.assert_array_equal(so2.hat(1.0), [[0, -1], [1, 0]])
    np.testing.assert_array_equal(so2.hat(-0.5), [[0, 0.5], [-0.5, 0]])


@given(st.floats(-1e6, 1e6))
def test_vee_inverts_hat_exactly(t):
    assert so2.vee(so2.hat(t)) == t


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(ValidationError):
        so2.hat(bad)
    with pytest.raises(ValidationError):
        so2.exp_so2(bad)


def test_exp_examples():
    np.testing.assert_array_equal(so2.exp_so2(0.0).matrix, np.eye(2))
    np.testing.assert_allclose(so2.exp_so2(math.pi / 2).matrix, [[0, -1], [1, 0]], atol=1e-16)
    c, s = float(mpmath.cos(mpmath.mpf("0.3"))), float(mpmath.sin(mpmath.mpf("0.3")))
    np.testing.assert_allclose(so2.exp_so2(0.3).matrix, [[c, -s], [s, c]], rtol=0, atol=1e-15)
    assert c == pytest.approx(0.955336, abs=1e-6) and s == pytest.approx(0.295520, abs=1e-6)


def test_log_examples():
    assert so2.log_so2(np.eye(2)) == 0.0
    assert so2.log_so2(np.array([[0.0, -1.0], [1.0, 0.0]])) == math.pi / 2
    assert abs(so2.log_so2(so2.exp_so2(2.9).matrix) - 2.9) <= 1e-12


def test_log_rejects_corrupt_matrix():
    with pytest.raises(ValidationError):
        so2.log_so2(np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ValidationError):
        so2.log_so2(np.array([[-1.0, 0.0], [0.0, 1.0]]))  # reflection, det = -1


def test_log_at_pi_branch():
    assert so2.log_so2(np.array([[-1.0, 0.0], [0.0, -1.0]])) == math.pi
    assert so2.wrap_angle(-math.pi) == math.pi


def test_bounded_angle_examples():
    assert so2.bounded_angle(0.0, 0.35) == 0.0
    big = so2.bounded_angle(1e6, 0.35)
    assert big <= 0.35
    expected = float(mpmath.mpf("0.35") * mpmath.tanh(1))
    assert so2.bounded_angle(1.0, 0.35) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.2665580, abs=1e-7)
    with pytest.raises(ConfigError):
        so2.bounded_angle(1.0, 0.0)


@given(st.floats(-50, 50))
def test_bounded_angle_stays_inside(w):
    b = so2.bounded_angle(w, 0.35)
    assert abs(b) <= 0.35 * math.tanh(50)


def test_rel_rotation_examples():
    assert so2.rel_rotation(Rotation2(0.2), Rotation2(0.2)).angle == 0.0
    assert so2.rel_rotation(Rotation2(0.1), Rotation2(0.4)).angle == pytest.approx(0.3, abs=1e-15)
    wrapped = float(mpmath.mpf(-6) + 2 * mpmath.pi)
    assert so2.rel_rotation(Rotation2(3.0), Rotation2(-3.0)).angle == pytest.approx(wrapped, abs=1e-14)
    assert wrapped == pytest.approx(0.283185, abs=1e-6)


def test_angular_diff_examples():
    assert so2.angular_diff(Rotation2(0.7), Rotation2(0.7)) == 0.0
    assert so2.angular_diff(Rotation2(0.0), Rotation2(0.25)) == 0.25
    wrapped = float(mpmath.mpf(-6) + 2 * mpmath.pi)
    assert so2.angular_diff(Rotation2(3.0), Rotation2(-3.0)) == pytest.approx(wrapped, abs=1e-14)


def test_velocity_sequence_examples():
    np.testing.assert_array_equal(so2.velocity_sequence([0.0] * 4), np.zeros(3))
    np.testing.assert_allclose(so2.velocity_sequence([0, 0.1, 0.2, 0.3, 0.4]), [0.1] * 4, atol=1e-15)
    # pairwise oracle: |a - b| for consecutive entries, no wrap needed here
    seq = [0.0, 0.1, -0.1]
    oracle = [abs(b - a) for a, b in zip(seq, seq[1:])]
    np.testing.assert_allclose(so2.velocity_sequence(seq), oracle, atol=1e-15)
    np.testing.assert_allclose(oracle, [0.1, 0.2], atol=1e-15)
    with pytest.raises(ValueError):
        so2.velocity_sequence([0.3])


def test_velocity_reg_examples():
    assert so2.velocity_reg([0.1, 0.1, 0.1], 0.5) == pytest.approx(0.05, abs=1e-15)
    v = [0.3, 0.1, 0.7]
    assert so2.velocity_reg(v, 0.0) == pytest.approx(np.mean(v), abs=1e-15)
    assert so2.velocity_reg([0.0, 0.2, 0.1], 0.4) == pytest.approx(0.6 * 0.1 + 0.4 * 0.15, abs=1e-15)
    assert 0.6 * 0.1 + 0.4 * 0.15 == pytest.approx(0.12)
    assert so2.velocity_reg([0.2], 0.7) == pytest.approx(0.3 * 0.2)
    with pytest.raises(ConfigError):
        so2.velocity_reg([0.1], 1.5)


def test_rotation_reg_examples():
    assert so2.rotation_reg([0.0, 0.0]) == 0.0
    assert so2.rotation_reg([0.1, -0.1]) == pytest.approx(0.01, abs=1e-16)
    assert so2.rotation_reg([0.3, 0.0, 0.1]) == pytest.approx(0.1 / 3, abs=1e-15)


def _assert_valid(R, tol=1e-12):
    assert np.abs(R.T @ R - np.eye(2)).max() <= tol
    assert abs(np.linalg.det(R) - 1.0) <= tol


def test_round_trip_bulk():
    rng = np.random.default_rng(0)
    for t in rng.uniform(-math.pi + 1e-6, math.pi - 1e-6, 10_000):
        R = so2.exp_so2(t)
        assert abs(so2.log_so2(R.matrix) - t) <= 1e-12


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_validity_by_construction(w):
    R = so2.exp_so2(so2.bounded_angle(w, 0.35)).matrix
    _assert_valid(R)
    so2.check_rotation(R)


@given(angles, angles)
def test_homomorphism(a, b):
    lhs = so2.exp_so2(a).matrix @ so2.exp_so2(b).matrix
    rhs = so2.exp_so2(so2.wrap_angle(a + b)).matrix
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


@given(angles, angles, angles)
def test_displacement_consistency(a, b, c):
    Ra, Rb, Rc = Rotation2(a), Rotation2(b), Rotation2(c)
    t_ab = so2.log_so2(Ra.matrix.T @ Rb.matrix)
    t_bc = so2.log_so2(Rb.matrix.T @ Rc.matrix)
    assert abs(so2.angular_diff(Ra, Rc) - abs(so2.wrap_angle(t_ab + t_bc))) <= 1e-12


@settings(max_examples=300)
@given(angles, angles, angles)
def test_angular_diff_is_a_metric(a, b, c):
    Ra, Rb, Rc = Rotation2(a), Rotation2(b), Rotation2(c)
    dab = so2.angular_diff(Ra, Rb)
    assert 0.0 <= dab <= math.pi
    assert dab == so2.angular_diff(Rb, Ra)
    assert so2.angular_diff(Ra, Ra) == 0.0
    assert so2.angular_diff(Ra, Rc) <= dab + so2.angular_diff(Rb, Rc) + 1e-12


@given(st.lists(st.floats(0, math.pi), min_size=1, max_size=8), st.floats(0, 1))
def test_velocity_reg_non_negative(v, beta):
    r = so2.velocity_reg(v, beta)
    assert r >= 0.0
    if beta < 1 and r == 0.0:
        assert all(x == 0 for x in v)


def test_wrap_angle_array():
    out = so2.wrap_angle(np.array([0.0, math.pi, -math.pi, 3 * math.pi, 7.0]))
    assert np.all(out > -math.pi) and np.all(out <= math.pi)
    np.testing.assert_allclose(out, [0.0, math.pi, math.pi, math.pi, 7.0 - 2 * math.pi], atol=1e-12)
