import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flamegaze.geometry import (
    POLE_MARGIN,
    DegenerateVectorError,
    GazeDomainError,
    angles_to_vector,
    angles_to_vector_jacobian,
    angular_error,
    angular_error_from_angles,
    angular_grad_magnitude,
    angular_loss_grad_angles,
    cosine_similarity,
    vector_loss,
    vector_loss_grad_angles,
    vector_to_angles,
)

from helpers import random_unit_vectors

finite_angle = st.floats(-1.5, 1.5, allow_nan=False)
yaw_angle = st.floats(-3.1, 3.1, allow_nan=False)


def test_zero_angles_look_down_negative_z():
    np.testing.assert_array_equal(angles_to_vector([0.0, 0.0]), [-0.0, -0.0, -1.0])


def test_yaw_quarter_turn():
    np.testing.assert_allclose(angles_to_vector([0.0, np.pi / 2]), [-1.0, 0.0, 0.0], atol=1e-15)


def test_pitch_near_pole_approaches_negative_y():
    g = angles_to_vector([np.pi / 2 - 1e-7, 0.0])
    np.testing.assert_allclose(g, [0.0, -1.0, 0.0], atol=1e-6)


@pytest.mark.parametrize("pitch", [np.pi / 2, -np.pi / 2, 2.0])
def test_pitch_outside_open_interval_rejected(pitch):
    with pytest.raises(GazeDomainError):
        angles_to_vector([pitch, 0.0])


@given(finite_angle, yaw_angle)
def test_angles_to_vector_unit_norm(p, y):
    assert abs(np.linalg.norm(angles_to_vector([p, y])) - 1.0) < 1e-12


def test_vector_to_angles_inverse_examples():
    np.testing.assert_allclose(vector_to_angles([0.0, 0.0, -1.0]), [0.0, 0.0], atol=0)
    pitch, yaw = vector_to_angles([0.0, -1.0, 0.0])
    assert pitch == np.pi / 2 - POLE_MARGIN
    pitch, _ = vector_to_angles([0.0, 1.0, 0.0])
    assert pitch == -(np.pi / 2 - POLE_MARGIN)


def test_vector_to_angles_degenerate():
    with pytest.raises(DegenerateVectorError):
        vector_to_angles([0.0, 0.0, 1e-13])


def test_yaw_range_is_half_open():
    # straight +z is yaw pi, never -pi
    _, yaw = vector_to_angles([0.0, 0.0, 1.0])
    assert yaw == np.pi
    _, yaw = vector_to_angles([-0.0, 0.0, 1.0])
    assert yaw == np.pi


def test_round_trip_1000_seeded_angles():
    rng = np.random.default_rng(0)
    a = np.stack([rng.uniform(-math.radians(89), math.radians(89), 1000), rng.uniform(-np.pi + 1e-6, np.pi, 1000)], 1)
    back = vector_to_angles(angles_to_vector(a))
    assert np.max(np.abs(back - a)) < 1e-9


def test_round_trip_vectors(rng):
    g = random_unit_vectors(rng, 1000) * rng.uniform(0.1, 10, (1000, 1))
    back = angles_to_vector(vector_to_angles(g))
    np.testing.assert_allclose(back, g / np.linalg.norm(g, axis=1, keepdims=True), atol=1e-9)


def test_angular_error_examples():
    assert angular_error([0, 0, -1.0], [0, 0, -1.0]) == 0.0
    assert angular_error([1.0, 0, 0], [0, 1.0, 0]) == pytest.approx(90.0, abs=1e-12)
    assert angular_error([2.0, 0, 0], [1.0, 0, 0]) == 0.0
    assert angular_error([1.0, 0, 0], [-1.0, 0, 0]) == pytest.approx(180.0)


def test_angular_error_clamps_cosine():
    # rounding can push the normalised dot product just above 1
    v = np.array([0.1, 0.2, 0.3])
    assert np.isfinite(angular_error(v, v * 3.0000000001))


def test_angular_error_degenerate():
    with pytest.raises(DegenerateVectorError):
        angular_error([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])


def test_angular_error_independent_oracle(rng):
    # atan2(|a x b|, a.b) is an independent, well conditioned formula
    a, b = random_unit_vectors(rng, 500), random_unit_vectors(rng, 500)
    ref = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1)))
    np.testing.assert_allclose(angular_error(a, b), ref, atol=1e-6)


def test_angular_error_from_angles_matches_vectors(rng):
    p = rng.uniform(-0.5, 0.5, (20, 2))
    t = rng.uniform(-0.5, 0.5, (20, 2))
    np.testing.assert_array_equal(
        angular_error_from_angles(p, t), angular_error(angles_to_vector(p), angles_to_vector(t))
    )


@given(st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_angular_error_scale_invariant(k, seed):
    r = np.random.default_rng(seed)
    a, b = random_unit_vectors(r, 2)
    assert abs(angular_error(k * a, b) - angular_error(a, b)) <= 1e-12 * 180


@given(st.integers(0, 2**31))
def test_symmetry(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=3), r.normal(size=3)
    assert angular_error(a, b) == angular_error(b, a)
    assert vector_loss(a, b) == vector_loss(b, a)


def test_vector_loss_examples():
    assert vector_loss([0.3, 0.4, 0.5], [0.3, 0.4, 0.5]) == 0.0
    assert vector_loss([1.0, 0, 0], [0, 1.0, 0]) == 2.0


def test_vector_loss_identity_with_angle(rng):
    a, b = random_unit_vectors(rng, 1000), random_unit_vectors(rng, 1000)
    theta = np.radians(angular_error(a, b))
    np.testing.assert_allclose(vector_loss(a, b), 2.0 * (1.0 - np.cos(theta)), atol=1e-9)


def test_cosine_similarity_bounds(rng):
    c = cosine_similarity(rng.normal(size=(100, 3)), rng.normal(size=(100, 3)))
    assert np.all(np.abs(c) <= 1.0 + 1e-15)


def test_angular_grad_magnitude_examples():
    assert angular_grad_magnitude(0.0) == 1.0
    assert angular_grad_magnitude(0.8) == pytest.approx(1.0 / 0.6, rel=1e-12)
    assert angular_grad_magnitude(0.9999) > 70
    for bad in (1.0, -1.0, 1.5):
        with pytest.raises(GazeDomainError):
            angular_grad_magnitude(bad)


def test_angular_grad_magnitude_is_arccos_derivative():
    x = np.linspace(-0.95, 0.95, 41)
    h = 1e-6
    fd = -(np.arccos(x + h) - np.arccos(x - h)) / (2 * h)
    np.testing.assert_allclose(angular_grad_magnitude(x), fd, rtol=1e-7)


@given(st.floats(0.0, 0.98), st.floats(1e-4, 0.01))
def test_angular_grad_magnitude_monotone(x, dx):
    assert angular_grad_magnitude(x + dx) > angular_grad_magnitude(x)


def test_jacobian_matches_central_differences(rng):
    a = rng.uniform(-1.2, 1.2, (10, 2))
    h = 1e-6
    jac = angles_to_vector_jacobian(a)
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (angles_to_vector(a + e) - angles_to_vector(a - e)) / (2 * h)
        np.testing.assert_allclose(jac[..., k], fd, atol=1e-9)


@pytest.mark.parametrize("fn,ref", [(vector_loss_grad_angles, "vector"), (angular_loss_grad_angles, "angular")])
def test_loss_gradients_match_finite_differences(rng, fn, ref):
    p = rng.uniform(-0.6, 0.6, (6, 2))
    t = rng.uniform(-0.6, 0.6, (6, 2))
    loss, grad = fn(p, t)
    if ref == "vector":
        assert loss == pytest.approx(np.mean(vector_loss(angles_to_vector(p), angles_to_vector(t))), abs=1e-15)
    else:
        assert loss == pytest.approx(np.mean(np.radians(angular_error_from_angles(p, t))), abs=1e-12)
    h = 1e-6
    fd = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        d = np.zeros_like(p)
        d[i] = h
        fd[i] = (fn(p + d, t)[0] - fn(p - d, t)[0]) / (2 * h)
    np.testing.assert_allclose(grad, fd, atol=1e-8)


def test_angular_loss_gradient_diverges_at_zero_error():
    t = np.array([[0.1, 0.2]])
    _, grad = angular_loss_grad_angles(t, t)
    assert not np.all(np.isfinite(grad))
