import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatemppi.geometry import (RigidTransform, RngStream, counter_normals, encoding_size, positional_encoding,
                               quat_from_axis_angle, quat_from_euler, quat_from_matrix, quat_mul, quat_to_matrix,
                               rotate, transform_point, yaw_is_degenerate, yaw_of)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_transform(rng):
    return RigidTransform(random_quat(rng), rng.normal(size=3) * 3)


def test_rotate_identity_and_quarter_turn():
    assert np.allclose(rotate(np.array([1.0, 0, 0, 0]), [1, 2, 3]), [1, 2, 3])
    q = quat_from_axis_angle((0, 0, 1), np.pi / 2)
    assert np.allclose(rotate(q, [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_rotate_matches_matrix_oracle():
    # Rodrigues' formula written independently of the quaternion code
    rng = np.random.default_rng(0)
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(-np.pi, np.pi)
        v = rng.normal(size=3)
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K
        assert np.allclose(rotate(quat_from_axis_angle(axis, ang), v), R @ v, atol=1e-12)


@given(vec3, st.floats(-np.pi, np.pi))
@settings(max_examples=100, deadline=None)
def test_rotate_preserves_norm(v, ang):
    q = quat_from_axis_angle((0.3, -0.5, 0.8), ang)
    assert abs(np.linalg.norm(rotate(q, v)) - np.linalg.norm(v)) < 1e-9


def test_quat_mul_is_composition():
    rng = np.random.default_rng(1)
    a, b = random_quat(rng), random_quat(rng)
    assert np.allclose(quat_to_matrix(quat_mul(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


def test_quat_matrix_round_trip_up_to_sign():
    rng = np.random.default_rng(2)
    for _ in range(100):
        q = random_quat(rng)
        r = quat_from_matrix(quat_to_matrix(q))
        assert min(np.abs(r - q).max(), np.abs(r + q).max()) < 1e-9


def test_transform_point_cases():
    assert np.allclose(transform_point(RigidTransform(), [4, 5, 6]), [4, 5, 6])
    assert np.allclose(transform_point(RigidTransform(translation=[1, 0, 0]), [0, 0, 0]), [1, 0, 0])
    rng = np.random.default_rng(3)
    for _ in range(100):
        T = random_transform(rng)
        p = rng.normal(size=3)
        assert np.allclose(T.inverse().apply(T.apply(p)), p, atol=1e-9)


def test_compose_is_associative_and_inverse_is_identity():
    rng = np.random.default_rng(4)
    A, B, C = (random_transform(rng) for _ in range(3))
    p = rng.normal(size=(10, 3))
    assert np.allclose(A.compose(B).compose(C).apply(p), A.compose(B.compose(C)).apply(p), atol=1e-9)
    I = A.inverse().compose(A)
    assert np.allclose(I.as_matrix(), np.eye(4), atol=1e-9)


def test_vector_round_trip_is_exact():
    T = random_transform(np.random.default_rng(5))
    assert np.array_equal(RigidTransform.from_vector(T.as_vector()).as_vector(), T.as_vector())


def test_positional_encoding_shape_and_values():
    e = positional_encoding(np.zeros(3), bands=4)
    assert e.shape == (27,) == (encoding_size(4),)
    sins = np.concatenate([e[3 + 6 * k: 6 + 6 * k] for k in range(4)])
    coss = np.concatenate([e[6 + 6 * k: 9 + 6 * k] for k in range(4)])
    assert np.all(sins == 0) and np.all(coss == 1)
    p = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(positional_encoding(p), positional_encoding(p.copy()))
    assert encoding_size(3, include_input=False) == positional_encoding(p, 3, include_input=False).size == 18


def test_positional_encoding_bounded_with_scale():
    p = np.random.default_rng(6).uniform(-12, 12, size=(1000, 3))
    assert np.abs(positional_encoding(p, scale=12.0)).max() <= 1.0


def test_yaw_of():
    assert yaw_of(np.array([1.0, 0, 0, 0])) == 0.0
    assert np.isclose(yaw_of(quat_from_axis_angle((0, 0, 1), np.pi / 2)), np.pi / 2)
    for yaw in np.linspace(-3, 3, 13):
        assert np.isclose(yaw_of(quat_from_euler(0.2, -0.3, yaw)), yaw)


def test_yaw_degenerate_at_gimbal_lock():
    assert yaw_is_degenerate(quat_from_euler(0, np.pi / 2, 0))
    assert not yaw_is_degenerate(quat_from_euler(0, 0.3, 1.0))


def test_rng_streams_reproducible_and_independent():
    a = RngStream(42, 7).normal(size=100)
    assert np.array_equal(a, RngStream(42, 7).normal(size=100))
    assert not np.array_equal(a, RngStream(42, 8).normal(size=100))
    assert not np.array_equal(a, RngStream(43, 7).normal(size=100))


def test_counter_normals_random_access():
    full = counter_normals(9, np.arange(5), 0, 20)
    part = counter_normals(9, np.arange(2, 4), 8, 6)
    assert np.array_equal(full[2:4, 8:14], part)
    big = counter_normals(1, np.arange(200), 0, 500)
    assert abs(big.mean()) < 0.01 and abs(big.std() - 1) < 0.01

