import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaugeflow import group
from gaugeflow.group import T


def rotation_about(axis, angle):
    """Rodrigues formula, an independent oracle for expm on so(3)."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


@pytest.mark.parametrize("angle", [0.0, 0.3, 1.5, 3.0, -2.2])
def test_expm_planar_rotation(angle):
    expected = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    np.testing.assert_allclose(group.expm(angle * group.J2()), expected, atol=1e-14)


@pytest.mark.parametrize("axis,angle", [((1, 0, 0), 0.7), ((1, 2, 3), 2.5), ((0, -1, 1), 3.1)])
def test_expm_matches_rodrigues(axis, angle):
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    np.testing.assert_allclose(group.expm(angle * K), rotation_about(axis, angle), atol=1e-13)


def test_so3_basis_bracket_relation():
    L1, L2, L3 = group.so3_basis()
    np.testing.assert_array_equal(group.bracket(L1, L2), L3)


@pytest.mark.parametrize("r", [2, 3, 4, 5])
def test_skew_basis_is_orthonormal(r):
    B = group.skew_basis(r)
    assert len(B) == r * (r - 1) // 2
    gram = np.einsum("aij,bij->ab", B, B)
    np.testing.assert_allclose(gram, np.eye(len(B)), atol=1e-15)
    np.testing.assert_array_equal(B, -T(B))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.sampled_from([2, 3, 4]), scale=st.floats(0.01, 0.9))
def test_log_inverts_exp_near_identity(seed, r, scale):
    rng = np.random.default_rng(seed)
    a = group.random_skew(rng, r, shape=(5,))
    a *= scale / np.linalg.norm(a, ord=2, axis=(-2, -1))[..., None, None]
    g = group.expm(a)
    assert np.max(group.orthogonality_defect(g)) < 1e-14
    np.testing.assert_allclose(group.logm(g), a, atol=1e-12)


@pytest.mark.parametrize("r", [2, 3])
@pytest.mark.parametrize("scale", [1e-6, 1e-3, 0.5, 2.0])
def test_closed_forms_match_the_series(r, scale):
    rng = np.random.default_rng(11)
    a = group.random_skew(rng, r, shape=(20,))
    a *= scale / np.linalg.norm(a, ord=2, axis=(-2, -1))[..., None, None]
    series = group._polar_newton(group._expm_series(a))
    np.testing.assert_allclose(group.expm(a), series, atol=1e-14)
    np.testing.assert_allclose(group.logm(series), a, atol=1e-13 * max(1.0, scale))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_exp_at_and_log_at_are_inverse(seed):
    rng = np.random.default_rng(seed)
    u0 = group.random_rotation(rng, 3)
    X = u0 @ group.random_skew(rng, 3, scale=0.3)
    u = group.exp_at(u0, X)
    np.testing.assert_allclose(group.log_at(u0, u), X, atol=1e-12)


def test_logm_refuses_half_turn():
    half_turn = group.expm(np.pi * group.J2())
    with pytest.raises(group.InjectivityError, match="outside injectivity neighborhood"):
        group.logm(half_turn)


def test_exp_at_rejects_non_tangent_vector():
    with pytest.raises(group.TangencyError):
        group.exp_at(np.eye(3), np.eye(3))


def test_expm_rejects_symmetric_input():
    with pytest.raises(ValueError):
        group.expm(np.eye(2))


@pytest.mark.parametrize("r", [2, 3, 5])
def test_random_rotation_is_special_orthogonal(r):
    q = group.random_rotation(np.random.default_rng(4), r, shape=(20,))
    assert np.max(group.orthogonality_defect(q)) < 1e-13
    np.testing.assert_allclose(group.det(q), 1.0, atol=1e-13)


def test_retract_is_polar_factor():
    rng = np.random.default_rng(0)
    q = group.random_rotation(rng, 3, shape=(10,))
    p = group.expm(group.skew(rng.standard_normal((10, 3, 3))) * 0.0) + 0.05 * group.sym(rng.standard_normal((10, 3, 3)))
    m = q @ p
    out = group.retract(m)
    np.testing.assert_allclose(out, q, atol=1e-13)


def test_retract_refuses_reflections():
    with pytest.raises(group.RetractionError, match="det"):
        group.retract(np.diag([1.0, -1.0]))


def test_retract_refuses_far_matrices():
    with pytest.raises(group.RetractionError):
        group.retract(3.0 * np.eye(2))


@pytest.mark.parametrize("r", [2, 3, 4])
def test_inv_transpose_matches_numpy(r):
    m = np.random.default_rng(r).standard_normal((6, r, r)) + 3 * np.eye(r)
    np.testing.assert_allclose(group.inv_transpose(m), np.linalg.inv(m).swapaxes(-1, -2), rtol=1e-12)
