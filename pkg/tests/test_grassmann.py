import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedpca.errors import DegenerateStepError, DimensionError
from fedpca.grassmann import (GrassmannPoint, TangentVector, principal_angles, project_to_tangent,
                              retract)
from fedpca.numerics import frobenius_inner, orthonormality_error

from conftest import random_orthonormal

seeds = st.integers(0, 2**32 - 1)


def shapes():
    return st.integers(2, 8).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d - 1)))


def test_point_rejects_bad_inputs():
    with pytest.raises(ValueError):
        GrassmannPoint(np.ones((3, 1)))
    with pytest.raises(DimensionError):
        GrassmannPoint(np.eye(2))  # k must be below d


def test_point_is_read_only(rng):
    p = GrassmannPoint(random_orthonormal(rng, 4, 2))
    with pytest.raises(ValueError):
        p.basis[0, 0] = 1.0


def test_projection_examples(rng):
    p = GrassmannPoint(random_orthonormal(rng, 5, 2))
    assert np.allclose(project_to_tangent(p, p.basis).delta, 0, atol=1e-14)
    g = rng.standard_normal((5, 2))
    g = g - p.basis @ (p.basis.T @ g)
    np.testing.assert_allclose(project_to_tangent(p, g).delta, g, atol=1e-14)
    e1 = GrassmannPoint(np.array([[1.0], [0.0], [0.0]]))
    np.testing.assert_allclose(project_to_tangent(e1, np.array([[1.0], [2.0], [3.0]])).delta,
                               [[0], [2], [3]])


def test_projection_shape_mismatch(rng):
    p = GrassmannPoint(random_orthonormal(rng, 4, 2))
    with pytest.raises(DimensionError):
        project_to_tangent(p, np.zeros((4, 3)))


def test_tangent_vector_check(rng):
    p = GrassmannPoint(random_orthonormal(rng, 4, 2))
    with pytest.raises(ValueError):
        TangentVector(p.basis.copy(), p)


def test_retract_examples():
    e1 = GrassmannPoint(np.array([[1.0], [0.0], [0.0]]))
    zero = TangentVector(np.zeros((3, 1)), e1)
    assert retract(e1, zero, 0.7) is e1
    v = TangentVector(np.array([[0.0], [1.0], [0.0]]), e1)
    assert retract(e1, v, 0.0) is e1
    out = retract(e1, v, 1.0)
    np.testing.assert_allclose(out.basis, [[2 ** -0.5], [-(2 ** -0.5)], [0.0]], atol=1e-15)


def test_retract_zero_vector_positive_qr_is_identity(rng):
    p = GrassmannPoint(np.linalg.qr(rng.standard_normal((5, 2)))[0])
    v = TangentVector(np.zeros((5, 2)), p)
    assert retract(p, v, 1.0).basis.tobytes() == p.basis.tobytes()


def test_retract_rejects_foreign_vector(rng):
    p = GrassmannPoint(random_orthonormal(rng, 4, 2))
    q = GrassmannPoint(random_orthonormal(rng, 4, 2))
    v = project_to_tangent(q, rng.standard_normal((4, 2)))
    with pytest.raises(ValueError):
        retract(p, v, 0.1)


def test_retract_degenerate_step():
    # (A - sD)^T (A - sD) = I + s^2 D^T D for tangent D, so only overflow can collapse a step
    p = GrassmannPoint(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
    v = TangentVector(np.array([[0.0, 0.0], [0.0, 0.0], [1e300, 1e300]]), p)
    with np.errstate(over="ignore"), pytest.raises(DegenerateStepError):
        retract(p, v, 1e300)


def test_ten_thousand_retractions_stay_orthonormal():
    rng = np.random.default_rng(7)
    worst = 0.0
    p = GrassmannPoint(random_orthonormal(rng, 12, 4))
    for i in range(10_000):
        if i % 100 == 0:
            d = int(rng.integers(2, 13))
            k = int(rng.integers(1, d))
            p = GrassmannPoint(random_orthonormal(rng, d, k))
        v = project_to_tangent(p, rng.standard_normal(p.shape) * rng.uniform(0.01, 10))
        p = retract(p, v, float(rng.uniform(0, 2)))
        worst = max(worst, orthonormality_error(p.basis))
    assert worst <= 1e-8


@given(seeds, shapes(), st.floats(0.0, 5.0))
def test_retraction_preserves_orthonormality(seed, shape, step):
    rng = np.random.default_rng(seed)
    p = GrassmannPoint(random_orthonormal(rng, *shape))
    v = project_to_tangent(p, rng.standard_normal(shape))
    assert orthonormality_error(retract(p, v, step).basis) <= 1e-8


@given(seeds, shapes())
def test_projection_idempotent_and_self_adjoint(seed, shape):
    rng = np.random.default_rng(seed)
    p = GrassmannPoint(random_orthonormal(rng, *shape))
    g, h = rng.standard_normal(shape), rng.standard_normal(shape)
    pg = project_to_tangent(p, g).delta
    np.testing.assert_allclose(project_to_tangent(p, pg).delta, pg, atol=1e-12)
    ph = project_to_tangent(p, h).delta
    assert frobenius_inner(pg, h) == pytest.approx(frobenius_inner(g, ph), abs=1e-10)
    assert np.linalg.norm(p.basis.T @ pg) <= 1e-8 * max(1.0, np.linalg.norm(pg))


def test_principal_angle_examples(rng):
    p = GrassmannPoint(random_orthonormal(rng, 6, 3))
    assert np.all(principal_angles(p, p) <= 1e-7)
    flipped = p.basis[:, [2, 0, 1]] * np.array([1.0, -1.0, 1.0])
    assert np.all(principal_angles(p, GrassmannPoint(flipped)) <= 1e-7)
    a = GrassmannPoint(np.array([[1.0], [0.0]]))
    b = GrassmannPoint(np.array([[0.0], [1.0]]))
    assert principal_angles(a, b)[0] == pytest.approx(np.pi / 2)


def test_principal_angles_small_angle_accuracy():
    t = 1e-9
    a = GrassmannPoint(np.array([[1.0], [0.0], [0.0]]))
    b = GrassmannPoint(np.array([[np.cos(t)], [np.sin(t)], [0.0]]))
    assert principal_angles(a, b)[0] == pytest.approx(t, rel=1e-6)


@given(seeds, shapes())
def test_principal_angles_symmetric_and_bounded(seed, shape):
    rng = np.random.default_rng(seed)
    p = GrassmannPoint(random_orthonormal(rng, *shape))
    q = GrassmannPoint(random_orthonormal(rng, *shape))
    a, b = principal_angles(p, q), principal_angles(q, p)
    np.testing.assert_allclose(a, b, atol=1e-10)
    assert np.all(a >= 0) and np.all(a <= np.pi / 2 + 1e-12)


@given(seeds, shapes())
def test_principal_angles_match_cosine_oracle(seed, shape):
    # away from 0 and pi/2 the plain arccos of the singular values is accurate
    rng = np.random.default_rng(seed)
    p = GrassmannPoint(random_orthonormal(rng, *shape))
    q = GrassmannPoint(random_orthonormal(rng, *shape))
    cos = np.linalg.svd(p.basis.T @ q.basis, compute_uv=False)
    ref = np.sort(np.arccos(np.clip(cos, 0, 1)))
    ok = (ref > 1e-3) & (ref < np.pi / 2 - 1e-3)
    np.testing.assert_allclose(principal_angles(p, q)[ok], ref[ok], atol=1e-8)
