import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ssrkit.errors import NonFiniteError, ShapeError
from ssrkit.tensor import as_tensor, matmul, pinv, solve_least_squares, svd, sym_inv_sqrt


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


class TestAsTensor:
    def test_float32_and_readonly(self):
        t = as_tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        with pytest.raises(ValueError):
            t[0, 0] = 5

    def test_reshape_checks_count(self):
        assert as_tensor(range(6), shape=[2, 3]).shape == (2, 3)
        with pytest.raises(ShapeError):
            as_tensor(range(6), shape=[4, 2])

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(NonFiniteError):
            as_tensor([1.0, bad])


def test_matmul_identity_and_hand_case():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(np.eye(2), a), a)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)).astype(np.float32), rng.standard_normal((7, 3)).astype(np.float32)
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), atol=1e-6)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_associative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (rng.standard_normal(s) for s in [(4, 5), (5, 6), (6, 3)])
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) <= 1e-5 * np.linalg.norm(left)


class TestSvd:
    def test_identity(self):
        _, s, _ = svd(np.eye(2))
        np.testing.assert_allclose(s, [1, 1])

    def test_diag_sorted(self):
        _, s, _ = svd(np.diag([3.0, 4.0]))
        np.testing.assert_allclose(s, [4, 3])

    def test_random_6x4(self):
        a = np.random.default_rng(2).standard_normal((6, 4))
        u, s, vt = svd(a)
        assert u.shape == (6, 4) and s.shape == (4,) and vt.shape == (4, 4)
        assert np.linalg.norm(u @ np.diag(s) @ vt - a) <= 1e-5 * np.linalg.norm(a)
        np.testing.assert_allclose(u.T @ u, np.eye(4), atol=1e-5)
        np.testing.assert_allclose(vt @ vt.T, np.eye(4), atol=1e-5)
        assert np.all(np.diff(s) <= 0)

    def test_sign_convention(self):
        a = np.random.default_rng(3).standard_normal((5, 5))
        u, _, _ = svd(a)
        for j in range(u.shape[1]):
            first = u[np.flatnonzero(np.abs(u[:, j]) > 1e-12)[0], j]
            assert first >= 0
        # flipping the input's sign flips V, never U
        u2, _, vt2 = svd(-a)
        np.testing.assert_allclose(u2, u, atol=1e-10)

    def test_transpose_same_values(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = rng.standard_normal((rng.integers(1, 8), rng.integers(1, 8)))
            np.testing.assert_allclose(svd(a)[1], svd(a.T)[1], atol=1e-6)

    def test_rejects_bad_input(self):
        with pytest.raises(ShapeError):
            svd(np.ones(3))
        with pytest.raises(NonFiniteError):
            svd(np.array([[1.0, np.nan]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-1e3, 1e3, allow_nan=False, width=32)))
def test_svd_reconstructs_any_matrix(a):
    u, s, vt = svd(a)
    scale = max(np.linalg.norm(a), 1e-30)
    assert np.linalg.norm(u @ np.diag(s) @ vt - a) <= 1e-5 * scale
    assert np.all(s >= 0)


class TestLeastSquares:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(solve_least_squares(np.eye(2), b), b)

    def test_diagonal_scaling(self):
        np.testing.assert_allclose(solve_least_squares(np.diag([2.0, 4.0]), [[2.0, 4.0]]), [[1.0, 1.0]])

    def test_singular_matches_explicit_pinv(self):
        a = np.diag([1.0, 0.0])
        b = np.array([[3.0, 5.0], [-1.0, 2.0]])
        # pseudoinverse of diag(1, 0) is diag(1, 0)
        np.testing.assert_allclose(solve_least_squares(a, b), b @ np.diag([1.0, 0.0]))

    def test_residual_gradient_small(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(1, 8))
            a = rng.standard_normal((n, n))
            b = rng.standard_normal((int(rng.integers(1, 6)), n))
            x = solve_least_squares(a, b)
            g = 2 * (x @ a - b) @ a.T
            assert np.linalg.norm(g) <= 1e-6 * max(np.linalg.norm(b), 1.0)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            solve_least_squares(np.ones((2, 3)), np.ones((1, 3)))
        with pytest.raises(ShapeError):
            solve_least_squares(np.eye(2), np.ones((1, 3)))


def test_pinv_matches_numpy():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((5, 3)) @ rng.standard_normal((3, 4))  # rank 3
    np.testing.assert_allclose(pinv(a), np.linalg.pinv(a), atol=1e-10)


def test_sym_inv_sqrt():
    rng = np.random.default_rng(7)
    b = rng.standard_normal((4, 4))
    m = b @ b.T + 0.1 * np.eye(4)
    r = sym_inv_sqrt(m)
    np.testing.assert_allclose(r @ m @ r, np.eye(4), atol=1e-9)
    np.testing.assert_allclose(r, r.T)
    # zero eigenvalues are floored, not inverted
    assert np.all(np.isfinite(sym_inv_sqrt(np.zeros((3, 3)))))
