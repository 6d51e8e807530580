import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steinlab.errors import DiagonalUndefined, NotPositiveSemidefinite
from steinlab.kernels import (
    Kernel,
    as_points,
    cross_trace,
    evaluate,
    factorize,
    gram,
    grad_x,
    grad_y,
    sqrt_and_pinv,
    write_gram_csv,
)

KERNELS = [
    Kernel("gaussian", sigma=0.8),
    Kernel("exp-power", sigma=1.3, p=1.5),
    Kernel("exp-power", sigma=1.0, p=1.0),
    Kernel("imq", sigma=1.1, imq_beta=0.5),
    Kernel("matern32", sigma=0.9),
    Kernel("matern52", sigma=1.2),
    Kernel("gaussian", sigma=2.0, scale=3.0),
]


def fd_grad_y(k, x, y, h=1e-6):
    out = np.zeros_like(y)
    for a in range(y.size):
        e = np.zeros_like(y)
        e[a] = h
        out[a] = (evaluate(k, x, y + e) - evaluate(k, x, y - e)) / (2 * h)
    return out


def fd_mixed(k, x, y, h=1e-4):
    d = x.size
    H = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            ea, eb = np.zeros(d), np.zeros(d)
            ea[a], eb[b] = h, h
            H[a, b] = (
                evaluate(k, x + ea, y + eb)
                - evaluate(k, x + ea, y - eb)
                - evaluate(k, x - ea, y + eb)
                + evaluate(k, x - ea, y - eb)
            ) / (4 * h * h)
    return H


class TestConstruction:
    def test_gaussian_is_exp_power_two(self):
        X = np.random.default_rng(0).normal(size=(6, 2))
        np.testing.assert_allclose(
            Kernel("gaussian", 1.3).matrix(X), Kernel("exp-power", 1.3, p=2.0).matrix(X), rtol=0, atol=1e-15
        )

    @pytest.mark.parametrize(
        "kw",
        [
            {"family": "rbf"},
            {"family": "gaussian", "sigma": 0.0},
            {"family": "exp-power", "p": 2.5},
            {"family": "exp-power", "p": 0.0},
            {"family": "imq", "imq_beta": 1.0},
            {"family": "gaussian", "scale": -1.0},
            {"family": "gaussian", "diag_grad_convention": "nan"},
            {"family": "gaussian", "diag_cross_convention": "guess"},
        ],
    )
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            Kernel(**kw)

    def test_default_conventions(self):
        assert Kernel("gaussian").diag_cross_convention == "analytic-limit"
        assert Kernel("exp-power", p=1.0).diag_cross_convention == "undefined-error"
        assert Kernel("exp-power", p=1.0, diag_cross_convention="zero").cross_defined_on_diagonal
        assert not Kernel("exp-power", p=1.0).cross_defined_on_diagonal

    def test_as_points(self):
        assert as_points(1.0).shape == (1, 1)
        assert as_points([1.0, 2.0]).shape == (1, 2)
        with pytest.raises(ValueError):
            as_points(np.zeros((2, 2, 2)))


class TestValues:
    def test_closed_forms(self):
        x, y = np.array([0.3, -0.2]), np.array([-0.5, 0.4])
        r = np.linalg.norm(x - y)
        assert evaluate(Kernel("gaussian", 1.5), x, y) == pytest.approx(np.exp(-(r**2) / 2.25), rel=1e-14)
        assert evaluate(Kernel("exp-power", 1.5, p=1.0), x, y) == pytest.approx(np.exp(-r / 1.5), rel=1e-14)
        assert evaluate(Kernel("imq", 1.5, imq_beta=0.5), x, y) == pytest.approx((1 + r**2 / 2.25) ** -0.5, rel=1e-14)
        a = np.sqrt(3) / 1.5
        assert evaluate(Kernel("matern32", 1.5), x, y) == pytest.approx((1 + a * r) * np.exp(-a * r), rel=1e-14)
        a = np.sqrt(5) / 1.5
        expected = (1 + a * r + (a * r) ** 2 / 3) * np.exp(-a * r)
        assert evaluate(Kernel("matern52", 1.5), x, y) == pytest.approx(expected, rel=1e-14)

    def test_two_point_gram_eigenvalues(self):
        # K = [[1, e^-1], [e^-1, 1]] has eigenvalues 1 -+ e^-1
        fact = gram(Kernel("gaussian", 1.0), [[0.0], [1.0]])
        np.testing.assert_allclose(fact.eigenvalues, [1 + np.exp(-1), 1 - np.exp(-1)], rtol=1e-14)

    def test_scaling(self):
        X = np.random.default_rng(1).normal(size=(7, 3))
        for k in KERNELS:
            np.testing.assert_allclose(k.scaled(2.5).matrix(X), 2.5 * k.matrix(X), rtol=1e-14)
            np.testing.assert_allclose(
                k.scaled(2.5).grad_y_matrix(X), 2.5 * k.grad_y_matrix(X), rtol=1e-13, atol=1e-15
            )


class TestDerivatives:
    @pytest.mark.parametrize("k", KERNELS, ids=lambda k: f"{k.family}-{k.p}")
    def test_grad_y_matches_finite_differences(self, k):
        rng = np.random.default_rng(2)
        for _ in range(5):
            x, y = rng.normal(size=3), rng.normal(size=3)
            np.testing.assert_allclose(grad_y(k, x, y), fd_grad_y(k, x, y), rtol=1e-6, atol=1e-9)
            np.testing.assert_allclose(grad_x(k, x, y), -grad_y(k, x, y), rtol=1e-14)

    @pytest.mark.parametrize("k", KERNELS, ids=lambda k: f"{k.family}-{k.p}")
    def test_mixed_hessian_and_cross_trace(self, k):
        rng = np.random.default_rng(3)
        for _ in range(5):
            x, y = rng.normal(size=2), rng.normal(size=2)
            H = fd_mixed(k, x, y)
            np.testing.assert_allclose(k.mixed_hessian(x, y)[0, 0], H, rtol=1e-4, atol=1e-6)
            assert cross_trace(k, x, y) == pytest.approx(np.trace(H), rel=1e-4, abs=1e-6)

    def test_gradient_is_zero_on_diagonal(self):
        for k in KERNELS:
            np.testing.assert_array_equal(grad_y(k, [0.4, 0.1], [0.4, 0.1]), [0.0, 0.0])

    def test_analytic_limit_on_diagonal(self):
        # -d h(0) with h(0) = -2/sigma^2 for the gaussian
        k = Kernel("gaussian", 0.7)
        assert cross_trace(k, [0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) == pytest.approx(6 / 0.49, rel=1e-14)
        eps = 1e-5
        assert cross_trace(k, [0.0], [eps]) == pytest.approx(cross_trace(k, [0.0], [0.0]), rel=1e-8)

    def test_rough_kernel_diagonal(self):
        k = Kernel("exp-power", p=1.0)
        with pytest.raises(DiagonalUndefined):
            cross_trace(k, [0.0], [0.0])
        with pytest.raises(DiagonalUndefined):
            k.mixed_hessian([[0.0], [1.0]])
        z = Kernel("exp-power", p=1.0, diag_cross_convention="zero")
        assert cross_trace(z, [0.0], [0.0]) == 0.0
        assert np.isfinite(cross_trace(k, [0.0], [0.5]))


class TestGram:
    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(1, 12),
        d=st.integers(1, 3),
        seed=st.integers(0, 2**31),
        idx=st.integers(0, len(KERNELS) - 1),
    )
    def test_symmetric_psd(self, n, d, seed, idx):
        k = KERNELS[idx]
        X = np.random.default_rng(seed).normal(size=(n, d))
        K = k.matrix(X)
        np.testing.assert_array_equal(K, K.T)
        fact = gram(k, X)
        assert fact.eigenvalues[-1] >= -1e-12 * fact.lambda_max
        np.testing.assert_allclose(fact.sqrt() @ fact.sqrt(), fact.reconstruct(), atol=1e-10 * fact.lambda_max)

    def test_pinv_and_quadratic_form(self):
        X = np.linspace(-1, 1, 5)[:, None]
        fact = gram(Kernel("gaussian", 1.0), X)
        S, P = sqrt_and_pinv(fact)
        K = fact.gram
        np.testing.assert_allclose(K @ P @ K, K, atol=1e-9)
        v = np.random.default_rng(4).normal(size=(5, 1))
        assert fact.inverse_quadratic_form(v) == pytest.approx(float(v[:, 0] @ P @ v[:, 0]), rel=1e-12)

    def test_duplicate_points_are_rank_deficient(self):
        fact = gram(Kernel("gaussian", 1.0), [[0.0], [0.0], [1.0]])
        assert fact.rank == 2

    def test_indefinite_matrix_rejected(self):
        with pytest.raises(NotPositiveSemidefinite):
            factorize(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_csv_output(self):
        buf = io.StringIO()
        write_gram_csv(np.array([[1.0, 0.5], [0.5, 1.0]]), buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "i,j,value"
        assert lines[2] == "0,1,0.5"
        assert len(lines) == 5


class TestSerialisation:
    @pytest.mark.parametrize("k", KERNELS + [Kernel("exp-power", p=1.0, diag_cross_convention="zero")])
    def test_round_trip(self, k):
        assert Kernel.from_json(k.to_json()) == k
        assert Kernel.from_dict(k.to_dict()) == k

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            Kernel.from_dict({"family": "gaussian", "bandwidth": 1.0})
        with pytest.raises(ValueError):
            Kernel.from_dict({"sigma": 1.0})
