import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from steinlab.errors import Unsupported
from steinlab.targets import Target, potential, reference_moments, score

TARGETS = [
    Target.standard_gaussian(2),
    Target.gaussian([1.0, -0.5], [[2.0, 0.3], [0.3, 0.5]]),
    Target.gaussian_mixture([0.3, 0.7], [[-1.0, 0.0], [1.5, 0.5]], [np.eye(2), 0.5 * np.eye(2)]),
    Target.double_well(1.0, 2.0, dim=2),
    Target.double_well(0.5, 1.0, dim=1),
]


def fd_score(t, x, h=1e-6):
    g = np.zeros_like(x)
    for a in range(x.size):
        e = np.zeros_like(x)
        e[a] = h
        g[a] = (t.potential(x + e) - t.potential(x - e)) / (2 * h)
    return g


class TestScore:
    @pytest.mark.parametrize("t", TARGETS, ids=lambda t: t.family)
    def test_score_is_potential_gradient(self, t):
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(size=t.dim)
            np.testing.assert_allclose(t.score(x), fd_score(t, x), rtol=1e-6, atol=1e-8)

    def test_shapes(self):
        t = Target.standard_gaussian(3)
        assert isinstance(t.potential(np.zeros(3)), float)
        assert t.score(np.zeros(3)).shape == (3,)
        assert t.score(np.zeros((4, 3))).shape == (4, 3)
        with pytest.raises(ValueError):
            t.score(np.zeros(2))

    def test_module_functions(self):
        t = Target.standard_gaussian(1)
        assert potential(t, [2.0]) == pytest.approx(2.0)
        np.testing.assert_allclose(score(t, [[2.0]]), [[2.0]])

    @settings(max_examples=30, deadline=None)
    @given(shift=st.floats(-5, 5), x=st.floats(-5, 5))
    def test_translation_equivariance(self, shift, x):
        a, b = Target.gaussian([0.0]), Target.gaussian([shift])
        assert b.score([x + shift])[0] == pytest.approx(a.score([x])[0], abs=1e-12)
        assert b.potential([x + shift]) == pytest.approx(a.potential([x]), abs=1e-10)


class TestNormalisation:
    def test_gaussian_normaliser(self):
        cov = np.array([[2.0, 0.3], [0.3, 0.5]])
        t = Target.gaussian([0.0, 0.0], cov)
        expected = 0.5 * np.log(np.linalg.det(2 * np.pi * cov))
        assert t.log_normaliser() == pytest.approx(expected, rel=1e-14)

    def test_mixture_potential_is_negative_log_density(self):
        t = Target.gaussian_mixture([0.5, 0.5], [-1.0, 1.0], [1.0, 1.0])
        z, _ = quad(lambda x: np.exp(-t.potential([x])), -20, 20)
        assert z == pytest.approx(1.0, abs=1e-10)
        assert t.log_normaliser() == 0.0

    def test_double_well_has_no_closed_form(self):
        assert Target.double_well().log_normaliser() is None


class TestMoments:
    def test_mixture_variance(self):
        # equal mixture of N(-1/2, 1) and N(1/2, 1): variance 1 + 1/4
        t = Target.gaussian_mixture([0.5, 0.5], [-0.5, 0.5], [1.0, 1.0])
        mean, cov = t.reference_moments()
        assert mean[0] == pytest.approx(0.0, abs=1e-15)
        assert cov[0, 0] == pytest.approx(1.25, rel=1e-14)

    def test_double_well_against_adaptive_quadrature(self):
        t = Target.double_well(1.0, 1.0)
        w = lambda x: np.exp(-t.potential([x]))
        z = quad(w, -np.inf, np.inf)[0]
        var = quad(lambda x: x * x * w(x), -np.inf, np.inf)[0] / z
        mean, cov = reference_moments(t)
        assert mean[0] == pytest.approx(0.0, abs=1e-12)
        assert cov[0, 0] == pytest.approx(var, rel=1e-9)

    def test_double_well_in_higher_dimension_unsupported(self):
        with pytest.raises(Unsupported):
            Target.double_well(dim=2).reference_moments()


class TestSerialisation:
    @pytest.mark.parametrize("t", TARGETS, ids=lambda t: t.family)
    def test_round_trip(self, t):
        assert Target.from_json(t.to_json()) == t
        assert hash(Target.from_dict(t.to_dict())) == hash(t)

    @pytest.mark.parametrize(
        "spec",
        [
            {"family": "cauchy"},
            {"family": "gaussian", "mean": [0.0], "scale": 1.0},
            {"family": "gaussian"},
            {"family": "gaussian-mixture", "weights": [1.0]},
            {"family": "gaussian", "mean": [0.0, 0.0], "cov": [[1.0, 2.0], [2.0, 1.0]]},
        ],
    )
    def test_invalid_specs(self, spec):
        with pytest.raises(ValueError):
            Target.from_dict(spec)
