"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

from steinlab.cli import continuum_identities, main
from steinlab.compare import ksd_sweep
from steinlab.continuum import DensityGrid, DiscretisedOperator, GaussianPath, rate_functional_continuum, sandwich_check, stein_fisher_continuum
from steinlab.diagnostics import (
    CylinderFunction,
    InnerFunction,
    drift_rkhs_norm_squared,
    generator_apply,
    ksd_squared,
    rate_functional,
    tilt_cotangent_series,
)
from steinlab.dynamics import (
    Ensemble,
    IntegratorConfig,
    TiltField,
    Trajectory,
    ergodic_average,
    relax_to_fixed_point,
    run_trajectory,
    svgd_drift,
)
from steinlab.kernels import Kernel, factorize
from steinlab.targets import Target

K = Kernel("gaussian", 1.0)
T1 = Target.standard_gaussian(1)
LINE8 = Ensemble(np.linspace(-2.0, 2.0, 8)[:, None])

# brentq root of the two-particle stationarity equation; equals sqrt(ln 5) / 2
TWO_PARTICLE_ROOT = 0.6343181205896914


def random_triple(rng):
    d = int(rng.integers(1, 4))
    n = int(rng.integers(1, 65))
    sigma = float(rng.uniform(0.3, 3.0))
    kernel = Kernel("gaussian", sigma) if rng.random() < 0.5 else Kernel("imq", sigma)
    if rng.random() < 0.5:
        A = rng.normal(size=(d, d))
        target = Target.gaussian(rng.normal(size=d), A @ A.T + 0.5 * np.eye(d))
    else:
        target = Target.double_well(float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0)), dim=d)
    return kernel, target, rng.normal(scale=1.5, size=(n, d))


def test_c01_ksd_equals_drift_rkhs_norm(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        kernel, target, X = random_triple(rng)
        a = drift_rkhs_norm_squared(kernel, target, X)
        b = ksd_squared(kernel, target, X, "v-stat")
        worst = max(worst, abs(a - b) / max(1.0, abs(b)))
    elapsed = time.perf_counter() - start
    verdict("C1 KSD/RKHS identity", worst <= 1e-10 and elapsed < 10, f"max scaled gap {worst:.2e}, {elapsed:.2f} s")


def test_c02_single_particle_ksd(verdict):
    value = ksd_squared(K, Target.standard_gaussian(2), [[0.0, 0.0]], "v-stat")
    verdict("C2 single-particle KSD", abs(value - 4.0) <= 1e-10, f"ksd_squared = {value!r}")


def test_c03_two_particle_fixed_point(verdict):
    start = time.perf_counter()
    res = relax_to_fixed_point(K, T1, Ensemble([[-0.5], [0.5]]), tol=1e-10)
    elapsed = time.perf_counter() - start
    x = np.sort(res.ensemble.positions[:, 0])
    err = float(np.max(np.abs(x - [-TWO_PARTICLE_ROOT, TWO_PARTICLE_ROOT])))
    verdict("C3 two-particle fixed point", err <= 1e-6 and elapsed < 1.0, f"positions {x}, error {err:.1e}, {elapsed:.3f} s")


def test_c04_rate_zero_on_rk4_paths(verdict):
    rates = {}
    for dt in (1e-3, 5e-4):
        traj = run_trajectory(IntegratorConfig("ode-rk4", dt, round(2.0 / dt)), K, T1, LINE8)
        rates[dt] = rate_functional(K, T1, traj)
    order = np.log2(rates[1e-3] / rates[5e-4])
    ok = rates[1e-3] <= 1e-8 and abs(order - 2.0) <= 0.3
    verdict("C4 rate on optimal paths", ok, f"rate(1e-3) = {rates[1e-3]:.3e}, rate(5e-4) = {rates[5e-4]:.3e}, order {order:.3f}")


def perturbed_path(w, eps, dt=1e-3, steps=1000):
    P = np.empty((steps + 1,) + LINE8.positions.shape)
    P[0] = LINE8.positions
    for n in range(steps):
        P[n + 1] = P[n] + dt * (svgd_drift(K, T1, P[n]) + eps * w(P[n]))
    return Trajectory(P, dt)


def test_c05_quadratic_perturbation_scaling(verdict):
    fields = {"constant": np.ones_like, "linear": lambda X: X, "oscillating": lambda X: np.sin(2.0 * X)}
    spreads = {}
    for name, w in fields.items():
        ratios = [rate_functional(K, T1, perturbed_path(w, eps)) / eps**2 for eps in (1e-2, 1e-3)]
        spreads[name] = abs(ratios[0] - ratios[1]) / max(ratios)
    worst = max(spreads.values())
    verdict("C5 quadratic scaling", worst < 0.05, ", ".join(f"{k} {v:.2e}" for k, v in spreads.items()))


def test_c06_tilted_path_identity(verdict):
    tilt = TiltField.linear([0.7])
    traj = run_trajectory(IntegratorConfig("tilted-ode", 1e-3, 1000), K, T1, LINE8, tilt)
    rate = rate_functional(K, T1, traj)
    quad = traj.dt * float(np.sum(tilt_cotangent_series(K, traj, tilt)))
    rel = abs(rate - quad) / quad
    verdict("C6 tilted-path identity", rel <= 1e-3, f"rate {rate:.10f}, cotangent quadrature {quad:.10f}, rel {rel:.1e}")


@pytest.mark.slow
def test_c07_sde_ergodicity(verdict):
    start = time.perf_counter()
    initial = Ensemble(np.linspace(-1.0, 1.0, 5)[:, None])
    means, variances = [], []
    for seed in (1, 2, 3):
        traj = run_trajectory(IntegratorConfig("sde-euler-maruyama", 0.01, 200_000, seed=seed), K, T1, initial)
        _, m = ergodic_average(traj, traj.steps // 2)
        means.append(m.mean[0])
        variances.append(m.cov[0, 0])
    mean, var = float(np.mean(means)), float(np.mean(variances))
    elapsed = time.perf_counter() - start
    ok = abs(mean) <= 0.05 and abs(var - 1.0) <= 0.1 and elapsed < 120
    verdict("C7 SDE ergodicity", ok, f"pooled mean {mean:+.4f}, pooled variance {var:.4f}, {elapsed:.1f} s")


def test_c08_generator_monte_carlo(verdict):
    F = CylinderFunction("quadratic", (InnerFunction("bump", (0.3,), 1.2), InnerFunction("linear", (1.0,))))
    X = np.array([[-1.2], [-0.3], [0.4], [1.5]])
    N = X.shape[0]
    exact = generator_apply(K, T1, F, X)
    b = svgd_drift(K, T1, X)[:, 0]
    root = factorize(K.matrix(X), X).sqrt()
    h = 1e-6
    gradF = np.array([(F(X + h * e[:, None]) - F(X - h * e[:, None])) / (2 * h) for e in np.eye(N)])

    def F_batch(P):
        y = np.stack([p.value(P.reshape(-1, 1)).reshape(P.shape).mean(axis=1) for p in F.inner], axis=1)
        return np.sum(y**2, axis=1)

    rng = np.random.default_rng(7)
    start = time.perf_counter()
    estimates = {}
    for dt in (0.02, 0.01):
        noise = np.sqrt(2.0 * dt / N) * rng.standard_normal((100_000, N)) @ root.T
        # the noise enters linearly at leading order; subtracting gradF . noise removes that variance
        y = (F_batch(X[:, 0] + dt * b + noise) - F(X) - noise @ gradF) / dt
        estimates[dt] = (float(y.mean()), float(y.std(ddof=1) / np.sqrt(y.size)))
    elapsed = time.perf_counter() - start
    z = {dt: (m - exact) / se for dt, (m, se) in estimates.items()}
    # Richardson extrapolation removes the O(dt) bias
    rich = 2 * estimates[0.01][0] - estimates[0.02][0]
    rich_se = np.hypot(2 * estimates[0.01][1], estimates[0.02][1])
    ok = all(abs(v) <= 3 for v in z.values()) and abs(rich - exact) <= 3 * rich_se and elapsed < 120
    detail = f"generator {exact:.5f}; " + ", ".join(f"dt {dt}: {m:.5f} (z {z[dt]:+.2f})" for dt, (m, _) in estimates.items())
    verdict("C8 generator Monte Carlo", ok, detail + f"; extrapolated {rich:.5f}")


@pytest.fixture(scope="module")
def identities():
    return continuum_identities(K, T1)


@pytest.mark.slow
@pytest.mark.parametrize(
    "label,name,tol",
    [
        ("C9a Stein-Fisher forms", "stein_fisher_forms", 1e-6),
        ("C9b duality isometry", "duality_isometry", 1e-4),
        ("C9c rate decomposition", "rate_decomposition", 1e-3),
        ("C9d time reversal", "time_reversal", 1e-3),
        ("C9e EDE residual", "ede_residual", 5e-3),
    ],
)
def test_c09_continuum_identities(identities, verdict, label, name, tol):
    r = identities[name]
    verdict(label, r["error"] <= tol, f"lhs {r['lhs']:.8g}, rhs {r['rhs']:.8g}, error {r['error']:.2e} (tolerance {tol:g})")


@pytest.mark.slow
def test_c10_held_path_limit(verdict):
    burn = GaussianPath((0.0, 0.8), (1.0, 0.3), 1.0, T1)
    quarter_fisher = 0.25 * stein_fisher_continuum(K, T1, burn.density_grid(1.0)).value
    horizons = np.array([10.0, 20.0, 40.0, 80.0])
    y = np.array([rate_functional_continuum(K, T1, burn.hold(h), 41) / h - quarter_fisher for h in horizons])
    x = 1.0 / horizons
    C = (x @ y) / (x @ x)
    r2 = 1.0 - np.sum((y - C * x) ** 2) / np.sum((y - y.mean()) ** 2)
    verdict("C10 held-path limit", r2 >= 0.99, f"gaps {np.array2string(y, precision=5)}, C = {C:.5f}, R^2 = {r2:.6f}")


def test_c11_sandwich(verdict):
    g = DensityGrid.gaussian(0.3, 1.2)
    op = DiscretisedOperator(K, g)
    rng = np.random.default_rng(11)
    x = g.nodes
    violations, worst = 0, 0.0
    for _ in range(50):
        a, f, c, q = rng.normal(size=4)
        phi = a * np.sin(f * x + c) + q * x**2 / 4 + rng.normal() * np.exp(-((x - rng.normal()) ** 2))
        lhs, rhs = sandwich_check(K, g, phi, op)
        violations += lhs > rhs
        worst = max(worst, lhs / rhs)
    verdict("C11 sandwich", violations == 0, f"{violations} violations, max lhs/rhs {worst:.6f}")


def test_c12_kernel_comparison(verdict):
    failures = []
    for kernel, target in ((K, T1), (Kernel("imq", 0.8), Target.standard_gaussian(2))):
        for c in (0.25, 0.5, 0.9, 1.1, 2.0, 3.0):
            report = ksd_sweep(kernel.scaled(c), kernel, target, count=8, seed=3)
            expected = "a-dominates" if c > 1 else "b-dominates"
            if report.verdict != expected:
                failures.append(f"{kernel.family} c={c}: {report.verdict}")
        if ksd_sweep(kernel, kernel, target, count=4).verdict != "incomparable":
            failures.append(f"{kernel.family} tie")
    p1, p2 = Kernel("exp-power", 1.0, p=1.0), Kernel("exp-power", 1.0, p=2.0)
    first = ksd_sweep(p1, p2, T1, count=10, seed=0)
    second = ksd_sweep(p1, p2, T1, count=10, seed=0)
    if first.to_json() != second.to_json():
        failures.append("p=1 vs p=2 report not byte-identical")
    signs = [e.diff_sign for e in first.entries]
    detail = f"scaling verdicts {'exact' if not failures else failures}; p=1 vs p=2 signs {signs}, verdict {first.verdict}"
    verdict("C12 kernel comparison", not failures, detail)


@pytest.mark.slow
def test_c13_figure_one(tmp_path, verdict):
    start = time.perf_counter()
    code = main(["reproduce-fig1", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    summary = json.loads((tmp_path / "fig1_summary.json").read_text()) if code == 0 else {"kernels": []}
    svgs = sorted(p.name for p in tmp_path.glob("fig1_*.svg"))
    rows = summary["kernels"]
    ok = (
        code == 0
        and len(rows) == 2
        and all(r["drift_norm"] < 1e-6 and r["covariance_error"] <= 0.15 for r in rows)
        and len(svgs) == 2
        and elapsed < 300
    )
    detail = "; ".join(f"{r['label']}: drift {r['drift_norm']:.1e}, covariance error {r['covariance_error']:.3f}" for r in rows)
    verdict("C13 figure-one reproduction", ok, f"{detail}; svgs {svgs}; {elapsed:.0f} s")
