"""Kernel comparison: Gram dominance, KSD sweeps and fixed-point tables.

If ``K_a - K_b`` is positive semidefinite on a point set, then on the span of
kernel sections at those points the ``H_a`` unit ball contains the ``H_b``
unit ball, and the supremum formulation of the Stein-Fisher information gives
``I_a >= I_b``. The scaling family ``k_a = c k_b`` fixes this orientation:
``I_a = c I_b``. :func:`ksd_sweep` checks the implication empirically and
never asserts an ordering that the sampled data do not show.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .continuum import DensityGrid, stein_fisher_continuum
from .diagnostics import ksd_squared
from .dynamics import Ensemble, gaussian_ensemble, grid_ensemble, relax_to_fixed_point
from .kernels import Kernel, as_points
from .targets import Target

DOMINANCE_TOL = 1e-10


def gram_dominance(kernel_a: Kernel, kernel_b: Kernel, point_sets: Sequence) -> float:
    """Smallest eigenvalue of ``K_a - K_b`` over all point sets."""
    out = np.inf
    for pts in point_sets:
        X = as_points(pts)
        D = kernel_a.matrix(X) - kernel_b.matrix(X)
        out = min(out, float(np.linalg.eigvalsh(0.5 * (D + D.T))[0]))
    return float(out)


def _dominance_scale(kernel_a: Kernel, kernel_b: Kernel, point_sets) -> float:
    scale = 0.0
    for pts in point_sets:
        X = as_points(pts)
        for k in (kernel_a, kernel_b):
            scale = max(scale, float(np.linalg.eigvalsh(k.matrix(X))[-1]))
    return scale


# -- measure generator -----------------------------------------------------------------


@dataclass(frozen=True)
class MeasureSpec:
    """A random Gaussian mixture rendered either as a grid density or as samples."""

    measure_id: int
    kind: str
    weights: tuple
    means: tuple
    stds: tuple
    n: int

    def to_dict(self) -> dict:
        return {
            "measure_id": self.measure_id,
            "kind": self.kind,
            "weights": list(self.weights),
            "means": [list(m) for m in self.means],
            "stds": list(self.stds),
            "n": self.n,
        }

    def sample(self, dim: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        comp = rng.choice(len(self.weights), size=self.n, p=np.asarray(self.weights))
        mu = np.asarray(self.means)[comp]
        return mu + np.asarray(self.stds)[comp, None] * rng.standard_normal((self.n, dim))

    def density(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        for w, m, s in zip(self.weights, self.means, self.stds):
            out += w * np.exp(-0.5 * ((x - m[0]) / s) ** 2) / (s * np.sqrt(2 * np.pi))
        return out


def generate_measures(dim: int, count: int, seed: int = 0, sample_size: int = 200) -> list[MeasureSpec]:
    """Seeded random mixtures; in one dimension alternately grids and ensembles."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        m = int(rng.integers(1, 4))
        w = rng.dirichlet(np.ones(m))
        means = rng.uniform(-2.0, 2.0, size=(m, dim))
        stds = rng.uniform(0.6, 1.3, size=m)
        kind = "grid" if dim == 1 and i % 2 == 0 else "ensemble"
        out.append(
            MeasureSpec(
                i,
                kind,
                tuple(float(v) for v in w),
                tuple(tuple(float(v) for v in row) for row in means),
                tuple(float(v) for v in stds),
                0 if kind == "grid" else sample_size,
            )
        )
    return out


SWEEP_GRID = (-12.0, 12.0, 769)


def _measure_ksd(kernel: Kernel, target: Target, spec: MeasureSpec, dim: int, seed: int, estimator: str) -> float:
    if spec.kind == "grid":
        grid = DensityGrid.uniform(spec.density, *SWEEP_GRID)
        return stein_fisher_continuum(kernel, target, grid).value
    X = spec.sample(dim, seed)
    return ksd_squared(kernel, target, X, estimator)


# -- reports -------------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepEntry:
    measure: MeasureSpec
    ksd_a: float
    ksd_b: float

    @property
    def diff_sign(self) -> int:
        return int(np.sign(self.ksd_a - self.ksd_b))


@dataclass(frozen=True)
class ComparisonReport:
    """Outcome of a kernel comparison.

    ``verdict`` is ``a-dominates`` only when every sweep entry has
    ``ksd_a >= ksd_b`` (at least one strictly) and ``K_a - K_b`` is
    numerically positive semidefinite on every sampled point set; symmetric
    for ``b-dominates``. Everything else, including an exact tie, is
    ``incomparable``.
    """

    kernel_a: Kernel
    kernel_b: Kernel
    gram_dominance_min_eig: float
    gram_dominance_min_eig_reverse: float
    estimator: str
    entries: tuple
    verdict: str
    counterexamples: tuple
    all_equal: bool

    @property
    def ksd_sweep(self) -> list:
        return [(e.measure.to_dict(), e.ksd_a, e.ksd_b, e.diff_sign) for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "kernel_a": self.kernel_a.to_dict(),
            "kernel_b": self.kernel_b.to_dict(),
            "gram_dominance_min_eig": self.gram_dominance_min_eig,
            "gram_dominance_min_eig_reverse": self.gram_dominance_min_eig_reverse,
            "estimator": self.estimator,
            "ksd_sweep": [
                {"measure": m, "ksd_a": a, "ksd_b": b, "diff_sign": s} for m, a, b, s in self.ksd_sweep
            ],
            "verdict": self.verdict,
            "all_equal": self.all_equal,
            "counterexamples": [c.to_dict() for c in self.counterexamples],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write_csv(self, stream: IO[str]) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["measure_id", "ksd_a", "ksd_b", "diff_sign"])
        for e in self.entries:
            writer.writerow([e.measure.measure_id, format(e.ksd_a, ".17g"), format(e.ksd_b, ".17g"), e.diff_sign])


def ksd_sweep(
    kernel_a: Kernel,
    kernel_b: Kernel,
    target: Target,
    count: int = 10,
    seed: int = 0,
    measures: Sequence[MeasureSpec] | None = None,
    gram_points: int = 64,
) -> ComparisonReport:
    """Compare the Stein-Fisher information of two kernels over random measures.

    Grid measures use the quadrature Stein-Fisher information; ensembles use
    the V-statistic when both kernels are smooth on the diagonal and the
    U-statistic otherwise.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    dim = target.dim
    specs = list(generate_measures(dim, count, seed)) if measures is None else list(measures)
    both_smooth = kernel_a.cross_defined_on_diagonal and kernel_b.cross_defined_on_diagonal
    estimator = "v-stat" if both_smooth else "u-stat"
    entries, point_sets = [], []
    for spec in specs:
        entry_seed = seed * 1_000_003 + spec.measure_id
        a = _measure_ksd(kernel_a, target, spec, dim, entry_seed, estimator)
        b = _measure_ksd(kernel_b, target, spec, dim, entry_seed, estimator)
        entries.append(SweepEntry(spec, a, b))
        sub = MeasureSpec(spec.measure_id, "ensemble", spec.weights, spec.means, spec.stds, gram_points)
        point_sets.append(sub.sample(dim, entry_seed + 7))
    entries.sort(key=lambda e: e.measure.measure_id)
    gd_ab = gram_dominance(kernel_a, kernel_b, point_sets)
    gd_ba = gram_dominance(kernel_b, kernel_a, point_sets)
    tol = DOMINANCE_TOL * _dominance_scale(kernel_a, kernel_b, point_sets)
    signs = np.array([e.diff_sign for e in entries])
    all_equal = bool(np.all(signs == 0))
    if np.all(signs >= 0) and np.any(signs > 0) and gd_ab >= -tol:
        verdict = "a-dominates"
    elif np.all(signs <= 0) and np.any(signs < 0) and gd_ba >= -tol:
        verdict = "b-dominates"
    else:
        verdict = "incomparable"
    majority = int(np.sign(signs.sum()))
    counter = tuple(e.measure for e in entries if majority != 0 and e.diff_sign == -majority)
    return ComparisonReport(kernel_a, kernel_b, gd_ab, gd_ba, estimator, tuple(entries), verdict, counter, all_equal)


# -- fixed points ----------------------------------------------------------------------------


REFERENCE_KERNEL = Kernel("gaussian", sigma=1.0)


@dataclass(frozen=True)
class FixedPointRow:
    kernel: Kernel
    ensemble: Ensemble
    reference_ksd: float
    covariance_error: float
    drift_norm: float
    steps: int
    polished: bool

    def to_dict(self) -> dict:
        X = self.ensemble.positions
        return {
            "kernel": self.kernel.to_dict(),
            "reference_ksd": self.reference_ksd,
            "covariance_error": self.covariance_error,
            "drift_norm": self.drift_norm,
            "steps": self.steps,
            "polished": self.polished,
            "mean": X.mean(axis=0).tolist(),
            "covariance": np.atleast_2d(np.cov(X.T, bias=True)).tolist(),
        }


def covariance_error(X, target: Target) -> float:
    """``max |C - Sigma| / max diag(Sigma)`` for the ensemble covariance ``C``."""
    _, cov = target.reference_moments()
    C = np.atleast_2d(np.cov(as_points(X).T, bias=True))
    return float(np.max(np.abs(C - cov)) / np.max(np.diag(cov)))


def default_initial(n: int, dim: int, seed: int = 0) -> Ensemble:
    """Grid on ``[-1, 1]^d`` when ``n`` is a ``d``-th power, else a seeded normal draw."""
    try:
        return grid_ensemble(n, dim)
    except ValueError:
        return gaussian_ensemble(n, dim, seed)


def fixed_point_comparison(
    kernels: Sequence[Kernel],
    target: Target,
    n: int,
    dt: float = 0.5,
    max_steps: int = 4000,
    tol: float = 1e-6,
    initial: Ensemble | None = None,
    reference_kernel: Kernel = REFERENCE_KERNEL,
    seed: int = 0,
) -> list[FixedPointRow]:
    """Relax the deterministic dynamics to a fixed point for each kernel.

    Every row reports the KSD under the same smooth ``reference_kernel`` so
    that rows are comparable.

    Raises
    ------
    NoConvergence
        If any run fails to bring the drift norm below ``tol``.
    """
    start = default_initial(n, target.dim, seed) if initial is None else initial
    rows = []
    for k in kernels:
        res = relax_to_fixed_point(k, target, start, dt=dt, max_steps=max_steps, tol=tol)
        X = res.ensemble.positions
        rows.append(
            FixedPointRow(
                k,
                res.ensemble,
                ksd_squared(reference_kernel, target, X, "v-stat"),
                covariance_error(X, target),
                res.drift_norm,
                res.steps,
                res.polished,
            )
        )
    return rows
