"""One-dimensional quadrature realisation of the Stein geometry on densities.

A density ``rho`` is stored by its values on a uniform grid with composite
Simpson weights ``w``. The kernel integral operator ``T_{k,rho}`` becomes the
matrix ``K diag(rho w)``; its symmetrised form ``A = D^{1/2} K D^{1/2}``,
``D = diag(rho w)``, carries the spectral calculus. Eigenvalues of ``A`` below
``1e-12 lambda_max`` are discarded (Nystrom truncation).

Conventions used throughout:

* a density path ``rho_t`` moves by the continuity equation
  ``d rho/dt + d(rho v)/dx = 0``; its tangent norm is ``|v|^2_{H_k}``,
* the Stein PDE reads ``d rho/dt = d(rho u)/dx`` with
  ``u(x) = int [k(x, y) V'(y) - d_y k(x, y)] rho(y) dy``, so its velocity is ``-u``,
* the cotangent norm of ``phi`` is ``int int phi'(x) k(x, y) phi'(y) rho(dx) rho(dy)``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import IO, NamedTuple

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import cumulative_simpson, simpson

from .errors import IllConditioned, MassDefect, NotPositiveSemidefinite
from .kernels import Kernel
from .targets import Target

NYSTROM_TOL = 1e-12
MASS_TOL = 1e-6
PSD_TOL = 1e-10
HELMHOLTZ_COND = 1e12

# sixth-order central first-derivative stencil
_D1 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0


def simpson_weights(n: int, h: float) -> np.ndarray:
    """Composite Simpson weights for ``n`` (odd) equispaced nodes."""
    if n < 3 or n % 2 == 0:
        raise ValueError(f"composite Simpson needs an odd number of nodes >= 3, got {n}")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def derivative(values, h: float) -> np.ndarray:
    """First derivative on a uniform grid: sixth-order central differences.

    The three nodes at each end fall back to second-order one-sided formulas;
    all densities used here are negligible there.
    """
    f = np.asarray(values, dtype=float)
    out = np.gradient(f, h, edge_order=2)
    if f.size >= 7:
        interior = sum(c * f[k : f.size - 6 + k] for k, c in enumerate(_D1) if c != 0.0)
        out[3:-3] = interior / h
    return out


# -- grids --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """A strictly positive density sampled on a uniform grid."""

    nodes: np.ndarray
    weights: np.ndarray
    density_values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        rho = np.asarray(self.density_values, dtype=float)
        if x.shape != rho.shape:
            raise ValueError("nodes and density values must have the same length")
        if not np.all(np.isfinite(rho)) or np.any(rho <= 0.0):
            raise ValueError("density must be finite and strictly positive at every node")
        for name, arr in (("nodes", x), ("weights", self.weights), ("density_values", rho)):
            a = np.array(arr, dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.normalisation_defect > MASS_TOL:
            raise MassDefect(
                f"density integrates to {self.mass:.9f} on [{x[0]}, {x[-1]}]; "
                "widen or refine the grid"
            )

    @classmethod
    def uniform(cls, values_fn, a: float = -8.0, b: float = 8.0, n: int = 513) -> "DensityGrid":
        x = np.linspace(a, b, n)
        return cls(x, simpson_weights(n, x[1] - x[0]), values_fn(x))

    @classmethod
    def gaussian(cls, mean: float = 0.0, std: float = 1.0, a: float = -8.0, b: float = 8.0, n: int = 513) -> "DensityGrid":
        return cls.uniform(lambda x: gaussian_pdf(x, mean, std), a, b, n)

    def with_density(self, values) -> "DensityGrid":
        return DensityGrid(self.nodes, self.weights, values)

    @property
    def h(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def mass(self) -> float:
        return float(self.weights @ self.density_values)

    @property
    def normalisation_defect(self) -> float:
        return abs(self.mass - 1.0)

    def integrate(self, values) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))

    def derivative(self, values) -> np.ndarray:
        return derivative(values, self.h)


def gaussian_pdf(x, mean: float, std: float) -> np.ndarray:
    z = (np.asarray(x, dtype=float) - mean) / std
    return np.exp(-0.5 * z * z) / (std * np.sqrt(2.0 * np.pi))


def _kernel_1d(kernel: Kernel, x: np.ndarray):
    rad = kernel.radial(x[:, None])
    return rad.f, kernel.radial_grad_y(rad)[..., 0]


# -- the operator T_{k, rho} -----------------------------------------------------------


class DiscretisedOperator:
    """Nystrom realisation of ``T_{k,rho}`` on a density grid.

    Attributes
    ----------
    matrix
        ``T[g, h] = k(x_g, x_h) rho_h w_h``.
    symmetrised
        ``A = D^{1/2} K D^{1/2}`` with ``D = diag(rho w)``.
    eigenvalues, eigenvectors
        Spectrum of ``A`` in descending order.
    retained
        Mask of eigenvalues above ``tol * lambda_max``.
    """

    def __init__(self, kernel: Kernel, grid: DensityGrid, tol: float = NYSTROM_TOL, gram=None):
        self.kernel = kernel
        self.grid = grid
        self.tol = tol
        self.gram = kernel.matrix(grid.nodes[:, None]) if gram is None else gram
        self.mass_weights = grid.density_values * grid.weights
        self.root = np.sqrt(self.mass_weights)
        self.matrix = self.gram * self.mass_weights[None, :]
        A = self.root[:, None] * self.gram * self.root[None, :]
        self.symmetrised = 0.5 * (A + A.T)
        lam, U = np.linalg.eigh(self.symmetrised)
        self.eigenvalues, self.eigenvectors = lam[::-1], U[:, ::-1]
        if self.eigenvalues[-1] < -PSD_TOL * self.lambda_max:
            raise NotPositiveSemidefinite(
                f"discretised operator has eigenvalue {self.eigenvalues[-1]:.3e} "
                f"below -{PSD_TOL:g} * lambda_max"
            )
        self.retained = self.eigenvalues > tol * self.lambda_max
        self._U = self.eigenvectors[:, self.retained]
        self._lam = self.eigenvalues[self.retained]

    @property
    def lambda_max(self) -> float:
        """Operator norm of ``T_{k,rho}`` on ``L^2(rho)``."""
        return float(self.eigenvalues[0])

    @property
    def rank(self) -> int:
        return int(self.retained.sum())

    def apply(self, phi) -> np.ndarray:
        """``(T phi)(x_g) = sum_h k(x_g, x_h) phi_h rho_h w_h``."""
        return self.matrix @ np.asarray(phi, dtype=float)

    def whiten(self, v) -> np.ndarray:
        """Coordinates of ``v`` in which the ``H_k`` inner product is Euclidean."""
        return (self._U.T @ (self.root * np.asarray(v, dtype=float))) / np.sqrt(self._lam)

    def rkhs_norm_squared(self, v) -> float:
        """``|v|^2_{H_k} = sum_retained (u_i^T D^{1/2} v)^2 / lambda_i``."""
        c = self.whiten(v)
        return float(c @ c)

    def rkhs_inner(self, v1, v2) -> float:
        return float(self.whiten(v1) @ self.whiten(v2))

    def top_eigenfunction(self) -> np.ndarray:
        """Leading ``L^2(rho)``-normalised eigenfunction of ``T_{k,rho}``."""
        u = self.eigenvectors[:, 0]
        return u / self.root


# -- norms ---------------------------------------------------------------------------


def cotangent_norm_squared(kernel: Kernel, grid: DensityGrid, phi_values=None, gradient=None, gram=None) -> float:
    """``|phi|^2_{T*} = int int phi'(x) k(x,y) phi'(y) rho(dx) rho(dy)``.

    Pass either the potential ``phi_values`` (differentiated numerically) or
    its ``gradient`` on the grid.
    """
    if gradient is None:
        if phi_values is None:
            raise ValueError("need phi_values or gradient")
        gradient = grid.derivative(phi_values)
    g = np.asarray(gradient, dtype=float) * grid.density_values * grid.weights
    K = kernel.matrix(grid.nodes[:, None]) if gram is None else gram
    return float(g @ K @ g)


def flux_velocity(grid: DensityGrid, xi_values) -> np.ndarray:
    """Velocity ``v = -F / rho`` with ``F(x) = int_a^x xi`` solving ``xi + (rho v)' = 0``.

    The flux is integrated from the left end up to the density peak and from
    the right end beyond it, so that both tails see a small flux.
    """
    xi = np.asarray(xi_values, dtype=float)
    h = grid.h
    left = cumulative_simpson(xi, dx=h, initial=0.0)
    right = -cumulative_simpson(xi[::-1], dx=h, initial=0.0)[::-1]
    split = int(np.argmax(grid.density_values))
    F = np.where(np.arange(xi.size) <= split, left, right)
    return -F / grid.density_values


def tangent_norm_continuum(kernel: Kernel, grid: DensityGrid, xi_values, operator: DiscretisedOperator | None = None) -> float:
    """``|xi|^2_{T_rho M}``: the ``H_k`` norm of the velocity transporting ``rho`` along ``xi``.

    Raises
    ------
    MassDefect
        If ``|int xi| > 1e-6``; only mass-preserving perturbations are tangent.
    """
    xi = np.asarray(xi_values, dtype=float)
    defect = grid.integrate(xi)
    if abs(defect) > MASS_TOL:
        raise MassDefect(f"tangent vector carries mass {defect:.3e}; it must integrate to zero")
    op = DiscretisedOperator(kernel, grid) if operator is None else operator
    return op.rkhs_norm_squared(flux_velocity(grid, xi))


def onsager_apply(kernel: Kernel, grid: DensityGrid, phi_values=None, gradient=None) -> np.ndarray:
    """``K_rho phi = -(rho T_{k,rho} phi')'`` on the grid."""
    if gradient is None:
        gradient = grid.derivative(phi_values)
    op = DiscretisedOperator(kernel, grid)
    return -grid.derivative(grid.density_values * op.apply(gradient))


# -- KL and Stein-Fisher information --------------------------------------------------


def _log_normaliser(grid: DensityGrid, target: Target) -> float:
    logz = target.log_normaliser()
    if logz is not None:
        return logz
    v = target.potential(grid.nodes[:, None])
    vmin = v.min()
    return float(np.log(grid.integrate(np.exp(-(v - vmin)))) - vmin)


def target_density(grid: DensityGrid, target: Target) -> np.ndarray:
    """Normalised target density at the grid nodes."""
    v = target.potential(grid.nodes[:, None])
    return np.exp(-v - _log_normaliser(grid, target))


def kl_divergence(grid: DensityGrid, target: Target) -> float:
    """``KL(rho | pi) = int V rho + int rho log rho + log Z``."""
    _require_1d(target)
    rho = grid.density_values
    v = target.potential(grid.nodes[:, None])
    return grid.integrate(rho * (v + np.log(rho))) + _log_normaliser(grid, target)


def kl_gradient(grid: DensityGrid, target: Target) -> np.ndarray:
    """``rho d/dx (dKL/drho) = rho' + V' rho``, free of divisions by ``rho``."""
    rho = grid.density_values
    return grid.derivative(rho) + target.score(grid.nodes[:, None])[:, 0] * rho


class SteinFisher(NamedTuple):
    ratio_form: float
    score_form: float

    @property
    def value(self) -> float:
        return self.score_form

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.ratio_form), abs(self.score_form))
        return abs(self.ratio_form - self.score_form) / scale if scale > 0 else 0.0


def stein_fisher_continuum(kernel: Kernel, target: Target, grid: DensityGrid, gram=None) -> SteinFisher:
    """Stein-Fisher information of ``rho`` relative to the target, in two forms.

    ``ratio_form``: ``int int (rho/pi)'(x) k(x,y) (rho/pi)'(y) pi(dx) pi(dy)``.
    ``score_form``: ``int int s(x) k(x,y) s(y) rho(dx) rho(dy)`` with
    ``s = (log rho)' + V'``. They agree analytically. ``ratio_form`` is nan
    when ``rho/pi`` overflows on the grid (a target density that underflows
    in the tails); ``value`` always uses the score form.
    """
    _require_1d(target)
    K = kernel.matrix(grid.nodes[:, None]) if gram is None else gram
    pi = target_density(grid, target)
    gb = kl_gradient(grid, target) * grid.weights
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        ratio = grid.density_values / pi
    if not np.all(np.isfinite(ratio)):
        return SteinFisher(float("nan"), float(gb @ K @ gb))
    ga = grid.derivative(ratio) * pi * grid.weights
    return SteinFisher(float(ga @ K @ ga), float(gb @ K @ gb))


def stein_velocity(kernel: Kernel, target: Target, grid: DensityGrid, gram=None) -> np.ndarray:
    """``u(x) = int [k(x,y) V'(y) - d_y k(x,y)] rho(y) dy``; the Stein PDE is ``rho_t = (rho u)'``."""
    _require_1d(target)
    if gram is None:
        K, Gy = _kernel_1d(kernel, grid.nodes)
    else:
        K, Gy = gram
    m = grid.density_values * grid.weights
    vp = target.score(grid.nodes[:, None])[:, 0]
    return K @ (vp * m) - Gy @ m


def stein_rhs(kernel: Kernel, target: Target, grid: DensityGrid, gram=None) -> np.ndarray:
    """Right-hand side ``(rho u)'`` of the Stein PDE."""
    return grid.derivative(grid.density_values * stein_velocity(kernel, target, grid, gram))


def _require_1d(target: Target):
    if target.dim != 1:
        raise ValueError("continuum computations are one-dimensional; the target has dimension " f"{target.dim}")


# -- density paths -------------------------------------------------------------------


def _poly(coeffs) -> Polynomial:
    return Polynomial(np.atleast_1d(np.asarray(coeffs, dtype=float)))


@dataclass(frozen=True, eq=False)
class GaussianPath:
    """``rho_t = N(m_t, s_t^2)`` with polynomial schedules on ``[0, horizon]``.

    ``mean_coeffs`` and ``std_coeffs`` are polynomial coefficients in
    increasing degree. Densities are sampled on ``[a, b]`` with ``n`` nodes.
    """

    mean_coeffs: tuple
    std_coeffs: tuple
    horizon: float
    target: Target
    a: float = -8.0
    b: float = 8.0
    n: int = 513

    def __post_init__(self):
        object.__setattr__(self, "mean_coeffs", tuple(float(c) for c in np.atleast_1d(self.mean_coeffs)))
        object.__setattr__(self, "std_coeffs", tuple(float(c) for c in np.atleast_1d(self.std_coeffs)))
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.target.dim != 1:
            raise ValueError("Gaussian paths live in one dimension")
        t = np.linspace(0.0, self.horizon, 1001)
        if np.any(_poly(self.std_coeffs)(t) <= 0):
            raise ValueError("standard deviation schedule must stay positive on [0, horizon]")

    @property
    def breakpoints(self) -> tuple:
        return (0.0, float(self.horizon))

    def mean(self, t):
        return _poly(self.mean_coeffs)(t)

    def std(self, t):
        return _poly(self.std_coeffs)(t)

    def mean_rate(self, t):
        return _poly(self.mean_coeffs).deriv()(t)

    def std_rate(self, t):
        return _poly(self.std_coeffs).deriv()(t) if len(self.std_coeffs) > 1 else 0.0 * t

    def _x(self):
        return np.linspace(self.a, self.b, self.n)

    def density_grid(self, t: float) -> DensityGrid:
        return DensityGrid.gaussian(float(self.mean(t)), float(self.std(t)), self.a, self.b, self.n)

    def time_derivative(self, t: float) -> np.ndarray:
        """Analytic ``d rho_t / dt`` at the grid nodes."""
        x = self._x()
        m, s = float(self.mean(t)), float(self.std(t))
        dm, ds = float(self.mean_rate(t)), float(self.std_rate(t))
        z = (x - m) / s
        return gaussian_pdf(x, m, s) * (dm * z / s + ds * (z * z - 1.0) / s)

    def reversed(self) -> "GaussianPath":
        """The same curve run backwards: ``rho_rev(t) = rho(T - t)``."""
        T = Polynomial([self.horizon, -1.0])
        return GaussianPath(
            tuple(_poly(self.mean_coeffs)(T).coef),
            tuple(_poly(self.std_coeffs)(T).coef),
            self.horizon,
            self.target,
            self.a,
            self.b,
            self.n,
        )

    def hold(self, horizon: float) -> "HeldPath":
        """Follow this path, then stay at its end point until ``horizon``."""
        return HeldPath(self, horizon)

    def to_dict(self) -> dict:
        return {
            "mean_coeffs": list(self.mean_coeffs),
            "std_coeffs": list(self.std_coeffs),
            "horizon": self.horizon,
            "grid": [self.a, self.b, self.n],
        }


@dataclass(frozen=True, eq=False)
class HeldPath:
    """A burn-in path followed by a constant density up to ``horizon``."""

    burn_in: GaussianPath
    horizon: float

    def __post_init__(self):
        if self.horizon < self.burn_in.horizon:
            raise ValueError("hold horizon must not precede the end of the burn-in")

    @property
    def target(self) -> Target:
        return self.burn_in.target

    @property
    def breakpoints(self) -> tuple:
        pts = (0.0, float(self.burn_in.horizon), float(self.horizon))
        return tuple(sorted(set(pts)))

    def density_grid(self, t: float) -> DensityGrid:
        return self.burn_in.density_grid(min(t, self.burn_in.horizon))

    def time_derivative(self, t: float) -> np.ndarray:
        if t < self.burn_in.horizon:
            return self.burn_in.time_derivative(t)
        return np.zeros(self.burn_in.n)


@dataclass(frozen=True, eq=False)
class SteinPDESolution:
    """Snapshots of a method-of-lines solution of the Stein PDE."""

    times: np.ndarray
    densities: np.ndarray
    grid: DensityGrid
    kernel: Kernel
    target: Target

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def breakpoints(self) -> tuple:
        return (0.0, self.horizon)

    def _index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[i], t, rtol=0, atol=1e-9 * max(1.0, self.horizon)):
            raise ValueError(f"t = {t} is not a stored snapshot time")
        return i

    def density_grid(self, t: float) -> DensityGrid:
        return self.grid.with_density(self.densities[self._index(t)])

    def time_derivative(self, t: float) -> np.ndarray:
        return stein_rhs(self.kernel, self.target, self.density_grid(t))

    def snapshot_times(self, every: int = 1) -> np.ndarray:
        return self.times[::every]


def solve_stein_pde(
    kernel: Kernel,
    target: Target,
    initial: DensityGrid,
    horizon: float,
    dt: float = 0.005,
) -> SteinPDESolution:
    """Integrate ``rho_t = (rho u[rho])'`` with RK4 in time and central differences in space."""
    _require_1d(target)
    steps = int(round(horizon / dt))
    if steps < 1 or not np.isclose(steps * dt, horizon):
        raise ValueError("horizon must be a positive multiple of dt")
    x, w = initial.nodes, initial.weights
    h = initial.h
    K, Gy = _kernel_1d(kernel, x)
    vp = target.score(x[:, None])[:, 0]
    KV = K * vp[None, :]

    def rhs(rho):
        m = rho * w
        return derivative(rho * (KV @ m - Gy @ m), h)

    rho = initial.density_values.copy()
    out = np.empty((steps + 1, x.size))
    out[0] = rho
    for n in range(steps):
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * dt * k1)
        k3 = rhs(rho + 0.5 * dt * k2)
        k4 = rhs(rho + dt * k3)
        rho = rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[n + 1] = rho
    if np.any(out <= 0) or not np.all(np.isfinite(out)):
        raise ValueError("the density lost positivity; use a wider grid or a smaller time step")
    return SteinPDESolution(dt * np.arange(steps + 1), out, initial, kernel, target)


# -- rate functional and identities ------------------------------------------------------


@dataclass(frozen=True)
class PathDiagnostics:
    """Time series along a density path and their quadratures.

    ``tangent`` is ``|d rho/dt|^2_T``, ``cotangent`` is ``|dKL/drho|^2_{T*}``
    (the Stein-Fisher information) and ``defect`` is
    ``|d rho/dt - S(rho)|^2_T`` with ``S`` the Stein PDE right-hand side.
    """

    times: np.ndarray
    kl: np.ndarray
    tangent: np.ndarray
    cotangent: np.ndarray
    defect: np.ndarray
    segments: tuple

    def _integral(self, series) -> float:
        total = 0.0
        for lo, hi in self.segments:
            total += simpson(series[lo:hi], x=self.times[lo:hi]) if hi - lo > 1 else 0.0
        return float(total)

    @property
    def delta_kl(self) -> float:
        return float(self.kl[-1] - self.kl[0])

    @property
    def tangent_integral(self) -> float:
        return self._integral(self.tangent)

    @property
    def cotangent_integral(self) -> float:
        return self._integral(self.cotangent)

    @property
    def rate(self) -> float:
        """``(1/4) int |d rho/dt - S(rho)|^2_T dt``."""
        return 0.25 * self._integral(self.defect)

    @property
    def decomposition(self) -> float:
        """``(1/2) dKL + (1/4) int |d rho|^2_T + (1/4) int |dKL|^2_{T*}``."""
        return 0.5 * self.delta_kl + 0.25 * (self.tangent_integral + self.cotangent_integral)

    @property
    def ede_residual(self) -> float:
        """``dKL + int ((1/2)|d rho|^2_T + (1/2)|dKL|^2_{T*}) dt``, non-negative."""
        return self.delta_kl + 0.5 * (self.tangent_integral + self.cotangent_integral)

    def ede_running(self) -> np.ndarray:
        integrand = 0.5 * (self.tangent + self.cotangent)
        run = np.zeros_like(self.times)
        for lo, hi in self.segments:
            base = run[lo]
            run[lo:hi] = base + cumulative_simpson(integrand[lo:hi], x=self.times[lo:hi], initial=0.0)
        return self.kl - self.kl[0] + run

    def write_csv(self, stream: IO[str]) -> None:
        """``t,kl,stein_fisher,tangent_norm2,ede_running`` rows."""
        fmt = lambda v: format(float(v), ".17g")
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["t", "kl", "stein_fisher", "tangent_norm2", "ede_running"])
        for row in zip(self.times, self.kl, self.cotangent, self.tangent, self.ede_running()):
            writer.writerow([fmt(v) for v in row])


def _time_nodes(path, timesteps):
    """Simpson nodes per segment of the path, with the segment index ranges."""
    if isinstance(path, SteinPDESolution):
        every = 1 if timesteps is None else int(timesteps)
        t = path.times[::every]
        if (path.times.size - 1) % every:
            raise ValueError("the snapshot stride must divide the number of steps")
        return t, ((0, t.size),)
    n = 201 if timesteps is None else int(timesteps)
    if n < 3 or n % 2 == 0:
        raise ValueError("timesteps must be an odd integer >= 3")
    bps = path.breakpoints
    times, segments, start = [], [], 0
    for lo, hi in zip(bps[:-1], bps[1:]):
        seg = np.linspace(lo, hi, n)
        times.append(seg)
        segments.append((start, start + n))
        start += n
    return np.concatenate(times), tuple(segments)


def path_diagnostics(kernel: Kernel, target: Target, path, timesteps=None) -> PathDiagnostics:
    """Evaluate KL, tangent, cotangent and Stein-defect norms along ``path``.

    Parameters
    ----------
    timesteps
        Odd number of Simpson nodes per smooth segment for analytic paths,
        or a snapshot stride for :class:`SteinPDESolution`.
    """
    _require_1d(target)
    times, segments = _time_nodes(path, timesteps)
    kl, tan, cot, defect = (np.empty(times.size) for _ in range(4))
    gram = None
    for i, t in enumerate(times):
        grid = path.density_grid(float(t))
        if gram is None:
            gram = _kernel_1d(kernel, grid.nodes)
        op = DiscretisedOperator(kernel, grid, gram=gram[0])
        xi = path.time_derivative(float(t))
        v_path = flux_velocity(grid, xi)
        v_stein = -stein_velocity(kernel, target, grid, gram)
        kl[i] = kl_divergence(grid, target)
        tan[i] = op.rkhs_norm_squared(v_path)
        cot[i] = stein_fisher_continuum(kernel, target, grid, gram[0]).value
        defect[i] = op.rkhs_norm_squared(v_path - v_stein)
    return PathDiagnostics(times, kl, tan, cot, defect, segments)


def rate_functional_continuum(kernel: Kernel, target: Target, path, timesteps=None) -> float:
    """``(1/4) int_0^T |d rho/dt - S(rho)|^2_{T_rho M} dt`` by quadrature."""
    return path_diagnostics(kernel, target, path, timesteps).rate


def ede_residual(kernel: Kernel, target: Target, path, timesteps=None) -> float:
    """Energy-dissipation residual of a path; zero exactly on Stein PDE solutions."""
    return path_diagnostics(kernel, target, path, timesteps).ede_residual


def kl_dissipation(kernel: Kernel, target: Target, solution: SteinPDESolution, every: int = 1):
    """``(t, dKL/dt, -I_Stein)`` along a Stein PDE solution; the two series agree."""
    t = solution.times[::every]
    kl = np.array([kl_divergence(solution.density_grid(s), target) for s in t])
    fisher = np.array([stein_fisher_continuum(kernel, target, solution.density_grid(s)).value for s in t])
    return t, np.gradient(kl, t, edge_order=2), -fisher


# -- sandwich bound and Helmholtz projection ------------------------------------------------


def sandwich_check(kernel: Kernel, grid: DensityGrid, phi_values, operator: DiscretisedOperator | None = None) -> tuple[float, float]:
    """``(|phi|^2_{T*}, |T_{k,rho}| int |phi'|^2 d rho)``; the first never exceeds the second."""
    op = DiscretisedOperator(kernel, grid) if operator is None else operator
    grad = grid.derivative(phi_values)
    lhs = cotangent_norm_squared(kernel, grid, gradient=grad, gram=op.gram)
    rhs = op.lambda_max * grid.integrate(grid.density_values * grad**2)
    return lhs, rhs


class HelmholtzSplit(NamedTuple):
    gradient_part: np.ndarray
    divfree_part: np.ndarray
    coefficients: np.ndarray
    inner_product: float
    field_norm2: float
    divfree_norm2: float
    condition: float


def bump_basis(grid: DensityGrid, count: int = 64, width: float | None = None, centers=None):
    """Centres and width of Gaussian bumps covering the bulk of ``rho``."""
    if centers is None:
        rho = grid.density_values
        bulk = grid.nodes[rho >= 1e-10 * rho.max()]
        centers = np.linspace(bulk[0], bulk[-1], count)
    centers = np.asarray(centers, dtype=float)
    if width is None:
        width = 1.5 * (centers[1] - centers[0]) if centers.size > 1 else 1.0
    return centers, float(width)


def helmholtz_project(
    kernel: Kernel,
    grid: DensityGrid,
    field_values,
    centers=None,
    width: float | None = None,
    count: int = 64,
) -> HelmholtzSplit:
    """Split a vector field into its gradient part and a divergence-free remainder.

    The gradient part is the ``H_k``-orthogonal projection onto
    ``span{T_{k,rho} phi_b'}`` for Gaussian bumps ``phi_b``. The projection is
    solved by SVD in whitened Nystrom coordinates so that the basis Gram matrix
    is never formed.

    Warns
    -----
    IllConditioned
        When the basis Gram matrix has condition number above ``1e12``;
        directions below the numerical rank are then dropped.
    """
    op = DiscretisedOperator(kernel, grid)
    v = np.asarray(field_values, dtype=float)
    c, ell = bump_basis(grid, count, width, centers)
    z = grid.nodes[:, None] - c[None, :]
    dphi = -z / ell**2 * np.exp(-0.5 * (z / ell) ** 2)
    basis = op.matrix @ dphi  # T_{k,rho} phi_b'
    Y = np.stack([op.whiten(basis[:, b]) for b in range(basis.shape[1])], axis=1)
    yv = op.whiten(v)
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    cond = float((s[0] / s[-1]) ** 2) if s[-1] > 0 else float("inf")
    keep = s > np.finfo(float).eps * max(Y.shape) * s[0]
    if cond > HELMHOLTZ_COND:
        warnings.warn(
            f"Helmholtz basis Gram matrix has condition number {cond:.2e}; "
            f"keeping {int(keep.sum())} of {s.size} directions",
            IllConditioned,
            stacklevel=2,
        )
    alpha = Vt[keep].T @ ((U[:, keep].T @ yv) / s[keep])
    grad = basis @ alpha
    resid_w = yv - Y @ alpha
    return HelmholtzSplit(
        grad,
        v - grad,
        alpha,
        float((Y @ alpha) @ resid_w),
        float(yv @ yv),
        float(resid_w @ resid_w),
        cond,
    )
