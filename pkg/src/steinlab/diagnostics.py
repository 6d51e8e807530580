"""Particle-level Stein diagnostics.

Everything here is evaluated on the empirical measure of an ensemble:
kernelised Stein discrepancy, the RKHS norm of the SVGD drift, tangent and
cotangent norms of the Stein geometry, the discrete large-deviation rate
functional, the limit Hamiltonian and the generator of stochastic SVGD on
cylinder functions.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import IO, NamedTuple, Sequence

import numpy as np

from .errors import DiagonalUndefined
from .kernels import DEFAULT_CLAMP_TOL, Kernel, as_points, gram
from .dynamics import Ensemble, TiltField, Trajectory, mean_field_drift
from .targets import Target


def _positions(ensemble) -> np.ndarray:
    return ensemble.positions if isinstance(ensemble, Ensemble) else as_points(ensemble)


# -- Stein kernel and KSD -------------------------------------------------------


class SteinKernelTerms(NamedTuple):
    """The four parts of the Stein kernel ``u_pi`` on all pairs ``(x_i, y_j)``."""

    s_s: np.ndarray
    s_k: np.ndarray
    k_s: np.ndarray
    k_k: np.ndarray

    @property
    def u_pi(self) -> np.ndarray:
        return self.s_s + self.s_k + self.k_s + self.k_k


def stein_kernel_terms(kernel: Kernel, target: Target, X, Y=None) -> SteinKernelTerms:
    """Stein kernel ``u_pi(x, y)`` split into its score and kernel parts.

    ``u_pi = grad V(x).grad V(y) k - grad V(x).grad_y k - grad V(y).grad_x k
    + div_x grad_y k``.
    """
    X = as_points(X)
    Y = X if Y is None else as_points(Y)
    Sx, Sy = target.score(X), target.score(Y)
    k, gy, cross = kernel.terms(X, Y)
    s_s = (Sx @ Sy.T) * k
    s_k = -np.einsum("ia,ija->ij", Sx, gy)
    k_s = np.einsum("ja,ija->ij", Sy, gy)  # grad_x k = -grad_y k for radial kernels
    return SteinKernelTerms(s_s, s_k, k_s, cross)


def ksd_squared(
    kernel: Kernel,
    target: Target,
    ensemble,
    estimator: str = "v-stat",
    chunk: int = 512,
) -> float:
    """Squared kernelised Stein discrepancy of the empirical measure.

    Parameters
    ----------
    estimator
        ``v-stat`` averages ``u_pi`` over all ``N^2`` pairs and is the
        Stein-Fisher information of the empirical measure itself (always
        non-negative). ``u-stat`` drops the diagonal, is unbiased for samples
        and can be negative.
    chunk
        Rows per block; bounds memory for large ensembles without changing
        the summation order.

    Raises
    ------
    DiagonalUndefined
        For the V-statistic when ``div_x grad_y k`` has no value on the
        diagonal (exponential-power kernels with ``p < 2``).
    """
    X = _positions(ensemble)
    N = X.shape[0]
    if estimator == "v-stat":
        k = kernel
    elif estimator == "u-stat":
        if N < 2:
            raise ValueError("the U-statistic needs at least two particles")
        k = dataclasses.replace(kernel, diag_cross_convention="zero")
    else:
        raise ValueError(f"unknown estimator {estimator!r}; expected 'v-stat' or 'u-stat'")
    total = 0.0
    for start in range(0, N, chunk):
        rows = slice(start, min(start + chunk, N))
        U = stein_kernel_terms(k, target, X[rows], X).u_pi
        if estimator == "u-stat":
            idx = np.arange(rows.start, rows.stop)
            if not kernel.cross_defined_on_diagonal:
                r2 = np.sum((X[rows, None, :] - X[None, :, :]) ** 2, axis=-1)
                r2[idx - start, idx] = 1.0
                if np.any(r2 == 0.0):
                    raise DiagonalUndefined("coincident distinct particles make the U-statistic undefined")
            U[idx - start, idx] = 0.0
        total += float(np.sum(U))
    return total / (N * N if estimator == "v-stat" else N * (N - 1))


def drift_rkhs_norm_squared(kernel: Kernel, target: Target, ensemble) -> float:
    """``|T_{k,rho} grad(dKL/drho)|^2`` in ``H_k^d`` for the empirical measure.

    Component ``a`` of the vector field is the finite expansion
    ``f_a = (1/N) sum_j [ dV/dx_a(x_j) k(., x_j) - d/dy_a k(., y)|_{y=x_j} ]``.
    Its norm is computed from the Gram matrix of the dictionary
    ``{k(., x_j)} u {d/dy_b k(., x_j)}`` using the reproducing property, which
    needs the full mixed Hessian of ``k``. Analytically this equals the
    V-statistic KSD.
    """
    X = _positions(ensemble)
    N, d = X.shape
    S = target.score(X)
    K = kernel.matrix(X)
    Gy = kernel.grad_y_matrix(X)  # <k(., x_i), d_{y_b} k(., x_j)> = d_{y_b} k(x_i, x_j)
    H = kernel.mixed_hessian(X)  # <d_{y_a} k(., x_i), d_{y_b} k(., x_j)>
    # dictionary Gram: [[K, Gy], [Gy^T, H]] with H flattened to (N d, N d)
    top = np.concatenate([K, Gy.reshape(N, N * d)], axis=1)
    cross = np.transpose(Gy, (1, 2, 0)).reshape(N * d, N)  # <d_{y_a} k(., x_i), k(., x_j)> = d_{y_a} k(x_j, x_i)
    bottom = np.concatenate([cross, np.transpose(H, (0, 2, 1, 3)).reshape(N * d, N * d)], axis=1)
    D = np.concatenate([top, bottom], axis=0)
    total = 0.0
    for a in range(d):
        c = np.zeros(N + N * d)
        c[:N] = S[:, a] / N
        c[N + np.arange(N) * d + a] = -1.0 / N
        total += c @ D @ c
    return float(total)


# -- Stein geometry on empirical measures ------------------------------------------


def tangent_norm_squared(kernel: Kernel, ensemble, velocities, clamp_tol: float = DEFAULT_CLAMP_TOL) -> float:
    """Minimal ``H_k^d`` norm of a vector field taking ``velocities`` at the particles.

    Equals ``sum_a u_a^T K^+ u_a`` with ``K`` the raw Gram matrix.
    """
    X = _positions(ensemble)
    V = np.asarray(velocities, dtype=float).reshape(X.shape)
    return gram(kernel, X, clamp_tol).inverse_quadratic_form(V)


def cotangent_norm_squared(kernel: Kernel, ensemble, gradients) -> float:
    """``(1/N^2) sum_ij grad phi(x_i) . k(x_i, x_j) grad phi(x_j)``."""
    X = _positions(ensemble)
    G = np.asarray(gradients, dtype=float).reshape(X.shape)
    N = X.shape[0]
    return float(np.sum(G * (kernel.matrix(X) @ G)) / N**2)


def rate_increments(kernel: Kernel, target: Target, positions, velocities, dt: float) -> np.ndarray:
    """Per-step contributions ``(dt/4) |u_n - b(x_n)|^2_T`` to the rate functional."""
    P = np.asarray(positions, dtype=float)
    U = np.asarray(velocities, dtype=float)
    if P.shape != U.shape:
        raise ValueError(f"positions {P.shape} and velocities {U.shape} must match")
    out = np.empty(P.shape[0])
    for n in range(P.shape[0]):
        r = U[n] - mean_field_drift(kernel, target, P[n])
        out[n] = 0.25 * dt * tangent_norm_squared(kernel, P[n], r)
    return out


def rate_functional(kernel: Kernel, target: Target, trajectory: Trajectory) -> float:
    """Discrete large-deviation rate of a particle path.

    ``I = (dt/4) sum_n |u_n - b(x_n)|^2_{T}`` with ``u_n`` the forward-difference
    velocity, ``b`` the SVGD drift at the left end point and the tangent norm
    of the empirical measure at ``x_n``.
    """
    if trajectory.steps == 0:
        return 0.0
    inc = rate_increments(kernel, target, trajectory.positions[:-1], trajectory.velocities, trajectory.dt)
    return float(np.sum(inc))


def hamiltonian_from_gradients(kernel: Kernel, target: Target, ensemble, gradients) -> float:
    """``(1/N) sum_i g_i . b(x_i) + (1/N^2) sum_ij g_i . k_ij g_j`` for tilt gradients ``g``."""
    X = _positions(ensemble)
    G = np.asarray(gradients, dtype=float).reshape(X.shape)
    b = mean_field_drift(kernel, target, X)
    return float(np.sum(G * b) / X.shape[0]) + cotangent_norm_squared(kernel, X, G)


def hamiltonian(kernel: Kernel, target: Target, ensemble, tilt: TiltField, t: float = 0.0) -> float:
    """Limit Hamiltonian ``H(rho, xi)`` at the empirical measure.

    The drift pairing ``-<xi, dKL/drho>_{T*}`` becomes ``(1/N) sum_i grad xi(x_i) .
    b(x_i)`` after integrating by parts, and the quadratic part is the
    cotangent norm of ``xi``.
    """
    X = _positions(ensemble)
    return hamiltonian_from_gradients(kernel, target, X, tilt.gradient(X, t))


def lagrangian(kernel: Kernel, target: Target, ensemble, velocities) -> tuple[float, np.ndarray]:
    """Maximise ``(1/N) sum_i g_i . u_i - H(g)`` over tilt gradients ``g``.

    Returns the maximal value and the maximiser. The objective is a concave
    quadratic, so the maximiser solves ``(2/N) K g = u - b``.
    """
    X = _positions(ensemble)
    N = X.shape[0]
    r = np.asarray(velocities, dtype=float).reshape(X.shape) - mean_field_drift(kernel, target, X)
    fact = gram(kernel, X)
    g = 0.5 * N * fact.pinv() @ r
    value = float(np.sum(g * r) / N) - cotangent_norm_squared(kernel, X, g)
    return value, g


# -- cylinder functions and the generator -----------------------------------------


@dataclass(frozen=True)
class InnerFunction:
    """Smooth test function ``p`` on ``R^d``.

    ``linear``: ``a . x``; ``quadratic``: ``|x - c|^2``; ``bump``:
    ``exp(-|x - c|^2 / width^2)``.
    """

    kind: str
    vector: tuple = ()
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic", "bump"):
            raise ValueError(f"unknown inner function {self.kind!r}")
        object.__setattr__(self, "vector", tuple(float(v) for v in np.ravel(self.vector)))

    def _diff(self, X):
        c = np.asarray(self.vector) if self.vector else np.zeros(X.shape[1])
        return X - c

    def value(self, X) -> np.ndarray:
        X = as_points(X)
        if self.kind == "linear":
            return X @ np.asarray(self.vector)
        D = self._diff(X)
        r2 = np.sum(D**2, axis=1)
        return r2 if self.kind == "quadratic" else np.exp(-r2 / self.width**2)

    def gradient(self, X) -> np.ndarray:
        X = as_points(X)
        if self.kind == "linear":
            return np.broadcast_to(np.asarray(self.vector), X.shape).copy()
        D = self._diff(X)
        if self.kind == "quadratic":
            return 2.0 * D
        return -2.0 / self.width**2 * self.value(X)[:, None] * D

    def laplacian(self, X) -> np.ndarray:
        X = as_points(X)
        d = X.shape[1]
        if self.kind == "linear":
            return np.zeros(X.shape[0])
        if self.kind == "quadratic":
            return np.full(X.shape[0], 2.0 * d)
        r2 = np.sum(self._diff(X) ** 2, axis=1)
        w2 = self.width**2
        return self.value(X) * (4.0 * r2 / w2**2 - 2.0 * d / w2)


@dataclass(frozen=True)
class CylinderFunction:
    """``F(rho) = phi(<p_1, rho>, ..., <p_L, rho>)``.

    ``outer`` selects ``phi``: ``identity`` is ``sum_l y_l``, ``product`` is
    ``prod_l y_l`` and ``quadratic`` is ``sum_l y_l^2``.
    """

    outer: str
    inner: tuple

    def __post_init__(self):
        if self.outer not in ("identity", "product", "quadratic"):
            raise ValueError(f"unknown outer function {self.outer!r}")
        object.__setattr__(self, "inner", tuple(self.inner))
        if not self.inner:
            raise ValueError("a cylinder function needs at least one inner function")

    def moments(self, X) -> np.ndarray:
        """``y_l = (1/N) sum_i p_l(x_i)``."""
        X = as_points(X)
        return np.array([p.value(X).mean() for p in self.inner])

    def phi(self, y) -> float:
        y = np.asarray(y, dtype=float)
        if self.outer == "identity":
            return float(np.sum(y))
        if self.outer == "product":
            return float(np.prod(y))
        return float(np.sum(y**2))

    def phi_gradient(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.outer == "identity":
            return np.ones_like(y)
        if self.outer == "quadratic":
            return 2.0 * y
        L = y.size
        return np.array([np.prod(np.delete(y, l)) for l in range(L)])

    def phi_hessian(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        L = y.size
        if self.outer == "identity":
            return np.zeros((L, L))
        if self.outer == "quadratic":
            return 2.0 * np.eye(L)
        H = np.zeros((L, L))
        for l in range(L):
            for m in range(L):
                if l != m:
                    H[l, m] = np.prod(np.delete(y, [l, m]))
        return H

    def __call__(self, X) -> float:
        return self.phi(self.moments(X))

    def first_variation(self, X, at) -> np.ndarray:
        """``dF/drho(rho)(x) = sum_l d_l phi p_l(x)`` at the points ``at``."""
        g = self.phi_gradient(self.moments(X))
        return sum(g[l] * p.value(at) for l, p in enumerate(self.inner))

    def second_variation(self, X, at, at2) -> np.ndarray:
        """``d2F/drho2(rho)(x, x') = sum_lm d_lm phi p_l(x) p_m(x')``."""
        H = self.phi_hessian(self.moments(X))
        A = np.stack([p.value(at) for p in self.inner])
        B = np.stack([p.value(at2) for p in self.inner])
        return A.T @ H @ B


class GeneratorTerms(NamedTuple):
    drift: float
    interaction: float
    self_interaction: float

    @property
    def total(self) -> float:
        return self.drift + self.interaction + self.self_interaction

    @property
    def correction(self) -> float:
        """The two ``O(1/N)`` terms."""
        return self.interaction + self.self_interaction


def generator_terms(kernel: Kernel, target: Target, F: CylinderFunction, ensemble, N: int | None = None) -> GeneratorTerms:
    """The three terms of the stochastic SVGD generator applied to ``F``.

    * drift: ``(1/N) sum_i sum_l d_l phi grad p_l(x_i) . b(x_i)``
    * interaction: ``(1/N^3) sum_ij k_ij sum_lm d_lm phi grad p_l(x_i) . grad p_m(x_j)``
    * self-interaction: ``(1/N^2) sum_i k_ii sum_l d_l phi lap p_l(x_i)``
    """
    X = _positions(ensemble)
    N = X.shape[0] if N is None else int(N)
    if N != X.shape[0]:
        raise ValueError(f"N={N} does not match the ensemble size {X.shape[0]}")
    y = F.moments(X)
    g, H = F.phi_gradient(y), F.phi_hessian(y)
    b = mean_field_drift(kernel, target, X)
    K = kernel.matrix(X)
    grads = np.stack([p.gradient(X) for p in F.inner])  # (L, N, d)
    laps = np.stack([p.laplacian(X) for p in F.inner])  # (L, N)
    drift = float(np.einsum("l,lia,ia->", g, grads, b) / N)
    inter = float(np.einsum("ij,lm,lia,mja->", K, H, grads, grads) / N**3)
    self_inter = float(np.einsum("i,l,li->", np.diag(K), g, laps) / N**2)
    return GeneratorTerms(drift, inter, self_inter)


def generator_apply(kernel: Kernel, target: Target, F: CylinderFunction, ensemble, N: int | None = None) -> float:
    """Generator of stochastic SVGD applied to the cylinder function ``F``."""
    return generator_terms(kernel, target, F, ensemble, N).total


# -- export ----------------------------------------------------------------------


def write_diagnostics_csv(kernel: Kernel, target: Target, trajectory: Trajectory, stream: IO[str]) -> None:
    """Write ``step,t,ksd2_vstat,ksd2_ustat,drift_norm2,rate_increment`` rows.

    Quantities that are undefined for the kernel (V-statistic for rough
    kernels, U-statistic for one particle) are written as ``nan``. The rate
    increment of the last recorded step is ``nan`` because no velocity leaves it.
    """
    fmt = lambda v: format(v, ".17g")
    vel = trajectory.velocities
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["step", "t", "ksd2_vstat", "ksd2_ustat", "drift_norm2", "rate_increment"])
    for s in trajectory.recorded_steps:
        X = trajectory.positions[s]
        try:
            v = ksd_squared(kernel, target, X, "v-stat")
        except DiagonalUndefined:
            v = float("nan")
        u = ksd_squared(kernel, target, X, "u-stat") if X.shape[0] > 1 else float("nan")
        b = mean_field_drift(kernel, target, X)
        drift2 = float(np.sum(b * b))
        if s < trajectory.steps:
            rate = float(rate_increments(kernel, target, X[None], vel[s][None], trajectory.dt)[0])
        else:
            rate = float("nan")
        t = trajectory.t0 + s * trajectory.dt
        writer.writerow([int(s), fmt(t), fmt(v), fmt(u), fmt(drift2), fmt(rate)])


def summarize_ensemble(kernel: Kernel, target: Target, ensemble) -> dict:
    """Mean, covariance and KSD of an ensemble as plain Python values."""
    X = _positions(ensemble)
    out = {
        "n": int(X.shape[0]),
        "mean": X.mean(axis=0).tolist(),
        "cov": np.atleast_2d(np.cov(X.T, bias=True)).tolist(),
    }
    try:
        out["ksd2_vstat"] = ksd_squared(kernel, target, X, "v-stat")
    except DiagonalUndefined:
        out["ksd2_vstat"] = None
    out["ksd2_ustat"] = ksd_squared(kernel, target, X, "u-stat") if X.shape[0] > 1 else None
    return out


def tilt_cotangent_series(kernel: Kernel, trajectory: Trajectory, tilt: TiltField) -> np.ndarray:
    """``|xi_t|^2_{T*}`` at every step but the last (left end points)."""
    P = trajectory.positions[:-1]
    t = trajectory.times[:-1]
    return np.array([cotangent_norm_squared(kernel, P[n], tilt.gradient(P[n], t[n])) for n in range(len(P))])


def generator_fd_oracle(kernel: Kernel, target: Target, F: CylinderFunction, X, h: float = 1e-4) -> float:
    """Ito generator of ``G(X) = F(rho_X)`` from finite differences in particle coordinates.

    ``LG = grad G . b + sum_ij (k_ij / N) tr(d_{x_i} d_{x_j} G)``, an
    independent check on :func:`generator_terms`.
    """
    X = as_points(X).astype(float)
    N, d = X.shape
    flat = X.ravel()
    G = lambda v: F(v.reshape(N, d))
    n = flat.size
    grad = np.empty(n)
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        grad[a] = (G(flat + e) - G(flat - e)) / (2 * h)
    K = kernel.matrix(X)
    second = 0.0
    for i in range(N):
        for j in range(N):
            for a in range(d):
                p, q = i * d + a, j * d + a
                ep = np.zeros(n)
                eq = np.zeros(n)
                ep[p] = h
                eq[q] = h
                hess = (G(flat + ep + eq) - G(flat + ep - eq) - G(flat - ep + eq) + G(flat - ep - eq)) / (4 * h * h)
                second += K[i, j] / N * hess
    b = mean_field_drift(kernel, target, X).ravel()
    return float(grad @ b + second)
