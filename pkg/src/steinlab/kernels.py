"""Radial positive-definite kernels, Gram matrices and their square roots.

Every kernel here is radial, ``k(x, y) = scale * f(|x - y|)``, so all the
derivatives needed by the particle dynamics and the Stein kernel reduce to
three radial functions of ``r = |x - y|``:

* ``h(r) = f'(r) / r``, giving ``grad_y k = h * (y - x)``,
* ``m(r) = h'(r) / r``, giving the mixed Hessian
  ``d_{x_a} d_{y_b} k = -m (x-y)_a (x-y)_b - h delta_ab``,
* ``q(r) = r**2 * m(r)``, giving ``div_x grad_y k = -d h - q``.

The exponential-power family with ``p < 2`` is not differentiable at
``r = 0``; the diagonal conventions on :class:`Kernel` decide what is returned
there.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import IO, NamedTuple

import numpy as np

from .errors import DiagonalUndefined, NotPositiveSemidefinite

FAMILIES = ("exp-power", "gaussian", "imq", "matern32", "matern52")
GRAD_CONVENTIONS = ("zero",)
CROSS_CONVENTIONS = ("analytic-limit", "zero", "undefined-error")

DEFAULT_CLAMP_TOL = 1e-12


def as_points(x) -> np.ndarray:
    """Return ``x`` as a float array of shape ``(n, d)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected an (n, d) array of points, got shape {x.shape}")
    return x


class RadialTerms(NamedTuple):
    diff: np.ndarray  # x_i - y_j, shape (n, m, d)
    r2: np.ndarray
    f: np.ndarray
    h: np.ndarray
    q: np.ndarray
    m: np.ndarray
    diag: np.ndarray  # boolean mask of coincident pairs


@dataclass(frozen=True)
class Kernel:
    """A radial kernel ``k(x, y) = scale * f(|x - y| / sigma)``.

    Parameters
    ----------
    family
        One of ``exp-power``, ``gaussian``, ``imq``, ``matern32``, ``matern52``.
        ``gaussian`` is ``exp(-|x-y|^2 / sigma^2)``, i.e. ``exp-power`` with
        ``p = 2``.
    sigma
        Kernel width, in the units of the coordinates.
    p
        Smoothness exponent of the exponential-power family, in ``(0, 2]``.
    imq_beta
        Exponent of the inverse multiquadric ``(1 + r^2/sigma^2)^(-beta)``.
    scale
        Positive amplitude multiplying the kernel.
    diag_grad_convention
        Value of ``grad_y k(x, x)``; only ``zero`` is supported.
    diag_cross_convention
        Behaviour of ``div_x grad_y k`` at ``x = y``. Defaults to
        ``analytic-limit`` where the limit exists and ``undefined-error``
        otherwise.
    """

    family: str = "gaussian"
    sigma: float = 1.0
    p: float = 2.0
    imq_beta: float = 0.5
    scale: float = 1.0
    diag_grad_convention: str = "zero"
    diag_cross_convention: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.family == "gaussian":
            object.__setattr__(self, "p", 2.0)
        elif self.family == "exp-power" and not (0.0 < self.p <= 2.0):
            raise ValueError(f"exp-power smoothness p must lie in (0, 2], got {self.p}")
        if self.family == "imq" and not (0.0 < self.imq_beta < 1.0):
            raise ValueError(f"imq_beta must lie in (0, 1), got {self.imq_beta}")
        if self.diag_grad_convention not in GRAD_CONVENTIONS:
            raise ValueError(f"unsupported diag_grad_convention {self.diag_grad_convention!r}")
        if self.diag_cross_convention is None:
            default = "analytic-limit" if self.smooth_diagonal else "undefined-error"
            object.__setattr__(self, "diag_cross_convention", default)
        elif self.diag_cross_convention not in CROSS_CONVENTIONS:
            raise ValueError(f"unsupported diag_cross_convention {self.diag_cross_convention!r}")

    @property
    def smooth_diagonal(self) -> bool:
        """Whether second derivatives have a finite limit on the diagonal."""
        return not (self.family == "exp-power" and self.p < 2.0)

    @property
    def cross_defined_on_diagonal(self) -> bool:
        """Whether ``cross_trace(x, x)`` returns a value rather than raising."""
        if self.diag_cross_convention == "zero":
            return True
        return self.smooth_diagonal and self.diag_cross_convention == "analytic-limit"

    def scaled(self, c: float) -> "Kernel":
        """Return the kernel ``c * k``."""
        return Kernel(
            family=self.family,
            sigma=self.sigma,
            p=self.p,
            imq_beta=self.imq_beta,
            scale=self.scale * c,
            diag_grad_convention=self.diag_grad_convention,
            diag_cross_convention=self.diag_cross_convention,
        )

    # -- radial profile --------------------------------------------------

    def _profile(self, r2: np.ndarray):
        r = np.sqrt(r2)
        s2 = self.sigma**2
        c = self.scale
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family in ("gaussian", "exp-power") and self.p == 2.0:
                e = np.exp(-r2 / s2)
                f = c * e
                h = -2.0 * c / s2 * e
                m = -2.0 * h / s2
                q = r2 * m
            elif self.family == "exp-power":
                p = self.p
                rs = r / self.sigma
                s = rs**p
                e = np.exp(-s)
                f = c * e
                h = -c * p * rs ** (p - 2.0) / s2 * e
                q = h * ((p - 2.0) - p * s)
                m = q / r2
            elif self.family == "imq":
                beta = self.imq_beta
                u = 1.0 + r2 / s2
                f = c * u**-beta
                h = -2.0 * beta * c / s2 * u ** (-beta - 1.0)
                m = 4.0 * beta * (beta + 1.0) * c / s2**2 * u ** (-beta - 2.0)
                q = r2 * m
            elif self.family == "matern32":
                a = np.sqrt(3.0) / self.sigma
                e = np.exp(-a * r)
                f = c * (1.0 + a * r) * e
                h = -c * a**2 * e
                q = c * a**3 * r * e
                m = q / r2
            else:  # matern52
                a = np.sqrt(5.0) / self.sigma
                e = np.exp(-a * r)
                f = c * (1.0 + a * r + (a * r) ** 2 / 3.0) * e
                h = -c * a**2 / 3.0 * (1.0 + a * r) * e
                m = c * a**4 / 3.0 * e
                q = r2 * m
        return f, h, q, m

    def radial(self, X, Y=None) -> RadialTerms:
        X = as_points(X)
        Y = X if Y is None else as_points(Y)
        if X.shape[1] != Y.shape[1]:
            raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
        diff = X[:, None, :] - Y[None, :, :]
        r2 = np.sum(diff * diff, axis=-1)
        f, h, q, m = self._profile(r2)
        return RadialTerms(diff, r2, f, h, q, m, r2 == 0.0)

    def _check_diagonal(self, diag: np.ndarray, what: str) -> bool:
        """Return True if diagonal entries must be zeroed; raise if undefined."""
        if not diag.any():
            return False
        if self.diag_cross_convention == "zero":
            return True
        if self.smooth_diagonal and self.diag_cross_convention == "analytic-limit":
            return False
        raise DiagonalUndefined(
            f"{what} of the {self.family} kernel with p={self.p} does not exist on the "
            "diagonal (the kernel is only C^1 off the diagonal); use the u-statistic or "
            "set diag_cross_convention='zero'"
        )

    # -- vectorised evaluations -------------------------------------------

    def matrix(self, X, Y=None) -> np.ndarray:
        """Kernel matrix ``K[i, j] = k(x_i, y_j)``."""
        return self.radial(X, Y).f

    def grad_y_matrix(self, X, Y=None) -> np.ndarray:
        """Array ``G[i, j] = grad_y k(x_i, y_j)`` of shape ``(n, m, d)``."""
        rad = self.radial(X, Y)
        return self.radial_grad_y(rad)

    def grad_x_matrix(self, X, Y=None) -> np.ndarray:
        """Array ``G[i, j] = grad_x k(x_i, y_j)`` of shape ``(n, m, d)``."""
        return -self.grad_y_matrix(X, Y)

    def cross_trace_matrix(self, X, Y=None) -> np.ndarray:
        """Matrix of ``div_x grad_y k(x_i, y_j)``."""
        rad = self.radial(X, Y)
        return self.radial_cross(rad)

    def mixed_hessian(self, X, Y=None) -> np.ndarray:
        """Array ``H[i, j, a, b] = d/dx_a d/dy_b k(x_i, y_j)``."""
        rad = self.radial(X, Y)
        d = rad.diff.shape[-1]
        zero_diag = self._check_diagonal(rad.diag, "the mixed Hessian")
        off = ~rad.diag
        m = np.where(off, rad.m, 0.0)
        h = np.where(rad.diag & zero_diag, 0.0, rad.h)
        outer = rad.diff[..., :, None] * rad.diff[..., None, :]
        with np.errstate(invalid="ignore"):
            return -m[..., None, None] * outer - h[..., None, None] * np.eye(d)

    def radial_grad_y(self, rad: RadialTerms) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            g = -rad.h[..., None] * rad.diff
        if rad.diag.any():
            g[rad.diag] = 0.0
        return g

    def radial_cross(self, rad: RadialTerms) -> np.ndarray:
        d = rad.diff.shape[-1]
        zero_diag = self._check_diagonal(rad.diag, "div_x grad_y k")
        with np.errstate(invalid="ignore"):
            c = -d * rad.h - rad.q
        if rad.diag.any():
            if zero_diag:
                c[rad.diag] = 0.0
            else:
                c[rad.diag] = (-d * rad.h)[rad.diag]
        return c

    def terms(self, X, Y=None):
        """Return ``(k, grad_y k, div_x grad_y k)`` for all pairs in one pass."""
        rad = self.radial(X, Y)
        return rad.f, self.radial_grad_y(rad), self.radial_cross(rad)

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        out = {"family": self.family, "sigma": float(self.sigma)}
        if self.family == "exp-power":
            out["p"] = float(self.p)
        if self.family == "imq":
            out["imq_beta"] = float(self.imq_beta)
        if self.scale != 1.0:
            out["scale"] = float(self.scale)
        if self.diag_cross_convention != ("analytic-limit" if self.smooth_diagonal else "undefined-error"):
            out["diag_cross_convention"] = self.diag_cross_convention
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "Kernel":
        allowed = {"family", "sigma", "p", "imq_beta", "scale", "diag_grad_convention", "diag_cross_convention"}
        unknown = set(spec) - allowed
        if unknown:
            raise ValueError(f"unknown kernel fields: {sorted(unknown)}")
        if "family" not in spec:
            raise ValueError("kernel spec needs a 'family'")
        return cls(**spec)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Kernel":
        return cls.from_dict(json.loads(text))


# -- single-pair operations --------------------------------------------------


def evaluate(kernel: Kernel, x, y) -> float:
    """``k(x, y)`` for two points."""
    return float(kernel.matrix(x, y)[0, 0])


def grad_y(kernel: Kernel, x, y) -> np.ndarray:
    """``grad_y k(x, y)``; zero on the diagonal by convention."""
    return kernel.grad_y_matrix(x, y)[0, 0]


def grad_x(kernel: Kernel, x, y) -> np.ndarray:
    return kernel.grad_x_matrix(x, y)[0, 0]


def cross_trace(kernel: Kernel, x, y) -> float:
    """``div_x grad_y k(x, y)``, the scalar entering the Stein kernel."""
    return float(kernel.cross_trace_matrix(x, y)[0, 0])


# -- Gram factorisation ------------------------------------------------------


@dataclass(frozen=True)
class GramFactorization:
    """Eigendecomposition of a kernel Gram matrix.

    Eigenvalues are sorted in descending order; small negative eigenvalues
    produced by rounding are clamped to zero when forming square roots and
    pseudo-inverses.
    """

    points: np.ndarray
    gram: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    clamp_tol: float = DEFAULT_CLAMP_TOL

    @property
    def lambda_max(self) -> float:
        return float(max(self.eigenvalues[0], 0.0))

    @property
    def clamped_eigenvalues(self) -> np.ndarray:
        return np.maximum(self.eigenvalues, 0.0)

    @property
    def rank(self) -> int:
        return int(np.sum(self.eigenvalues > self.clamp_tol * self.lambda_max))

    def reconstruct(self) -> np.ndarray:
        U = self.eigenvectors
        return (U * self.clamped_eigenvalues) @ U.T

    def sqrt(self) -> np.ndarray:
        U = self.eigenvectors
        return (U * np.sqrt(self.clamped_eigenvalues)) @ U.T

    def pinv(self) -> np.ndarray:
        U = self.eigenvectors
        lam = self.eigenvalues
        keep = lam > self.clamp_tol * self.lambda_max
        inv = np.zeros_like(lam)
        inv[keep] = 1.0 / lam[keep]
        return (U * inv) @ U.T

    def inverse_quadratic_form(self, values) -> float:
        """``sum_a v_a^T K^+ v_a`` over the columns of an ``(n, d)`` array."""
        v = np.asarray(values, dtype=float).reshape(len(self.eigenvalues), -1)
        U = self.eigenvectors
        lam = self.eigenvalues
        keep = lam > self.clamp_tol * self.lambda_max
        coef = U[:, keep].T @ v
        return float(np.sum(coef**2 / lam[keep, None]))


def factorize(matrix, points=None, clamp_tol: float = DEFAULT_CLAMP_TOL) -> GramFactorization:
    """Factorise a symmetric positive-semidefinite matrix."""
    K = np.asarray(matrix, dtype=float)
    K = 0.5 * (K + K.T)
    lam, U = np.linalg.eigh(K)
    lam, U = lam[::-1], U[:, ::-1]
    lam_max = max(lam[0], 0.0)
    if lam_max == 0.0 or lam[-1] < -clamp_tol * lam_max:
        raise NotPositiveSemidefinite(
            f"Gram matrix has eigenvalue {lam[-1]:.3e} below -{clamp_tol:g} * lambda_max ({lam_max:.3e})"
        )
    pts = np.empty((K.shape[0], 0)) if points is None else np.asarray(points, dtype=float)
    return GramFactorization(pts, K, lam, U, clamp_tol)


def gram(kernel: Kernel, points, clamp_tol: float = DEFAULT_CLAMP_TOL) -> GramFactorization:
    """Gram matrix ``K[i, j] = k(x_i, x_j)`` together with its eigendecomposition."""
    pts = as_points(points)
    if len(pts) < 1:
        raise ValueError("need at least one point")
    return factorize(kernel.matrix(pts), pts, clamp_tol)


def sqrt_and_pinv(fact: GramFactorization) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric square root and Moore-Penrose pseudo-inverse of a Gram matrix."""
    return fact.sqrt(), fact.pinv()


def write_gram_csv(matrix, stream: IO[str]) -> None:
    """Write a matrix as row-major ``i,j,value`` CSV."""
    M = matrix.gram if isinstance(matrix, GramFactorization) else np.asarray(matrix, dtype=float)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["i", "j", "value"])
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            writer.writerow([i, j, format(M[i, j], ".17g")])
