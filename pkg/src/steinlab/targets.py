"""Unnormalised target distributions ``pi = exp(-V) / Z``.

Only the potential ``V`` and its gradient are used by the samplers; the
normalising constant is stored where it is known in closed form but no
algorithm depends on it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.special import logsumexp

from .errors import Unsupported
from .kernels import as_points

FAMILIES = ("gaussian", "gaussian-mixture", "double-well")


def _spd(cov, d: int) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (d, d):
        raise ValueError(f"covariance must be {d}x{d}, got shape {cov.shape}")
    if not np.allclose(cov, cov.T):
        raise ValueError("covariance must be symmetric")
    if np.linalg.eigvalsh(cov)[0] <= 0:
        raise ValueError("covariance must be positive definite")
    return cov


@dataclass(frozen=True, eq=False)
class Target:
    """Target density specified by its family and parameters.

    Use the constructors :meth:`gaussian`, :meth:`gaussian_mixture` and
    :meth:`double_well` rather than instantiating directly.
    """

    family: str
    dim: int
    params: dict = field(default_factory=dict)

    # -- constructors ------------------------------------------------------

    @classmethod
    def gaussian(cls, mean, cov=None) -> "Target":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        d = mean.size
        cov = np.eye(d) if cov is None else _spd(np.atleast_2d(cov), d)
        prec = np.linalg.inv(cov)
        return cls("gaussian", d, {"mean": mean, "cov": cov, "prec": prec})

    @classmethod
    def standard_gaussian(cls, dim: int) -> "Target":
        return cls.gaussian(np.zeros(dim))

    @classmethod
    def gaussian_mixture(cls, weights, means, covs) -> "Target":
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or np.any(w <= 0):
            raise ValueError("mixture weights must be a positive vector")
        w = w / w.sum()
        means = np.asarray(means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        if means.shape[0] != w.size:
            raise ValueError("need one mean per mixture component")
        d = means.shape[1]
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 1:
            covs = covs.reshape(-1, 1, 1)
        covs = np.stack([_spd(c, d) for c in covs])
        precs = np.linalg.inv(covs)
        logdets = np.linalg.slogdet(covs)[1]
        return cls(
            "gaussian-mixture",
            d,
            {"weights": w, "means": means, "covs": covs, "precs": precs, "logdets": logdets},
        )

    @classmethod
    def double_well(cls, a: float = 1.0, b: float = 1.0, dim: int = 1) -> "Target":
        """``V(x) = (x_1^2 - a)^2 / b + sum_{i>=2} x_i^2 / 2``."""
        if a <= 0 or b <= 0:
            raise ValueError("double-well parameters a and b must be positive")
        return cls("double-well", int(dim), {"a": float(a), "b": float(b)})

    # -- potential and score --------------------------------------------

    def potential(self, x) -> np.ndarray | float:
        """``V(x)`` for one point (returns a float) or an ``(n, d)`` array."""
        single = np.ndim(x) <= 1
        X = as_points(x)
        self._check_dim(X)
        v = self._potential(X)
        return float(v[0]) if single else v

    def score(self, x) -> np.ndarray:
        """``grad V(x)``, with the same shape as ``x``."""
        single = np.ndim(x) <= 1
        X = as_points(x)
        self._check_dim(X)
        g = self._score(X)
        return g[0] if single else g

    def _check_dim(self, X):
        if X.shape[1] != self.dim:
            raise ValueError(f"target has dimension {self.dim}, points have {X.shape[1]}")

    def _potential(self, X):
        P = self.params
        if self.family == "gaussian":
            D = X - P["mean"]
            return 0.5 * np.einsum("na,ab,nb->n", D, P["prec"], D)
        if self.family == "gaussian-mixture":
            return -logsumexp(self._component_logpdf(X), axis=1)
        a, b = P["a"], P["b"]
        return (X[:, 0] ** 2 - a) ** 2 / b + 0.5 * np.sum(X[:, 1:] ** 2, axis=1)

    def _component_logpdf(self, X):
        P = self.params
        D = X[:, None, :] - P["means"][None]
        quad = np.einsum("nka,kab,nkb->nk", D, P["precs"], D)
        d = self.dim
        return np.log(P["weights"]) - 0.5 * (quad + P["logdets"] + d * np.log(2 * np.pi))

    def _score(self, X):
        P = self.params
        if self.family == "gaussian":
            return (X - P["mean"]) @ P["prec"]
        if self.family == "gaussian-mixture":
            logp = self._component_logpdf(X)
            resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
            D = X[:, None, :] - P["means"][None]
            comp = np.einsum("kab,nkb->nka", P["precs"], D)
            return np.einsum("nk,nka->na", resp, comp)
        a, b = P["a"], P["b"]
        g = X.copy()
        g[:, 0] = 4.0 * X[:, 0] * (X[:, 0] ** 2 - a) / b
        return g

    def log_normaliser(self) -> float | None:
        """``log Z`` where known in closed form, otherwise ``None``."""
        if self.family == "gaussian":
            return 0.5 * (self.dim * np.log(2 * np.pi) + np.linalg.slogdet(self.params["cov"])[1])
        if self.family == "gaussian-mixture":
            return 0.0
        return None

    # -- moments -----------------------------------------------------------

    def reference_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact (or quadrature) mean and covariance of the target."""
        P = self.params
        if self.family == "gaussian":
            return P["mean"].copy(), P["cov"].copy()
        if self.family == "gaussian-mixture":
            w, mu, covs = P["weights"], P["means"], P["covs"]
            mean = w @ mu
            D = mu - mean
            cov = np.einsum("k,kab->ab", w, covs) + np.einsum("k,ka,kb->ab", w, D, D)
            return mean, cov
        if self.dim != 1:
            raise Unsupported("double-well reference moments are only tabulated for d = 1")
        x = np.linspace(-10.0, 10.0, 4097)
        v = self._potential(x[:, None])
        dens = np.exp(-(v - v.min()))
        z = simpson(dens, x=x)
        m = simpson(x * dens, x=x) / z
        var = simpson((x - m) ** 2 * dens, x=x) / z
        return np.array([m]), np.array([[var]])

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        P = self.params
        if self.family == "gaussian":
            return {"family": "gaussian", "mean": P["mean"].tolist(), "cov": P["cov"].tolist()}
        if self.family == "gaussian-mixture":
            return {
                "family": "gaussian-mixture",
                "weights": P["weights"].tolist(),
                "means": P["means"].tolist(),
                "covs": P["covs"].tolist(),
            }
        return {"family": "double-well", "a": P["a"], "b": P["b"], "dim": self.dim}

    @classmethod
    def from_dict(cls, spec: dict) -> "Target":
        spec = dict(spec)
        family = spec.pop("family", None)
        allowed = {
            "gaussian": {"mean", "cov"},
            "gaussian-mixture": {"weights", "means", "covs"},
            "double-well": {"a", "b", "dim"},
        }
        if family not in allowed:
            raise ValueError(f"unknown target family {family!r}; expected one of {FAMILIES}")
        unknown = set(spec) - allowed[family]
        if unknown:
            raise ValueError(f"unknown fields for {family} target: {sorted(unknown)}")
        if family == "gaussian":
            if "mean" not in spec:
                raise ValueError("gaussian target needs a 'mean'")
            return cls.gaussian(spec["mean"], spec.get("cov"))
        if family == "gaussian-mixture":
            missing = allowed[family] - set(spec)
            if missing:
                raise ValueError(f"gaussian-mixture target is missing {sorted(missing)}")
            return cls.gaussian_mixture(spec["weights"], spec["means"], spec["covs"])
        return cls.double_well(spec.get("a", 1.0), spec.get("b", 1.0), spec.get("dim", 1))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Target":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        return isinstance(other, Target) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.to_json())


def potential(target: Target, x):
    return target.potential(x)


def score(target: Target, x):
    return target.score(x)


def reference_moments(target: Target):
    return target.reference_moments()
