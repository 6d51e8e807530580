"""Deterministic, stochastic and tilted SVGD time steppers.

The deterministic system moves each particle along

    dX_i/dt = (1/N) sum_j [ -k(X_i, X_j) grad V(X_j) + grad_{X_j} k(X_i, X_j) ],

and the stochastic system adds the kernel-correlated noise ``sqrt(2 K(X)) dW``
with block covariance ``K_ij = k(X_i, X_j) I_d / N``. Stochastic steps use
Euler-Maruyama in the Ito sense; the drift above already contains the
divergence of ``K``, so the product target is invariant.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import IO

import numpy as np
from scipy.optimize import least_squares

from .errors import NoConvergence, NonFinite
from .kernels import Kernel, as_points, factorize
from .targets import Target

MODES = ("ode-euler", "ode-rk4", "sde-euler-maruyama", "tilted-ode")


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Particle positions ``(N, d)`` at time ``time``."""

    positions: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        X = as_points(self.positions).copy()
        if not np.all(np.isfinite(X)):
            raise NonFinite("ensemble contains non-finite coordinates")
        X.setflags(write=False)
        object.__setattr__(self, "positions", X)
        object.__setattr__(self, "time", float(self.time))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def moved(self, positions, dt: float) -> "Ensemble":
        return Ensemble(positions, self.time + dt)


def grid_ensemble(n: int, dim: int, low: float = -1.0, high: float = 1.0) -> Ensemble:
    """Deterministic tensor grid with ``n`` particles (``n`` must be a ``dim``-th power)."""
    m = round(n ** (1.0 / dim))
    if m**dim != n:
        raise ValueError(f"a {dim}-d grid needs a perfect {dim}-th power of particles, got {n}")
    axis = np.linspace(low, high, m) if m > 1 else np.array([0.5 * (low + high)])
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return Ensemble(np.stack([g.ravel() for g in mesh], axis=1))


def gaussian_ensemble(n: int, dim: int, seed: int = 0, mean=0.0, std: float = 1.0) -> Ensemble:
    """Seeded draw of ``n`` particles from ``N(mean, std^2 I)``."""
    rng = np.random.default_rng(seed)
    return Ensemble(mean + std * rng.standard_normal((n, dim)))


@dataclass(frozen=True)
class IntegratorConfig:
    mode: str = "ode-euler"
    dt: float = 0.01
    steps: int = 100
    seed: int = 0
    record_every: int = 1

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        return integrator_problems(self.mode, self.dt, self.steps, self.seed, self.record_every)

    @property
    def horizon(self) -> float:
        return self.dt * self.steps


def integrator_problems(mode, dt, steps, seed, record_every) -> list[str]:
    out = []
    if mode not in MODES:
        out.append(f"dynamics.mode must be one of {MODES}, got {mode!r}")
    if not isinstance(dt, (int, float)) or not np.isfinite(dt) or dt <= 0:
        out.append(f"dynamics.dt must be a positive number, got {dt!r}")
    if not isinstance(steps, (int, np.integer)) or isinstance(steps, bool) or steps < 0:
        out.append(f"dynamics.steps must be a non-negative integer, got {steps!r}")
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        out.append(f"dynamics.seed must be an unsigned 64-bit integer, got {seed!r}")
    if not isinstance(record_every, (int, np.integer)) or isinstance(record_every, bool) or record_every < 1:
        out.append(f"dynamics.record_every must be a positive integer, got {record_every!r}")
    return out


@dataclass(frozen=True)
class TiltField:
    """Linear tilt potential ``xi(x, t)`` driving tilted SVGD.

    ``linear``: ``xi(x) = a . x``. ``radial-basis``: ``xi(x) = sum_m w_m
    exp(-|x - c_m|^2 / width^2)``. The optional ``schedule`` is a sequence of
    ``(t_start, amplitude)`` pairs making ``xi`` piecewise constant in time.
    """

    representation: str = "linear"
    coefficients: tuple = ()
    centers: tuple = ()
    weights: tuple = ()
    width: float = 1.0
    schedule: tuple = ((0.0, 1.0),)

    def __post_init__(self):
        if self.representation not in ("linear", "radial-basis"):
            raise ValueError(f"unknown tilt representation {self.representation!r}")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in np.ravel(self.coefficients)))
        object.__setattr__(self, "weights", tuple(float(w) for w in np.ravel(self.weights)))
        centers = np.asarray(self.centers, dtype=float)
        if self.weights:
            centers = centers.reshape(len(self.weights), -1)
        elif centers.size:
            raise ValueError("radial-basis centers need matching weights")
        object.__setattr__(self, "centers", tuple(tuple(float(v) for v in c) for c in centers.reshape(len(self.weights), -1 if self.weights else 0)))
        sched = tuple(sorted((float(t), float(a)) for t, a in self.schedule))
        if not sched:
            raise ValueError("tilt schedule must not be empty")
        object.__setattr__(self, "schedule", sched)
        if self.representation == "radial-basis" and not self.width > 0:
            raise ValueError("radial-basis tilt width must be positive")
        if not all(np.isfinite(self.coefficients)) or not all(np.isfinite(self.weights)):
            raise ValueError("tilt parameters must be finite")

    @classmethod
    def linear(cls, a, schedule=((0.0, 1.0),)) -> "TiltField":
        return cls("linear", coefficients=tuple(np.ravel(a)), schedule=schedule)

    @classmethod
    def radial_basis(cls, centers, weights, width: float, schedule=((0.0, 1.0),)) -> "TiltField":
        return cls("radial-basis", centers=centers, weights=weights, width=width, schedule=schedule)

    @classmethod
    def zero(cls, dim: int) -> "TiltField":
        return cls.linear(np.zeros(dim))

    def amplitude(self, t: float = 0.0) -> float:
        amp = self.schedule[0][1]
        for start, a in self.schedule:
            if t >= start:
                amp = a
        return amp

    def scaled(self, c: float) -> "TiltField":
        return TiltField(
            self.representation,
            self.coefficients,
            self.centers,
            self.weights,
            self.width,
            tuple((t, c * a) for t, a in self.schedule),
        )

    def value(self, x, t: float = 0.0) -> np.ndarray:
        X = as_points(x)
        amp = self.amplitude(t)
        if self.representation == "linear":
            return amp * (X @ np.asarray(self.coefficients))
        C = np.asarray(self.centers)
        r2 = np.sum((X[:, None, :] - C[None]) ** 2, axis=-1)
        return amp * (np.exp(-r2 / self.width**2) @ np.asarray(self.weights))

    def gradient(self, x, t: float = 0.0) -> np.ndarray:
        X = as_points(x)
        amp = self.amplitude(t)
        if self.representation == "linear":
            return amp * np.broadcast_to(np.asarray(self.coefficients), X.shape).copy()
        C = np.asarray(self.centers)
        D = X[:, None, :] - C[None]
        e = np.exp(-np.sum(D**2, axis=-1) / self.width**2) * np.asarray(self.weights)
        return amp * (-2.0 / self.width**2) * np.einsum("nm,nma->na", e, D)

    def to_dict(self) -> dict:
        out = {"representation": self.representation, "schedule": [list(s) for s in self.schedule]}
        if self.representation == "linear":
            out["coefficients"] = list(self.coefficients)
        else:
            out.update(centers=[list(c) for c in self.centers], weights=list(self.weights), width=self.width)
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "TiltField":
        allowed = {"representation", "coefficients", "centers", "weights", "width", "schedule"}
        unknown = set(spec) - allowed
        if unknown:
            raise ValueError(f"unknown tilt fields: {sorted(unknown)}")
        kw = dict(spec)
        if "schedule" in kw:
            kw["schedule"] = tuple(tuple(s) for s in kw["schedule"])
        return cls(**kw)


# -- drift --------------------------------------------------------------------


def mean_field_drift(kernel: Kernel, target: Target, particles, at=None) -> np.ndarray:
    """Drift field of the empirical measure on ``particles``, evaluated at ``at``.

    ``b(x) = (1/N) sum_j [ -k(x, x_j) grad V(x_j) + grad_y k(x, x_j) ]``;
    evaluating at the particles themselves gives the SVGD drift.
    """
    Y = as_points(particles)
    X = Y if at is None else as_points(at)
    rad = kernel.radial(X, Y)
    S = target.score(Y)
    return (-rad.f @ S + kernel.radial_grad_y(rad).sum(axis=1)) / Y.shape[0]


def svgd_drift(kernel: Kernel, target: Target, ensemble) -> np.ndarray:
    """Row ``i`` is ``(1/N) sum_j [-k(x_i,x_j) grad V(x_j) + grad_{x_j} k(x_i,x_j)]``."""
    X = ensemble.positions if isinstance(ensemble, Ensemble) else as_points(ensemble)
    return mean_field_drift(kernel, target, X)


def drift_field(kernel: Kernel, target: Target, ensemble, x) -> np.ndarray:
    """Mean-field drift of ``ensemble`` at arbitrary points ``x``."""
    X = ensemble.positions if isinstance(ensemble, Ensemble) else as_points(ensemble)
    return mean_field_drift(kernel, target, X, at=x)


def tilt_drift(kernel: Kernel, tilt: TiltField, X, t: float) -> np.ndarray:
    """Extra drift ``(2/N) sum_j k(x_i, x_j) grad xi(x_j)`` of tilted SVGD."""
    X = as_points(X)
    return 2.0 / X.shape[0] * kernel.matrix(X) @ tilt.gradient(X, t)


def max_drift_norm(kernel: Kernel, target: Target, ensemble) -> float:
    """``max_i |b_i|``, the convergence measure used for fixed points."""
    return float(np.max(np.linalg.norm(svgd_drift(kernel, target, ensemble), axis=1)))


def _checked(X: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(X)):
        raise NonFinite("integrator produced non-finite coordinates; reduce dt")
    return X


# -- steppers -----------------------------------------------------------------


def _rk4(f, X, dt):
    k1 = f(X)
    k2 = f(X + 0.5 * dt * k1)
    k3 = f(X + 0.5 * dt * k2)
    k4 = f(X + dt * k3)
    return X + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_deterministic(kernel: Kernel, target: Target, ensemble: Ensemble, dt: float, scheme: str = "euler") -> Ensemble:
    """One explicit Euler or classical RK4 step of the SVGD ODE."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    X = ensemble.positions
    if scheme == "euler":
        Xn = X + dt * mean_field_drift(kernel, target, X)
    elif scheme == "rk4":
        Xn = _rk4(lambda Z: mean_field_drift(kernel, target, Z), X, dt)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected 'euler' or 'rk4'")
    return ensemble.moved(_checked(Xn), dt)


def noise_increment(kernel: Kernel, X: np.ndarray, z: np.ndarray, dt: float) -> np.ndarray:
    """``sqrt(dt) sqrt(2K(X)) z`` using ``sqrt((2/N) K) (x) I_d`` per dimension."""
    N = X.shape[0]
    root = factorize(kernel.matrix(X), X).sqrt()
    return np.sqrt(2.0 * dt / N) * (root @ z)


def step_stochastic(
    kernel: Kernel,
    target: Target,
    ensemble: Ensemble,
    dt: float,
    rng: np.random.Generator,
    noise: np.ndarray | None = None,
) -> Ensemble:
    """Euler-Maruyama step of stochastic SVGD.

    ``noise`` overrides the standard normal draws (shape ``(N, d)``); passing
    zeros reduces the step to deterministic Euler.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    X = ensemble.positions
    z = rng.standard_normal(X.shape) if noise is None else np.asarray(noise, dtype=float).reshape(X.shape)
    Xn = X + dt * mean_field_drift(kernel, target, X) + noise_increment(kernel, X, z, dt)
    return ensemble.moved(_checked(Xn), dt)


def step_tilted(kernel: Kernel, target: Target, ensemble: Ensemble, tilt: TiltField, dt: float) -> Ensemble:
    """Euler step of SVGD with the extra drift ``(2/N) sum_j k(x_i,x_j) grad xi(x_j)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    X = ensemble.positions
    b = mean_field_drift(kernel, target, X) + tilt_drift(kernel, tilt, X, ensemble.time)
    return ensemble.moved(_checked(X + dt * b), dt)


# -- trajectories ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Every step of a run; ``record_every`` selects the rows that are exported.

    ``positions`` has shape ``(steps + 1, N, d)``; velocities are the forward
    differences ``(X_{n+1} - X_n) / dt``.
    """

    positions: np.ndarray
    dt: float
    t0: float = 0.0
    record_every: int = 1
    mode: str = "ode-euler"
    tilt: TiltField | None = None

    @property
    def steps(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def velocities(self) -> np.ndarray:
        return np.diff(self.positions, axis=0) / self.dt

    @property
    def recorded_steps(self) -> np.ndarray:
        idx = list(range(0, self.steps + 1, self.record_every))
        if idx[-1] != self.steps:
            idx.append(self.steps)
        return np.asarray(idx)

    def ensemble(self, step: int) -> Ensemble:
        return Ensemble(self.positions[step], self.t0 + step * self.dt)

    def recorded(self) -> list[Ensemble]:
        return [self.ensemble(int(s)) for s in self.recorded_steps]

    def write_csv(self, stream: IO[str], kind: str = "positions") -> None:
        """Write ``step,t,particle,x0,...`` rows for the recorded steps."""
        if kind == "positions":
            data, steps = self.positions, self.recorded_steps
        elif kind == "velocities":
            data = self.velocities
            steps = self.recorded_steps[self.recorded_steps < self.steps]
        else:
            raise ValueError("kind must be 'positions' or 'velocities'")
        d = self.positions.shape[2]
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["step", "t", "particle"] + [f"x{a}" for a in range(d)])
        for s in steps:
            t = format(self.t0 + s * self.dt, ".17g")
            for i, row in enumerate(data[s]):
                writer.writerow([int(s), t, i] + [format(v, ".17g") for v in row])


def run_trajectory(
    config: IntegratorConfig,
    kernel: Kernel,
    target: Target,
    initial: Ensemble,
    tilt: TiltField | None = None,
) -> Trajectory:
    """Integrate ``config.steps`` steps from ``initial`` and keep every state."""
    if config.mode == "tilted-ode" and tilt is None:
        raise ValueError("tilted-ode mode needs a tilt field")
    rng = np.random.default_rng(config.seed)
    out = np.empty((config.steps + 1,) + initial.positions.shape)
    out[0] = initial.positions
    ens = initial
    for n in range(config.steps):
        if config.mode == "ode-euler":
            ens = step_deterministic(kernel, target, ens, config.dt, "euler")
        elif config.mode == "ode-rk4":
            ens = step_deterministic(kernel, target, ens, config.dt, "rk4")
        elif config.mode == "sde-euler-maruyama":
            ens = step_stochastic(kernel, target, ens, config.dt, rng)
        else:
            ens = step_tilted(kernel, target, ens, tilt, config.dt)
        out[n + 1] = ens.positions
    return Trajectory(out, config.dt, initial.time, config.record_every, config.mode, tilt)


@dataclass(frozen=True)
class MomentSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def ergodic_average(trajectory: Trajectory, burn_in: int) -> tuple[np.ndarray, MomentSummary]:
    """Pool all particles over steps ``burn_in + 1, ..., steps``."""
    if not 0 <= burn_in < trajectory.steps:
        raise ValueError(f"burn_in must lie in [0, {trajectory.steps}), got {burn_in}")
    samples = trajectory.positions[burn_in + 1 :].reshape(-1, trajectory.positions.shape[2])
    mean = samples.mean(axis=0)
    D = samples - mean
    cov = D.T @ D / len(samples)
    return samples, MomentSummary(mean, cov, len(samples))


# -- fixed points ---------------------------------------------------------------


@dataclass(frozen=True)
class RelaxationResult:
    ensemble: Ensemble
    steps: int
    drift_norm: float
    polished: bool


def relax_to_fixed_point(
    kernel: Kernel,
    target: Target,
    initial: Ensemble,
    dt: float = 0.5,
    max_steps: int = 4000,
    tol: float = 1e-6,
    check_every: int = 50,
    polish: bool = True,
) -> RelaxationResult:
    """Run RK4 towards a stationary configuration of the SVGD ODE.

    If the maximal particle drift has not dropped below ``tol`` after
    ``max_steps`` steps, the stationarity equation ``b(X) = 0`` is solved by a
    Levenberg-Marquardt least-squares polish started from the integrated state.
    SVGD relaxes very slowly along some directions, and the polish reaches the
    same attractor in a fraction of the time.

    Raises
    ------
    NoConvergence
        If the drift norm is still above ``tol`` at the end.
    """
    X = initial.positions.copy()
    shape = X.shape
    f = lambda Z: mean_field_drift(kernel, target, Z)
    norm = lambda Z: float(np.max(np.linalg.norm(f(Z), axis=1)))
    nb = norm(X)
    steps = 0
    while nb >= tol and steps < max_steps:
        for _ in range(min(check_every, max_steps - steps)):
            X = _checked(_rk4(f, X, dt))
            steps += 1
        nb = norm(X)
    polished = False
    if nb >= tol and polish:
        sol = least_squares(lambda v: f(v.reshape(shape)).ravel(), X.ravel(), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        Y = sol.x.reshape(shape)
        if np.all(np.isfinite(Y)):
            X, nb, polished = Y, norm(Y), True
    if not nb < tol:
        raise NoConvergence(f"drift norm {nb:.3e} did not reach {tol:g} within {steps} steps")
    return RelaxationResult(Ensemble(X, initial.time + steps * dt), steps, nb, polished)
