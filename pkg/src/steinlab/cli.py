"""Command-line experiment runner.

Every invocation runs one experiment described by a JSON config, writes its
artefacts atomically into the output directory and finishes with a
``manifest.json`` holding the effective config, its SHA-256 hash, the seed and
the hashes of all artefacts. Re-running with the manifest's config reproduces
every artefact byte for byte.

Exit codes: 0 success, 1 unexpected error, 2 invalid config, 3 no
convergence, 4 non-finite values, 5 file input/output failure. Failures are
reported as a JSON object on stderr and, when possible, in ``error.json``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .compare import fixed_point_comparison, ksd_sweep
from .continuum import (
    DensityGrid,
    GaussianPath,
    cotangent_norm_squared as continuum_cotangent,
    onsager_apply,
    path_diagnostics,
    solve_stein_pde,
    stein_fisher_continuum,
    tangent_norm_continuum,
)
from .diagnostics import (
    CylinderFunction,
    InnerFunction,
    drift_rkhs_norm_squared,
    generator_apply,
    generator_fd_oracle,
    hamiltonian,
    ksd_squared,
    rate_functional,
    summarize_ensemble,
    tilt_cotangent_series,
    write_diagnostics_csv,
)
from .dynamics import (
    MODES,
    Ensemble,
    IntegratorConfig,
    TiltField,
    ergodic_average,
    gaussian_ensemble,
    grid_ensemble,
    integrator_problems,
    run_trajectory,
    svgd_drift,
)
from .errors import ConfigInvalid, IoError, NoConvergence, NonFinite
from .kernels import Kernel
from .targets import Target

EXPERIMENTS = (
    "run-ode",
    "run-sde",
    "run-tilted",
    "ksd",
    "rate",
    "compare",
    "continuum-identities",
    "reproduce-fig1",
)
SECTIONS = ("experiment", "target", "kernel", "dynamics", "ensemble", "tilt", "diagnostics", "output", "options")
FORMATS = ("csv", "json", "svg")
ESTIMATORS = ("auto", "v-stat", "u-stat")
INITS = ("grid", "gaussian", "explicit")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_NON_FINITE = 4
EXIT_IO = 5

MULTI_KERNEL = ("compare", "reproduce-fig1")
DYNAMIC_EXPERIMENTS = ("run-ode", "run-sde", "run-tilted", "ksd", "rate")
MODE_ALLOWED = {
    "run-ode": ("ode-euler", "ode-rk4"),
    "run-sde": ("sde-euler-maruyama",),
    "run-tilted": ("tilted-ode",),
}
DEFAULT_MODE = {"run-ode": "ode-euler", "run-sde": "sde-euler-maruyama", "run-tilted": "tilted-ode"}
OPTION_DEFAULTS = {
    "run-ode": {},
    "run-sde": {"burn_in": 0.5},
    "run-tilted": {},
    "ksd": {},
    "rate": {},
    "compare": {"count": 10, "fixed_points": False},
    "continuum-identities": {"grid_points": 513, "low": -8.0, "high": 8.0, "horizon": 2.0, "pde_dt": 0.005},
    "reproduce-fig1": {"dt": 0.5, "max_steps": 4000, "tol": 1e-6, "covariance_tol": 0.15},
}
FIG1_KERNELS = (
    {"family": "exp-power", "sigma": 1.0, "p": 2.0},
    {"family": "exp-power", "sigma": 1.0, "p": 1.0},
)
COMPARE_KERNELS = (
    {"family": "exp-power", "sigma": 1.0, "p": 1.0},
    {"family": "exp-power", "sigma": 1.0, "p": 2.0},
)
DIAGONAL_RULE = (
    "the V-statistic evaluates the Stein kernel on the diagonal, but this kernel is only "
    "continuously differentiable off the diagonal; use ksd_estimator 'u-stat' (or 'auto') "
    "or diag_cross_convention 'zero'"
)

SVG_SIZE = 400
SVG_MARGIN = 20
SVG_LIMIT = 4.0


# -- config ------------------------------------------------------------------------


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) and math.isfinite(v)


@dataclass(frozen=True)
class EnsembleSpec:
    """How the initial ensemble is built: a tensor grid, a seeded normal draw or explicit positions."""

    n: int = 8
    init: str = "grid"
    low: float = -2.0
    high: float = 2.0
    mean: float = 0.0
    std: float = 1.0
    seed: int | None = None
    positions: tuple | None = None

    def build(self, dim: int, default_seed: int) -> Ensemble:
        if self.init == "grid":
            return grid_ensemble(self.n, dim, self.low, self.high)
        if self.init == "gaussian":
            seed = default_seed if self.seed is None else self.seed
            return gaussian_ensemble(self.n, dim, seed, self.mean, self.std)
        return Ensemble(np.asarray(self.positions, dtype=float).reshape(self.n, dim))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "init": self.init,
            "low": self.low,
            "high": self.high,
            "mean": self.mean,
            "std": self.std,
            "seed": self.seed,
            "positions": None if self.positions is None else [list(p) for p in self.positions],
        }


@dataclass(frozen=True)
class DiagnosticFlags:
    ksd: bool = True
    rate: bool = False
    hamiltonian: bool = False
    generator_check: bool = False
    ksd_estimator: str = "auto"

    def estimator_for(self, kernel: Kernel) -> str:
        if self.ksd_estimator != "auto":
            return self.ksd_estimator
        return "v-stat" if kernel.cross_defined_on_diagonal else "u-stat"

    def to_dict(self) -> dict:
        return {
            "ksd": self.ksd,
            "rate": self.rate,
            "hamiltonian": self.hamiltonian,
            "generator-check": self.generator_check,
            "ksd_estimator": self.ksd_estimator,
        }


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "out"
    formats: tuple = ("csv", "json")

    def to_dict(self) -> dict:
        return {"directory": self.directory, "formats": list(self.formats)}


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A fully resolved experiment description.

    Build it with :meth:`from_dict`, which fills defaults and rejects unknown
    fields; :meth:`to_dict` returns the effective config, and
    ``from_dict(c.to_dict()) == c``.
    """

    experiment: str
    target: Target
    kernels: tuple
    dynamics: IntegratorConfig
    ensemble: EnsembleSpec
    tilt: TiltField | None
    diagnostics: DiagnosticFlags
    output: OutputSpec
    options: dict = field(default_factory=dict)

    @property
    def kernel(self) -> Kernel:
        return self.kernels[0]

    @property
    def seed(self) -> int:
        return self.dynamics.seed

    def to_dict(self) -> dict:
        kernels = [k.to_dict() for k in self.kernels]
        return {
            "experiment": self.experiment,
            "target": self.target.to_dict(),
            "kernel": kernels if self.experiment in MULTI_KERNEL else kernels[0],
            "dynamics": {
                "mode": self.dynamics.mode,
                "dt": self.dynamics.dt,
                "steps": self.dynamics.steps,
                "seed": self.dynamics.seed,
                "record_every": self.dynamics.record_every,
            },
            "ensemble": self.ensemble.to_dict(),
            "tilt": None if self.tilt is None else self.tilt.to_dict(),
            "diagnostics": self.diagnostics.to_dict(),
            "output": self.output.to_dict(),
            "options": dict(self.options),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @property
    def sha256(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.sha256)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Resolve ``raw`` against the defaults.

        Raises
        ------
        ConfigInvalid
            Carrying every diagnostic from :func:`validate`.
        """
        parsed, problems = _resolve(raw)
        if problems:
            raise ConfigInvalid(problems)
        return parsed

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def validate(config) -> list[str]:
    """Schema and semantic checks; an empty list means the config is runnable."""
    if isinstance(config, ExperimentConfig):
        config = config.to_dict()
    return _resolve(config)[1]


def _unknown(section: str, spec: dict, allowed) -> list[str]:
    extra = sorted(set(spec) - set(allowed))
    return [f"{section}: unknown field {k!r}" for k in extra]


def _resolve(raw) -> tuple[ExperimentConfig | None, list[str]]:
    if not isinstance(raw, dict):
        return None, ["config must be a JSON object"]
    problems = _unknown("config", raw, SECTIONS)
    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        problems.append(f"experiment must be one of {list(EXPERIMENTS)}, got {experiment!r}")
        return None, problems

    def section(name) -> dict:
        value = raw.get(name)
        if value is None:
            return {}
        if not isinstance(value, dict):
            problems.append(f"{name} must be an object")
            return {}
        return value

    # target
    dim_default = 2 if experiment == "reproduce-fig1" else 1
    target_spec = raw.get("target") or {"family": "gaussian", "mean": [0.0] * dim_default}
    target = None
    try:
        target = Target.from_dict(target_spec)
    except (ValueError, TypeError) as exc:
        problems.append(f"target: {exc}")
    dim = target.dim if target is not None else dim_default

    # kernels
    kernel_spec = raw.get("kernel")
    multi = experiment in MULTI_KERNEL
    if kernel_spec is None:
        defaults = {"compare": COMPARE_KERNELS, "reproduce-fig1": FIG1_KERNELS}
        kernel_spec = [dict(k) for k in defaults[experiment]] if multi else {"family": "gaussian", "sigma": 1.0}
    kernels = []
    if multi and not isinstance(kernel_spec, list):
        problems.append(f"kernel: {experiment} needs a list of kernel specs")
    elif not multi and not isinstance(kernel_spec, dict):
        problems.append(f"kernel: {experiment} needs a single kernel spec")
    else:
        for i, spec in enumerate(kernel_spec if multi else [kernel_spec]):
            where = f"kernel[{i}]" if multi else "kernel"
            if not isinstance(spec, dict):
                problems.append(f"{where}: must be an object")
                continue
            try:
                kernels.append(Kernel.from_dict(spec))
            except (ValueError, TypeError) as exc:
                problems.append(f"{where}: {exc}")
        if experiment == "compare" and len(kernel_spec) != 2:
            problems.append(f"kernel: compare needs exactly two kernels, got {len(kernel_spec)}")
        if experiment == "reproduce-fig1" and not kernel_spec:
            problems.append("kernel: reproduce-fig1 needs at least one kernel")

    # dynamics
    dyn = section("dynamics")
    problems += _unknown("dynamics", dyn, ("mode", "dt", "steps", "seed", "record_every"))
    dyn_eff = {
        "mode": DEFAULT_MODE.get(experiment, "ode-rk4"),
        "dt": 0.01,
        "steps": 0 if experiment == "ksd" else 100,
        "seed": 0,
        "record_every": 1,
    }
    dyn_eff.update({k: v for k, v in dyn.items() if k in dyn_eff})
    dyn_problems = integrator_problems(**dyn_eff)
    problems += dyn_problems
    allowed_modes = MODE_ALLOWED.get(experiment)
    if allowed_modes and dyn_eff["mode"] in MODES and dyn_eff["mode"] not in allowed_modes:
        problems.append(f"dynamics.mode: {experiment} runs {list(allowed_modes)}, got {dyn_eff['mode']!r}")
    dynamics = None if dyn_problems else IntegratorConfig(**dyn_eff)

    # ensemble
    ens = section("ensemble")
    problems += _unknown("ensemble", ens, ("n", "init", "low", "high", "mean", "std", "seed", "positions"))
    fig1 = experiment == "reproduce-fig1"
    ens_eff = {"n": 100 if fig1 else 8, "init": "grid", "low": -1.0 if fig1 else -2.0, "high": 1.0 if fig1 else 2.0}
    ens_eff.update({"mean": 0.0, "std": 1.0, "seed": None, "positions": None})
    ens_eff.update({k: v for k, v in ens.items() if k in ens_eff})
    ensemble = _ensemble_spec(ens_eff, dim, problems)

    # tilt
    tilt = None
    if raw.get("tilt") is not None:
        try:
            tilt = TiltField.from_dict(raw["tilt"])
        except (ValueError, TypeError) as exc:
            problems.append(f"tilt: {exc}")
        else:
            tdim = len(tilt.coefficients) if tilt.representation == "linear" else len(tilt.centers[0]) if tilt.centers else dim
            if tdim != dim:
                problems.append(f"tilt: acts in dimension {tdim} but the target has dimension {dim}")
    if experiment == "run-tilted" and raw.get("tilt") is None:
        problems.append("tilt: run-tilted needs a tilt field")

    # diagnostics
    diag = section("diagnostics")
    problems += _unknown("diagnostics", diag, ("ksd", "rate", "hamiltonian", "generator-check", "ksd_estimator"))
    flags = {k: diag.get(k, d) for k, d in (("ksd", True), ("rate", False), ("hamiltonian", False), ("generator-check", False))}
    for k, v in flags.items():
        if not isinstance(v, bool):
            problems.append(f"diagnostics.{k} must be true or false, got {v!r}")
    estimator = diag.get("ksd_estimator", "auto")
    if estimator not in ESTIMATORS:
        problems.append(f"diagnostics.ksd_estimator must be one of {list(ESTIMATORS)}, got {estimator!r}")
    uses_ksd = experiment in ("ksd", "compare") or (experiment in DYNAMIC_EXPERIMENTS and flags["ksd"] is True)
    if estimator == "v-stat" and uses_ksd:
        for i, k in enumerate(kernels):
            if not k.cross_defined_on_diagonal:
                where = f"kernel[{i}]" if multi else "kernel"
                problems.append(f"diagnostics.ksd_estimator: {where} ({k.family}, p={k.p:g}): {DIAGONAL_RULE}")
    if estimator == "u-stat" and uses_ksd and ensemble is not None and ensemble.n < 2:
        problems.append("diagnostics.ksd_estimator: the U-statistic needs at least two particles")
    if flags["hamiltonian"] is True and raw.get("tilt") is None:
        problems.append("diagnostics.hamiltonian: needs a tilt field")
    diagnostics = DiagnosticFlags(
        bool(flags["ksd"]), bool(flags["rate"]), bool(flags["hamiltonian"]), bool(flags["generator-check"]), estimator
    )

    # output
    out = section("output")
    problems += _unknown("output", out, ("directory", "formats"))
    directory = out.get("directory", "out")
    if not isinstance(directory, str) or not directory:
        problems.append(f"output.directory must be a non-empty string, got {directory!r}")
    formats = out.get("formats", ["csv", "json"])
    if not isinstance(formats, list) or not all(f in FORMATS for f in formats):
        problems.append(f"output.formats must be a list drawn from {list(FORMATS)}, got {formats!r}")
        formats = []
    output = OutputSpec(str(directory), tuple(f for f in FORMATS if f in formats))

    # options
    opts = section("options")
    defaults = OPTION_DEFAULTS[experiment]
    problems += _unknown(f"options ({experiment})", opts, defaults)
    options = dict(defaults)
    options.update({k: v for k, v in opts.items() if k in defaults})
    problems += _option_problems(experiment, options)

    # experiment-specific
    if experiment == "continuum-identities" and target is not None and dim != 1:
        problems.append("target: continuum-identities works on one-dimensional targets")
    if experiment == "compare" and target is not None and target.family == "double-well" and dim > 1:
        problems.append("target: compare needs reference densities; double-well targets are one-dimensional only")

    if problems or target is None or dynamics is None or ensemble is None:
        return None, problems
    config = ExperimentConfig(experiment, target, tuple(kernels), dynamics, ensemble, tilt, diagnostics, output, options)
    return config, []


def _ensemble_spec(e: dict, dim: int, problems: list) -> EnsembleSpec | None:
    before = len(problems)
    if not _is_int(e["n"]) or e["n"] < 1:
        problems.append(f"ensemble.n must be a positive integer, got {e['n']!r}")
    if e["init"] not in INITS:
        problems.append(f"ensemble.init must be one of {list(INITS)}, got {e['init']!r}")
    for k in ("low", "high", "mean", "std"):
        if not _is_number(e[k]):
            problems.append(f"ensemble.{k} must be a finite number, got {e[k]!r}")
    if e["seed"] is not None and (not _is_int(e["seed"]) or not 0 <= e["seed"] < 2**64):
        problems.append(f"ensemble.seed must be an unsigned 64-bit integer or null, got {e['seed']!r}")
    if len(problems) > before:
        return None
    if e["init"] == "grid":
        m = round(e["n"] ** (1.0 / dim))
        if m**dim != e["n"]:
            problems.append(f"ensemble.n: a {dim}-d grid needs a perfect {dim}-th power, got {e['n']}")
        if not e["low"] < e["high"]:
            problems.append("ensemble.low must be below ensemble.high")
    if e["init"] == "gaussian" and not e["std"] > 0:
        problems.append("ensemble.std must be positive")
    positions = None
    if e["init"] == "explicit":
        try:
            P = np.asarray(e["positions"], dtype=float)
        except (TypeError, ValueError):
            P = None
        if P is None or P.ndim == 0 or P.size != e["n"] * dim or not np.all(np.isfinite(P)):
            problems.append(f"ensemble.positions must hold {e['n']} finite points of dimension {dim}")
        else:
            positions = tuple(tuple(float(v) for v in row) for row in P.reshape(e["n"], dim))
    elif e["positions"] is not None:
        problems.append("ensemble.positions is only used with init 'explicit'")
    if len(problems) > before:
        return None
    return EnsembleSpec(
        int(e["n"]), e["init"], float(e["low"]), float(e["high"]), float(e["mean"]), float(e["std"]),
        None if e["seed"] is None else int(e["seed"]), positions,
    )


def _option_problems(experiment: str, o: dict) -> list[str]:
    out = []
    where = f"options.{{}} ({experiment})"
    if experiment == "run-sde" and not (_is_number(o["burn_in"]) and 0 <= o["burn_in"] < 1):
        out.append(where.format("burn_in") + f" must lie in [0, 1), got {o['burn_in']!r}")
    if experiment == "compare":
        if not _is_int(o["count"]) or o["count"] < 1:
            out.append(where.format("count") + f" must be a positive integer, got {o['count']!r}")
        if not isinstance(o["fixed_points"], bool):
            out.append(where.format("fixed_points") + " must be true or false")
    if experiment == "continuum-identities":
        g = o["grid_points"]
        if not _is_int(g) or g < 65 or g % 2 == 0:
            out.append(where.format("grid_points") + f" must be an odd integer >= 65, got {g!r}")
        if not (_is_number(o["low"]) and _is_number(o["high"]) and o["low"] < o["high"]):
            out.append(where.format("low/high") + " must be finite with low < high")
        for k in ("horizon", "pde_dt"):
            if not (_is_number(o[k]) and o[k] > 0):
                out.append(where.format(k) + f" must be positive, got {o[k]!r}")
        if not out and abs(round(o["horizon"] / o["pde_dt"]) * o["pde_dt"] - o["horizon"]) > 1e-9 * o["horizon"]:
            out.append(where.format("horizon") + " must be a multiple of pde_dt")
        elif not out and round(o["horizon"] / o["pde_dt"]) % 4:
            out.append(where.format("pde_dt") + " must give a step count divisible by 4")
    if experiment == "reproduce-fig1":
        for k in ("dt", "tol", "covariance_tol"):
            if not (_is_number(o[k]) and o[k] > 0):
                out.append(where.format(k) + f" must be positive, got {o[k]!r}")
        if not _is_int(o["max_steps"]) or o["max_steps"] < 0:
            out.append(where.format("max_steps") + f" must be a non-negative integer, got {o['max_steps']!r}")
    return out


# -- artefacts -----------------------------------------------------------------------


def _plain(value):
    """Convert numpy scalars and arrays to JSON values, non-finite floats to ``null``."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def dumps(value) -> str:
    return json.dumps(_plain(value), sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


class ArtefactWriter:
    """Writes artefacts into one directory and records their hashes."""

    def __init__(self, directory: str, formats):
        self.directory = directory
        self.formats = tuple(formats)
        self.artefacts: dict[str, str] = {}
        try:
            os.makedirs(directory, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create output directory {directory}: {exc}") from exc

    def wants(self, fmt: str) -> bool:
        return fmt in self.formats

    def write(self, name: str, text: str) -> str:
        path = os.path.join(self.directory, name)
        atomic_write(path, text)
        self.artefacts[name] = hashlib.sha256(text.encode()).hexdigest()
        return path

    def manifest(self, config: ExperimentConfig, choices: dict) -> str:
        body = {
            "status": "ok",
            "experiment": config.experiment,
            "seed": config.seed,
            "code_version": __version__,
            "config": config.to_dict(),
            "config_sha256": config.sha256,
            "choices": choices,
            "artefacts": [{"name": n, "sha256": h} for n, h in sorted(self.artefacts.items())],
        }
        atomic_write(os.path.join(self.directory, "manifest.json"), dumps(body))
        return body["config_sha256"]


def _csv_text(write) -> str:
    buf = io.StringIO(newline="")
    write(buf)
    return buf.getvalue()


def snapshot_csv(X, step: int = 0, t: float = 0.0) -> str:
    """One ensemble in the ``step,t,particle,x0,...`` trajectory format."""
    X = np.asarray(X, dtype=float)
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "t", "particle"] + [f"x{a}" for a in range(X.shape[1])])
    for i, row in enumerate(X):
        writer.writerow([int(step), format(float(t), ".17g"), i] + [format(v, ".17g") for v in row])
    return buf.getvalue()


def scatter_svg_from_csv(text: str, title: str = "", step: int | None = None) -> str:
    """Scatter plot of one step of a trajectory CSV on the fixed window ``[-4, 4]^2``.

    Only the CSV text enters the plot, so replotting a written CSV gives the
    same SVG. ``step`` defaults to the last step in the file; one-dimensional
    ensembles are drawn on the horizontal axis.
    """
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("trajectory CSV has no rows")
    steps = [int(r["step"]) for r in rows]
    chosen = max(steps) if step is None else int(step)
    pts = [(float(r["x0"]), float(r.get("x1", 0.0) or 0.0)) for r, s in zip(rows, steps) if s == chosen]
    span = SVG_SIZE - 2 * SVG_MARGIN
    sx = lambda x: SVG_MARGIN + (x + SVG_LIMIT) / (2 * SVG_LIMIT) * span
    sy = lambda y: SVG_SIZE - SVG_MARGIN - (y + SVG_LIMIT) / (2 * SVG_LIMIT) * span
    lo, hi, mid = SVG_MARGIN, SVG_SIZE - SVG_MARGIN, SVG_SIZE / 2
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
        f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
        f"<title>{escape(title)}</title>",
        f'<rect x="{lo}" y="{lo}" width="{span}" height="{span}" fill="white" stroke="black"/>',
        f'<line x1="{lo}" y1="{mid:g}" x2="{hi}" y2="{mid:g}" stroke="#bbbbbb"/>',
        f'<line x1="{mid:g}" y1="{lo}" x2="{mid:g}" y2="{hi}" stroke="#bbbbbb"/>',
    ]
    for v in range(-4, 5, 2):
        out.append(f'<text x="{sx(v):.2f}" y="{SVG_SIZE - 4}" font-size="9" text-anchor="middle">{v}</text>')
        out.append(f'<text x="2" y="{sy(v) + 3:.2f}" font-size="9">{v}</text>')
    if title:
        out.append(f'<text x="{mid:g}" y="14" font-size="12" text-anchor="middle">{escape(title)}</text>')
    out.append('<g fill="#1f77b4">')
    for x, y in pts:
        out.append(f'<circle cx="{sx(x):.3f}" cy="{sy(y):.3f}" r="2.5"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- experiments -----------------------------------------------------------------------


def default_cylinder_function(dim: int) -> CylinderFunction:
    """Quadratic cylinder function used by the generator check."""
    return CylinderFunction(
        "quadratic",
        (InnerFunction("bump", (0.3,) * dim, 1.2), InnerFunction("linear", (1.0,) + (0.5,) * (dim - 1))),
    )


def _run_dynamics(config: ExperimentConfig, w: ArtefactWriter) -> dict:
    k, tgt, flags = config.kernel, config.target, config.diagnostics
    initial = config.ensemble.build(tgt.dim, config.seed)
    traj = run_trajectory(config.dynamics, k, tgt, initial, config.tilt)
    positions_csv = _csv_text(traj.write_csv)
    if w.wants("csv"):
        w.write("trajectory.csv", positions_csv)
        if flags.ksd:
            w.write("diagnostics.csv", _csv_text(lambda s: write_diagnostics_csv(k, tgt, traj, s)))
    if w.wants("svg"):
        w.write("scatter.svg", scatter_svg_from_csv(positions_csv, f"{config.experiment} t={traj.times[-1]:g}"))
    final = traj.ensemble(traj.steps)
    estimator = flags.estimator_for(k)
    summary = {
        "experiment": config.experiment,
        "mode": config.dynamics.mode,
        "steps": traj.steps,
        "horizon": traj.steps * traj.dt,
        "final": summarize_ensemble(k, tgt, final),
        "max_drift_norm": float(np.max(np.linalg.norm(svgd_drift(k, tgt, final), axis=1))),
    }
    if flags.ksd or config.experiment == "ksd":
        ksd = {"estimator": estimator, "value": ksd_squared(k, tgt, final, estimator)}
        if k.cross_defined_on_diagonal:
            ksd["drift_rkhs_norm_squared"] = drift_rkhs_norm_squared(k, tgt, final)
        summary["ksd"] = ksd
    if flags.rate or config.experiment == "rate":
        summary["rate_functional"] = rate_functional(k, tgt, traj)
        if config.tilt is not None and traj.steps > 0:
            series = tilt_cotangent_series(k, traj, config.tilt)
            summary["tilt_cotangent_quadrature"] = float(traj.dt * np.sum(series))
    if flags.hamiltonian:
        summary["hamiltonian"] = [
            {"step": int(s), "t": float(traj.times[s]), "value": hamiltonian(k, tgt, traj.ensemble(int(s)), config.tilt, traj.times[s])}
            for s in traj.recorded_steps
        ]
    if flags.generator_check:
        F = default_cylinder_function(tgt.dim)
        exact = generator_apply(k, tgt, F, final)
        oracle = generator_fd_oracle(k, tgt, F, final.positions)
        summary["generator_check"] = {"generator": exact, "finite_difference": oracle, "abs_error": abs(exact - oracle)}
    if config.experiment == "run-sde" and traj.steps > 0:
        burn = int(config.options["burn_in"] * traj.steps)
        _, moments = ergodic_average(traj, burn)
        summary["ergodic"] = {"burn_in_steps": burn, "mean": moments.mean, "cov": moments.cov, "count": moments.count}
    if w.wants("json"):
        name = "ksd.json" if config.experiment == "ksd" else "rate.json" if config.experiment == "rate" else "summary.json"
        w.write(name, dumps(summary))
    return {"ksd_estimator": estimator, "initial_ensemble": config.ensemble.init}


def _run_compare(config: ExperimentConfig, w: ArtefactWriter) -> dict:
    ka, kb = config.kernels
    report = ksd_sweep(ka, kb, config.target, count=config.options["count"], seed=config.seed)
    if w.wants("json"):
        w.write("comparison.json", report.to_json() + "\n")
    if w.wants("csv"):
        w.write("comparison.csv", _csv_text(report.write_csv))
    if config.options["fixed_points"]:
        initial = config.ensemble.build(config.target.dim, config.seed)
        rows = fixed_point_comparison(config.kernels, config.target, initial.n, initial=initial)
        if w.wants("json"):
            w.write("fixed_points.json", dumps([r.to_dict() for r in rows]))
    return {"estimator": report.estimator, "measures": "seeded random Gaussian mixtures"}


def continuum_identities(kernel: Kernel, target: Target, grid_points: int = 513, low: float = -8.0,
                         high: float = 8.0, horizon: float = 2.0, pde_dt: float = 0.005) -> dict:
    """Evaluate the continuum identities on a one-dimensional grid.

    Returns a mapping from identity name to ``lhs``, ``rhs``, ``error``,
    ``tolerance`` and ``pass``, plus the path diagnostics used on the way
    under ``_paths``.
    """
    grid = lambda m, s: DensityGrid.gaussian(m, s, low, high, grid_points)
    out = {}

    def record(name, lhs, rhs, err, tol):
        out[name] = {"lhs": lhs, "rhs": rhs, "error": err, "tolerance": tol, "pass": bool(err <= tol)}

    sf = stein_fisher_continuum(kernel, target, grid(0.5, 1.0))
    record("stein_fisher_forms", sf.ratio_form, sf.score_form, sf.relative_gap, 1e-6)

    g0 = grid(0.2, 1.1)
    x = g0.nodes
    phi = np.sin(x) * np.exp(-(x**2) / 8) + 0.3 * x
    tangent = tangent_norm_continuum(kernel, g0, onsager_apply(kernel, g0, phi))
    cot = continuum_cotangent(kernel, g0, phi)
    record("duality_isometry", tangent, cot, abs(tangent - cot) / abs(cot), 1e-4)

    path = GaussianPath((1.0, -0.8, 0.2), (1.3, -0.2), horizon, target, low, high, grid_points)
    forward = path_diagnostics(kernel, target, path)
    record("rate_decomposition", forward.rate, forward.decomposition,
           abs(forward.rate - forward.decomposition) / abs(forward.rate), 1e-3)

    backward = path_diagnostics(kernel, target, path.reversed())
    lhs = forward.rate - backward.rate
    record("time_reversal", lhs, forward.delta_kl, abs(lhs - forward.delta_kl) / max(1.0, abs(forward.delta_kl)), 1e-3)

    solution = solve_stein_pde(kernel, target, grid(1.5, 0.8), horizon, pde_dt)
    pde = path_diagnostics(kernel, target, solution, timesteps=4)
    record("ede_residual", pde.ede_residual, 0.0, abs(pde.ede_residual), 5e-3)
    out["_paths"] = {"gaussian_path": forward, "stein_pde": pde}
    return out


def _run_continuum(config: ExperimentConfig, w: ArtefactWriter) -> dict:
    res = continuum_identities(config.kernel, config.target, **config.options)
    paths = res.pop("_paths")
    if w.wants("json"):
        w.write("identities.json", dumps(res))
    if w.wants("csv"):
        w.write("gaussian_path.csv", _csv_text(paths["gaussian_path"].write_csv))
        w.write("stein_pde.csv", _csv_text(paths["stein_pde"].write_csv))
    return {
        "gaussian_path": "mean 1 - 0.8 t + 0.2 t^2, std 1.3 - 0.2 t",
        "stein_pde_initial": "N(1.5, 0.8^2)",
        "time_quadrature": "Simpson, 201 nodes per segment; Stein PDE snapshots every 4 steps",
    }


def _kernel_label(k: Kernel) -> str:
    if k.family in ("gaussian", "exp-power"):
        return f"p{k.p:g}_sigma{k.sigma:g}"
    return f"{k.family}_sigma{k.sigma:g}"


def _run_fig1(config: ExperimentConfig, w: ArtefactWriter) -> dict:
    o = config.options
    initial = config.ensemble.build(config.target.dim, config.seed)
    rows = fixed_point_comparison(
        config.kernels, config.target, initial.n, dt=o["dt"], max_steps=o["max_steps"], tol=o["tol"], initial=initial
    )
    labels, summary = [], []
    for row in rows:
        label = _kernel_label(row.kernel)
        if label in labels:
            label = f"{label}_{len(labels)}"
        labels.append(label)
        text = snapshot_csv(row.ensemble.positions, row.steps, row.ensemble.time)
        if w.wants("csv"):
            w.write(f"fig1_{label}.csv", text)
        title = f"{row.kernel.family} p={row.kernel.p:g} sigma={row.kernel.sigma:g} N={initial.n}"
        w.write(f"fig1_{label}.svg", scatter_svg_from_csv(text, title))
        entry = dict(row.to_dict(), label=label)
        entry["drift_converged"] = bool(row.drift_norm < o["tol"])
        entry["covariance_within_tolerance"] = bool(row.covariance_error <= o["covariance_tol"])
        summary.append(entry)
    w.write("fig1_summary.json", dumps({"n": initial.n, "dim": config.target.dim, "kernels": summary}))
    return {
        "n": initial.n,
        "initial_ensemble": f"{config.ensemble.init} on [{config.ensemble.low:g}, {config.ensemble.high:g}]^d",
        "integrator": f"RK4 with dt={o['dt']:g} for at most {o['max_steps']} steps, then Levenberg-Marquardt on b(X)=0",
        "drift_metric": "max_i |b(x_i)|",
        "drift_tolerance": o["tol"],
        "covariance_error": "max |C - Sigma| / max diag(Sigma)",
        "svg_window": [-SVG_LIMIT, SVG_LIMIT],
    }


RUNNERS = {
    "run-ode": _run_dynamics,
    "run-sde": _run_dynamics,
    "run-tilted": _run_dynamics,
    "ksd": _run_dynamics,
    "rate": _run_dynamics,
    "compare": _run_compare,
    "continuum-identities": _run_continuum,
    "reproduce-fig1": _run_fig1,
}


@contextmanager
def thread_limit():
    """Cap BLAS threads at ``STEINLAB_THREADS`` when the variable is set."""
    value = os.environ.get("STEINLAB_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigInvalid([f"STEINLAB_THREADS must be a positive integer, got {value!r}"]) from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run(config: ExperimentConfig) -> str:
    """Run ``config`` and write its artefacts; returns the output directory.

    Raises
    ------
    NoConvergence, NonFinite, IoError
        Propagated from the experiment.
    """
    w = ArtefactWriter(config.output.directory, config.output.formats)
    with thread_limit():
        choices = RUNNERS[config.experiment](config, w)
    choices = dict(choices, seed_source="dynamics.seed")
    w.manifest(config, choices)
    stale = os.path.join(config.output.directory, "error.json")
    if os.path.exists(stale):
        os.unlink(stale)
    return config.output.directory


# -- entry point -----------------------------------------------------------------------


EXIT_CODES = ((ConfigInvalid, EXIT_CONFIG), (NoConvergence, EXIT_NO_CONVERGENCE), (NonFinite, EXIT_NON_FINITE), (IoError, EXIT_IO))


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steinlab", description="Stein variational gradient descent experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS + ("validate",):
        helptext = "check a config without running it" if name == "validate" else f"run the {name} experiment"
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config file (a manifest.json is accepted too)")
        p.add_argument("--out", help="output directory, overriding output.directory")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed, overriding dynamics.seed")
    return parser


def load_raw_config(path: str | None, command: str, out: str | None, seed: int | None) -> dict:
    """Read the config file and apply the command-line overrides."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid([f"config {path} is not valid JSON: {exc}"]) from exc
        if isinstance(raw, dict) and "config_sha256" in raw and "config" in raw:
            raw = raw["config"]
        if not isinstance(raw, dict):
            raise ConfigInvalid(["config must be a JSON object"])
    raw = json.loads(json.dumps(raw))
    if command != "validate":
        if raw.get("experiment", command) != command:
            raise ConfigInvalid([f"experiment: config describes {raw['experiment']!r} but the command is {command!r}"])
        raw["experiment"] = command
    if out is not None:
        raw["output"] = dict(raw.get("output") or {}, directory=out)
    if seed is not None:
        raw["dynamics"] = dict(raw.get("dynamics") or {}, seed=seed)
    return raw


def _report_error(exc: BaseException, code: int, directory: str | None) -> None:
    body = {"status": "error", "error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    if isinstance(exc, ConfigInvalid):
        body["diagnostics"] = exc.diagnostics
    text = dumps(body)
    sys.stderr.write(text)
    if directory and not isinstance(exc, IoError):
        try:
            os.makedirs(directory, exist_ok=True)
            atomic_write(os.path.join(directory, "error.json"), text)
        except (OSError, IoError):
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    directory = args.out
    try:
        raw = load_raw_config(args.config, args.command, args.out, args.seed)
        if args.command == "validate":
            problems = validate(raw)
            sys.stdout.write(dumps({"valid": not problems, "diagnostics": problems}))
            return EXIT_OK if not problems else EXIT_CONFIG
        directory = (raw.get("output") or {}).get("directory", "out") if isinstance(raw.get("output"), (dict, type(None))) else None
        config = ExperimentConfig.from_dict(raw)
        directory = config.output.directory
        run(config)
    except Exception as exc:
        code = exit_code_for(exc)
        _report_error(exc, code, directory if isinstance(directory, str) else None)
        return code
    sys.stdout.write(json.dumps({"status": "ok", "output": directory}) + "\n")
    return EXIT_OK
