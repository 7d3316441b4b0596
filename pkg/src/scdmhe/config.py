"""Benchmark configuration: dataclass, flat key-value file format, factories.

Config files are plain text with one ``section.key = value`` assignment per
line; ``#`` starts a comment.  Vectors and matrices are comma-separated in
row-major order.  CLI flags override file values.  The full schema with
defaults is the field list of :class:`BenchmarkConfig` (see README for the
documented mapping).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .baselines import UkfParams
from .estimator import EstimatorConfig
from .exceptions import ConfigError
from .models import LinearModel, NoiseSpec, QuadrotorKinematics, QuadrotorParams

ESTIMATOR_ORDER = ("ekf", "ukf", "nmhe", "scdmhe")


@dataclass(frozen=True)
class BenchmarkConfig:
    # model
    model_name: str = "quadrotor"
    ts: float = 0.05
    mass: float = 1.5
    gravity: float = 9.81
    drag: float = 0.25
    h_max: float = 30.0
    linear_a: tuple = (1.0, 0.05, 0.0, 1.0)
    linear_b: tuple = (0.0, 0.05)
    linear_c: tuple = (1.0, 0.0)
    control_amplitude: float = 0.5
    control_time_scale: float = 1.0
    # noise (diagonal covariances)
    q_diag: tuple = (1e-3, 5e-2)
    r_diag: tuple = (0.5,)
    # initial conditions
    x0_true: tuple = (10.0, 0.0)
    x0_hat: tuple = (100.0, -20.0)
    p0_diag: tuple = (1.0, 1.0)
    # window estimator
    horizon: int = 12
    max_iterations: int = 15
    tolerance: float = 1e-6
    regularization: float = 0.0
    nmhe_max_inner: int = 30
    nmhe_max_halvings: int = 20
    # unscented transform
    ukf_alpha: float = 1e-3
    ukf_kappa: float = 0.0
    ukf_beta: float = 2.0
    # run protocol
    steps: int = 120
    trials: int = 100
    seed: int = 20250901
    estimators: tuple = ESTIMATOR_ORDER
    workers: int = 1
    timing_enabled: bool = True

    def __post_init__(self):
        if self.steps <= self.horizon:
            raise ConfigError(
                f"run.steps ({self.steps}) must exceed estimator.horizon ({self.horizon})"
            )
        if self.trials < 1:
            raise ConfigError(f"run.trials must be >= 1, got {self.trials}")
        if self.workers < 1:
            raise ConfigError(f"run.workers must be >= 1, got {self.workers}")
        unknown = [e for e in self.estimators if e not in ESTIMATOR_ORDER]
        if unknown:
            raise ConfigError(
                f"unknown estimators {unknown}; valid names: {', '.join(ESTIMATOR_ORDER)}"
            )
        if self.model_name not in ("quadrotor", "linear"):
            raise ConfigError(f"model.name must be quadrotor or linear, got {self.model_name!r}")

    @property
    def enabled(self):
        """Enabled estimators in the canonical (CSV) order."""
        return tuple(e for e in ESTIMATOR_ORDER if e in self.estimators)


# config-file key -> (dataclass field, parser)
def _floats(text):
    return tuple(float(tok) for tok in text.split(",") if tok.strip() != "")


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text):
    return tuple(tok.strip().lower() for tok in text.split(",") if tok.strip())


_KEYMAP = {
    "model.name": ("model_name", str.strip),
    "model.ts": ("ts", float),
    "model.mass": ("mass", float),
    "model.gravity": ("gravity", float),
    "model.drag": ("drag", float),
    "model.h_max": ("h_max", float),
    "model.a": ("linear_a", _floats),
    "model.b": ("linear_b", _floats),
    "model.c": ("linear_c", _floats),
    "control.amplitude": ("control_amplitude", float),
    "control.time_scale": ("control_time_scale", float),
    "noise.q_diag": ("q_diag", _floats),
    "noise.r_diag": ("r_diag", _floats),
    "init.x0_true": ("x0_true", _floats),
    "init.x0_hat": ("x0_hat", _floats),
    "init.p0_diag": ("p0_diag", _floats),
    "estimator.horizon": ("horizon", int),
    "estimator.max_iterations": ("max_iterations", int),
    "estimator.tolerance": ("tolerance", float),
    "estimator.regularization": ("regularization", float),
    "nmhe.max_inner": ("nmhe_max_inner", int),
    "nmhe.max_halvings": ("nmhe_max_halvings", int),
    "ukf.alpha": ("ukf_alpha", float),
    "ukf.kappa": ("ukf_kappa", float),
    "ukf.beta": ("ukf_beta", float),
    "run.steps": ("steps", int),
    "run.trials": ("trials", int),
    "run.seed": ("seed", int),
    "run.estimators": ("estimators", _names),
    "run.workers": ("workers", int),
    "timing.enabled": ("timing_enabled", _bool),
}


def parse_config_text(text):
    """Parse ``section.key = value`` lines into dataclass field overrides."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYMAP:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        name, parser = _KEYMAP[key]
        try:
            overrides[name] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return overrides


def load_config(path=None, **overrides):
    """Build a BenchmarkConfig from an optional file plus keyword overrides."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    valid = {f.name for f in fields(BenchmarkConfig)}
    unknown = set(values) - valid
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        return BenchmarkConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def make_model(cfg: BenchmarkConfig):
    if cfg.model_name == "quadrotor":
        return QuadrotorKinematics(QuadrotorParams(
            ts=cfg.ts, mass=cfg.mass, gravity=cfg.gravity,
            drag=cfg.drag, h_max=cfg.h_max,
        ))
    a = np.asarray(cfg.linear_a, dtype=float)
    n = int(round(len(a) ** 0.5))
    if n * n != len(a):
        raise ConfigError(f"model.a has {len(a)} entries, not a square matrix")
    a = a.reshape(n, n)
    b = np.asarray(cfg.linear_b, dtype=float)
    if b.size % n:
        raise ConfigError(f"model.b has {b.size} entries, not divisible by n={n}")
    b = b.reshape(n, b.size // n)
    c = np.asarray(cfg.linear_c, dtype=float)
    if c.size % n:
        raise ConfigError(f"model.c has {c.size} entries, not divisible by n={n}")
    c = c.reshape(c.size // n, n)
    return LinearModel(a=a, b=b, c=c)


def make_noise(cfg: BenchmarkConfig):
    return NoiseSpec(process=np.diag(cfg.q_diag), measurement=np.diag(cfg.r_diag))


def make_estimator_config(cfg: BenchmarkConfig):
    return EstimatorConfig(
        horizon=cfg.horizon,
        max_iterations=cfg.max_iterations,
        tolerance=cfg.tolerance,
        hessian_regularization=cfg.regularization,
    )


def make_ukf_params(cfg: BenchmarkConfig):
    return UkfParams(alpha=cfg.ukf_alpha, kappa=cfg.ukf_kappa, beta=cfg.ukf_beta)


def with_updates(cfg: BenchmarkConfig, **changes):
    """Functional update preserving validation."""
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
