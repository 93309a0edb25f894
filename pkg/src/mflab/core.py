"""Activations, losses, learning-rate schedules, data models and seeding.

Every primitive here is pure. Bounds such as ``bound_K`` are metadata used by
the conformance reports; they are never enforced at construction so that
non-conforming negative controls can still be run.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtri
from scipy.stats import qmc

from .errors import ConfigurationError, DomainError

ACTIVATION_KINDS = ("tanh", "logistic", "identity")
LOSS_KINDS = ("huber", "logistic", "half-squared")
SCHEDULE_KINDS = ("constant", "exponential-decay", "piecewise-linear")


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator for an int seed or a SeedSequence."""
    return np.random.Generator(np.random.Philox(as_seed_sequence(seed)))


def split_seed(seed, n: int) -> list[np.random.SeedSequence]:
    """Independent child streams. Pure: the same seed always yields the same children."""
    ss = as_seed_sequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key).spawn(n)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DomainError(f"non-finite input: {v!r}")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "tanh"
    bound_K: float = 1.0
    role: str = "hidden"

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ConfigurationError(f"unknown activation kind {self.kind!r}")
        if self.role not in ("hidden", "output"):
            raise ConfigurationError(f"unknown activation role {self.role!r}")
        if not self.bound_K > 0:
            raise ConfigurationError("bound_K must be positive")

    def value(self, h):
        if self.kind == "tanh":
            return np.tanh(h)
        if self.kind == "logistic":
            return expit(h)
        return np.asarray(h, dtype=float) * 1.0

    def derivative(self, h):
        if self.kind == "tanh":
            t = np.tanh(h)
            return 1.0 - t * t
        if self.kind == "logistic":
            s = expit(h)
            return s * (1.0 - s)
        return np.ones_like(np.asarray(h, dtype=float))

    def second_derivative(self, h):
        if self.kind == "tanh":
            t = np.tanh(h)
            return -2.0 * t * (1.0 - t * t)
        if self.kind == "logistic":
            s = expit(h)
            return s * (1.0 - s) * (1.0 - 2.0 * s)
        return np.zeros_like(np.asarray(h, dtype=float))


TANH = ActivationSpec("tanh")
IDENTITY_OUT = ActivationSpec("identity", role="output")


def default_activations(L: int) -> tuple[ActivationSpec, ...]:
    """tanh on hidden layers, identity on the output."""
    return (TANH,) * (L - 1) + (IDENTITY_OUT,)


def eval_activation(spec: ActivationSpec, h: float) -> tuple[float, float]:
    _check_finite(h)
    return float(spec.value(h)), float(spec.derivative(h))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """Loss ``L(y, yhat)`` with its derivative in the second argument.

    ``huber`` uses threshold ``delta``; ``logistic`` is ``log(1 + exp(-y yhat))``;
    ``half-squared`` is ``(y - yhat)^2 / 2`` and is flagged non-conforming since
    its derivative is unbounded.
    """

    kind: str = "huber"
    delta: float = 1.0
    d2_bound: float | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ConfigurationError("huber delta must be positive")
        if self.d2_bound is None:
            bound = {"huber": max(self.delta, 1.0), "logistic": 1.0, "half-squared": math.inf}
            object.__setattr__(self, "d2_bound", bound[self.kind])

    @property
    def conforming(self) -> bool:
        return self.kind != "half-squared"

    def value(self, y, yhat):
        r = np.asarray(yhat, dtype=float) - y
        if self.kind == "huber":
            a = np.abs(r)
            return np.where(a <= self.delta, 0.5 * r * r, self.delta * (a - 0.5 * self.delta))
        if self.kind == "logistic":
            return np.logaddexp(0.0, -np.asarray(y, dtype=float) * yhat)
        return 0.5 * r * r

    def d2(self, y, yhat):
        r = np.asarray(yhat, dtype=float) - y
        if self.kind == "huber":
            return np.clip(r, -self.delta, self.delta)
        if self.kind == "logistic":
            y = np.asarray(y, dtype=float)
            return -y * expit(-y * yhat)
        return r


def eval_loss(spec: LossSpec, y: float, yhat: float) -> tuple[float, float]:
    _check_finite(y, yhat)
    return float(spec.value(y, yhat)), float(spec.d2(y, yhat))


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """One per-layer learning-rate schedule ``xi(t)``.

    ``knots`` for the piecewise-linear form is a sequence of ``(t, value)``
    pairs with increasing ``t``; the value is held constant outside the knots.
    """

    kind: str = "constant"
    c: float = 1.0
    rate: float = 0.0
    knots: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "piecewise-linear":
            if not self.knots:
                raise ConfigurationError("piecewise-linear schedule needs knots")
            ts = [k[0] for k in self.knots]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ConfigurationError("schedule knots must have increasing times")
            if any(k[1] < 0 for k in self.knots):
                raise ConfigurationError("schedule values must be nonnegative")
            object.__setattr__(self, "knots", tuple((float(a), float(b)) for a, b in self.knots))
        elif self.c < 0 or self.rate < 0:
            raise ConfigurationError("schedule amplitude and rate must be nonnegative")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return float(self.c)
        if self.kind == "exponential-decay":
            return float(self.c * math.exp(-self.rate * t))
        ts, vs = zip(*self.knots)
        return float(np.interp(t, ts, vs))

    def is_identically(self, value: float) -> bool:
        if self.kind == "constant":
            return self.c == value
        if self.kind == "exponential-decay":
            return self.c == value and (self.rate == 0 or value == 0)
        return all(v == value for _, v in self.knots)


@dataclass(frozen=True)
class ScheduleSpec:
    """Per-layer schedules ``xi_1 .. xi_L`` (index 0 holds layer 1)."""

    layers: tuple[Schedule, ...]

    @classmethod
    def constant(cls, L: int, c: float = 1.0) -> "ScheduleSpec":
        return cls((Schedule("constant", c),) * L)

    @property
    def L(self) -> int:
        return len(self.layers)

    def __call__(self, i: int, t: float) -> float:
        return self.layers[i - 1](t)


def eval_schedule(spec: ScheduleSpec, i: int, t: float) -> float:
    _check_finite(t)
    if t < 0:
        raise DomainError(f"schedule evaluated at negative time {t}")
    if not 1 <= i <= spec.L:
        raise DomainError(f"layer index {i} outside 1..{spec.L}")
    return spec(i, t)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class Panel:
    """A fixed set of samples over which expectations in the data are exact averages."""

    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


TARGETS = ("tanh-linear", "linear")
INPUT_LAWS = ("uniform-cube", "gaussian-clipped")


@dataclass(frozen=True, eq=False)
class DataModel:
    """Training distribution: a finite dataset or a synthetic teacher.

    For a teacher, ``coef`` parametrises the target (``tanh(<coef, x>)`` or
    ``<coef, x>``), inputs follow ``input_law`` scaled by ``input_scale`` and
    labels get optional gaussian noise. Expectations over a teacher use a
    fixed scrambled-Sobol panel of ``panel_size`` points drawn from
    ``panel_seed``.
    """

    source: str
    X: np.ndarray | None = None
    y: np.ndarray | None = None
    target: str = "tanh-linear"
    coef: tuple[float, ...] = ()
    input_law: str = "uniform-cube"
    input_scale: float = 1.0
    noise: float = 0.0
    panel_size: int = 4096
    panel_seed: int = 0

    def __post_init__(self):
        if self.source == "finite-dataset":
            X = np.atleast_2d(np.asarray(self.X, dtype=float))
            y = np.asarray(self.y, dtype=float).reshape(-1)
            if X.shape[0] != y.shape[0]:
                raise ConfigurationError("dataset X and y lengths differ")
            if y.shape[0] == 0:
                raise ConfigurationError("finite dataset is empty")
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
                raise ConfigurationError("dataset contains non-finite values")
            X.setflags(write=False)
            y.setflags(write=False)
            object.__setattr__(self, "X", X)
            object.__setattr__(self, "y", y)
        elif self.source == "synthetic-teacher":
            if self.target not in TARGETS:
                raise ConfigurationError(f"unknown teacher target {self.target!r}")
            if self.input_law not in INPUT_LAWS:
                raise ConfigurationError(f"unknown input law {self.input_law!r}")
            if len(self.coef) == 0:
                raise ConfigurationError("teacher needs a coefficient vector")
            if self.panel_size < 1:
                raise ConfigurationError("panel_size must be positive")
            if self.noise < 0:
                raise ConfigurationError("noise must be nonnegative")
            object.__setattr__(self, "coef", tuple(float(c) for c in self.coef))
        else:
            raise ConfigurationError(f"unknown data source {self.source!r}")

    @classmethod
    def finite(cls, X, y) -> "DataModel":
        return cls("finite-dataset", X=X, y=y)

    @classmethod
    def teacher(cls, coef, **kwargs) -> "DataModel":
        return cls("synthetic-teacher", coef=tuple(coef), **kwargs)

    @property
    def input_dim(self) -> int:
        if self.source == "finite-dataset":
            return self.X.shape[1]
        return len(self.coef)

    @property
    def input_bound(self) -> float:
        """Bound on the Euclidean norm of every input."""
        if self.source == "finite-dataset":
            return float(np.max(np.linalg.norm(self.X, axis=1))) if len(self.y) else 0.0
        if self.input_law == "uniform-cube":
            return self.input_scale * math.sqrt(self.input_dim)
        return self.input_scale

    def target_fn(self, X):
        z = np.asarray(X, dtype=float) @ np.asarray(self.coef)
        return np.tanh(z) if self.target == "tanh-linear" else z

    def _inputs_from_uniform(self, u):
        if self.input_law == "uniform-cube":
            return self.input_scale * (2.0 * u - 1.0)
        # gaussian with unit per-coordinate variance, radially clipped to input_scale
        g = ndtri(np.clip(u, 1e-16, 1 - 1e-16))
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        return g * np.minimum(1.0, self.input_scale / np.maximum(norm, 1e-300))

    def panel(self) -> Panel:
        if self.source == "finite-dataset":
            if len(self.y) == 0:
                raise ConfigurationError("empty dataset")
            return Panel(self.X, self.y)
        sobol = qmc.Sobol(self.input_dim, scramble=True, seed=make_rng(self.panel_seed))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # non power-of-two sizes
            u = sobol.random(self.panel_size)
        X = self._inputs_from_uniform(u)
        y = self.target_fn(X)
        if self.noise > 0:
            y = y + self.noise * make_rng([self.panel_seed, 1]).standard_normal(len(y))
        X.setflags(write=False)
        y.setflags(write=False)
        return Panel(X, y)

    def as_finite(self) -> "DataModel":
        """The panel viewed as a finite dataset (identity for finite data)."""
        if self.source == "finite-dataset":
            return self
        p = self.panel()
        return DataModel.finite(p.X, p.y)


def draw_sample(model: DataModel, rng: np.random.Generator) -> Sample:
    """Draw one sample; finite datasets are sampled uniformly with replacement."""
    if model.source == "finite-dataset":
        n = len(model.y)
        if n == 0:
            raise ConfigurationError("cannot draw from an empty dataset")
        j = int(rng.integers(n))
        return Sample(np.array(model.X[j]), float(model.y[j]))
    x = model._inputs_from_uniform(rng.random(model.input_dim))
    y = float(model.target_fn(x))
    if model.noise > 0:
        y += model.noise * float(rng.standard_normal())
    return Sample(x, y)


# ---------------------------------------------------------------------------
# conformance reports
# ---------------------------------------------------------------------------

def _grid(lo=-50.0, hi=50.0, step=1e-3):
    return np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)


def activation_conformance(spec: ActivationSpec, grid: Sequence[float] | None = None) -> dict:
    """Grid check of the regularity bounds for one activation.

    Hidden activations need bounded value and derivative, and a Lipschitz
    derivative; output activations need a derivative that never vanishes.
    """
    h = _grid() if grid is None else np.asarray(grid, dtype=float)
    v, dv = spec.value(h), spec.derivative(h)
    K = spec.bound_K
    slope = np.abs(np.diff(dv)) / np.diff(h)
    report = {
        "value_bounded": bool(np.all(np.abs(v) <= K)),
        "derivative_bounded": bool(np.all(np.abs(dv) <= K)),
        "derivative_lipschitz": bool(np.all(slope <= K)),
        "derivative_nonzero": bool(np.all(dv != 0)),
    }
    if spec.role == "hidden":
        keys = ("value_bounded", "derivative_bounded", "derivative_lipschitz")
    else:
        keys = ("derivative_bounded", "derivative_lipschitz", "derivative_nonzero")
    report["conforming"] = all(report[k] for k in keys)
    return report


def loss_conformance(spec: LossSpec, ys=None, yhats=None) -> dict:
    """Grid check of nonnegativity and of the bound and Lipschitz constant of the derivative.

    The default label grid is ``{-1, 1}`` for the logistic loss (its labels
    are signs) and ``[-5, 5]`` otherwise.
    """
    if ys is None:
        ys = np.array([-1.0, 1.0]) if spec.kind == "logistic" else np.linspace(-5, 5, 41)
    ys = np.asarray(ys, dtype=float)
    yhats = np.linspace(-20, 20, 4001) if yhats is None else np.asarray(yhats, dtype=float)
    Y, Yh = np.meshgrid(ys, yhats, indexing="ij")
    v, d = spec.value(Y, Yh), spec.d2(Y, Yh)
    slope = np.abs(np.diff(d, axis=1)) / np.diff(yhats)
    report = {
        "nonnegative": bool(np.all(v >= 0)),
        "d2_bounded": bool(np.all(np.abs(d) <= spec.d2_bound)),
        "d2_lipschitz": bool(np.all(slope <= spec.d2_bound * (1 + 1e-12))),
    }
    report["conforming"] = spec.conforming and all(report.values())
    return report


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tree_sum(values, axis: int = 0) -> np.ndarray:
    """Pairwise sum along ``axis`` in a fixed order, independent of BLAS threading."""
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    if v.shape[0] == 0:
        return np.zeros(v.shape[1:])
    while v.shape[0] > 1:
        half = v.shape[0] // 2
        paired = v[0:2 * half:2] + v[1:2 * half:2]
        v = np.concatenate([paired, v[2 * half:]]) if v.shape[0] % 2 else paired
    return v[0]
