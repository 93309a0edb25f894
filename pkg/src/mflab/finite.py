"""The finite-width network under mean-field scaling and its SGD dynamics.

Pre-activations average over the previous layer (``1/n_{i-1}``), backward
quantities average over the next layer (``1/n_i``). The raw updates
``Delta^w`` are therefore ``n_{i-1} n_i`` times the plain gradient of the
loss for layers ``i >= 2`` and ``n_1`` times it for the first layer.

All sums over neurons and samples use :func:`mflab.core.tree_sum`, so the
results are bit-reproducible and do not depend on BLAS.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ActivationSpec,
    DataModel,
    LossSpec,
    Sample,
    ScheduleSpec,
    default_activations,
    draw_sample,
    make_rng,
    tree_sum,
)
from .errors import ConfigurationError, NumericalOverflowError, StructuralError

logger = logging.getLogger(__name__)

# per-chunk element budget for the (batch, n_prev, n_next) intermediates
_CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class NetworkArch:
    """Input dimension ``d``, widths ``n_1..n_L`` (``n_L == 1``) and activations."""

    d: int
    widths: tuple[int, ...]
    activations: tuple[ActivationSpec, ...] | None = None

    def __post_init__(self):
        widths = tuple(int(n) for n in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ConfigurationError("a network needs at least two layers")
        if widths[-1] != 1:
            raise ConfigurationError(f"output width must be 1, got {widths[-1]}")
        if self.d < 1 or min(widths) < 1:
            raise ConfigurationError("dimensions must be positive")
        if self.activations is None:
            object.__setattr__(self, "activations", default_activations(len(widths)))
        elif len(self.activations) != len(widths):
            raise ConfigurationError("need one activation per layer")
        else:
            object.__setattr__(self, "activations", tuple(self.activations))

    @property
    def L(self) -> int:
        return len(self.widths)

    def weight_shapes(self) -> list[tuple[int, int]]:
        n = self.widths
        return [(n[0], self.d)] + [(n[i - 1], n[i]) for i in range(1, self.L)]


@dataclass
class FiniteWeights:
    """Weights ``w_1`` of shape ``(n_1, d)`` and ``w_i`` of shape ``(n_{i-1}, n_i)``.

    ``layers[0]`` is ``w_1``; use :meth:`w` for the 1-based layer index.
    """

    layers: list[np.ndarray]

    def __post_init__(self):
        self.layers = [np.asarray(w, dtype=float) for w in self.layers]

    @classmethod
    def zeros(cls, arch: NetworkArch) -> "FiniteWeights":
        return cls([np.zeros(s) for s in arch.weight_shapes()])

    def w(self, i: int) -> np.ndarray:
        return self.layers[i - 1]

    def copy(self) -> "FiniteWeights":
        return FiniteWeights([w.copy() for w in self.layers])

    @property
    def L(self) -> int:
        return len(self.layers)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.layers)

    def check(self, arch: NetworkArch):
        shapes = [w.shape for w in self.layers]
        if shapes != arch.weight_shapes():
            raise StructuralError(f"weight shapes {shapes} do not match {arch.weight_shapes()}")


@dataclass
class FinitePass:
    """Forward and backward quantities for one sample.

    ``H[i-1]`` and ``dH[i-1]`` have shape ``(n_i,)``; ``dW`` matches the
    weight shapes.
    """

    yhat: float
    H: list[np.ndarray]
    dH: list[np.ndarray]
    dW: list[np.ndarray]


# ---------------------------------------------------------------------------
# batched kernels (leading axis indexes samples)
# ---------------------------------------------------------------------------

def _forward(arch, layers, X):
    acts = arch.activations
    H = [tree_sum(layers[0][None, :, :] * X[:, None, :], axis=2)]
    for i in range(1, arch.L):
        a = acts[i - 1].value(H[-1])
        H.append(tree_sum(a[:, :, None] * layers[i][None, :, :], axis=1) / layers[i].shape[0])
    yhat = acts[-1].value(H[-1][:, 0])
    return yhat, H


def _backward(arch, layers, X, y, loss, yhat, H):
    acts = arch.activations
    L = arch.L
    dH = [None] * L
    dH[L - 1] = (loss.d2(y, yhat) * acts[-1].derivative(H[-1][:, 0]))[:, None]
    for i in range(L - 1, 0, -1):
        w = layers[i]
        back = tree_sum(dH[i][:, None, :] * w[None, :, :], axis=2) / w.shape[1]
        dH[i - 1] = back * acts[i - 1].derivative(H[i - 1])
    return dH


def _per_sample_dW(arch, X, H, dH):
    acts = arch.activations
    dW = [dH[0][:, :, None] * X[:, None, :]]
    for i in range(1, arch.L):
        dW.append(acts[i - 1].value(H[i - 1])[:, :, None] * dH[i][:, None, :])
    return dW


def _as_batch(x):
    X = np.asarray(x, dtype=float)
    return X[None, :] if X.ndim == 1 else X


def _check_input(arch, weights, X):
    weights.check(arch)
    if X.ndim != 2 or X.shape[1] != arch.d:
        raise StructuralError(f"input of shape {X.shape} does not match d={arch.d}")


def _chunk_size(arch):
    biggest = max(a * b for a, b in arch.weight_shapes())
    return max(1, _CHUNK_ELEMENTS // biggest)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def forward_finite(arch: NetworkArch, weights: FiniteWeights, x) -> tuple[float, list[np.ndarray]]:
    """Output and per-layer pre-activations for one input."""
    X = _as_batch(x)
    _check_input(arch, weights, X)
    if X.shape[0] != 1:
        raise StructuralError("forward_finite takes a single input; use predict_finite")
    yhat, H = _forward(arch, weights.layers, X)
    return float(yhat[0]), [h[0] for h in H]


def predict_finite(arch: NetworkArch, weights: FiniteWeights, X) -> np.ndarray:
    """Outputs for a batch of inputs of shape ``(N, d)``."""
    X = _as_batch(X)
    _check_input(arch, weights, X)
    step = _chunk_size(arch)
    return np.concatenate([_forward(arch, weights.layers, X[s:s + step])[0]
                           for s in range(0, len(X), step)] or [np.zeros(0)])


def hidden_features(arch: NetworkArch, weights: FiniteWeights, X, layer: int | None = None) -> np.ndarray:
    """Activations ``phi_i(H_i)`` of hidden layer ``i`` (default ``L-1``), shape ``(N, n_i)``."""
    X = _as_batch(X)
    _check_input(arch, weights, X)
    i = arch.L - 1 if layer is None else int(layer)
    if not 1 <= i <= arch.L - 1:
        raise StructuralError(f"hidden layer must be in 1..{arch.L - 1}, got {i}")
    step = _chunk_size(arch)
    parts = [arch.activations[i - 1].value(_forward(arch, weights.layers, X[s:s + step])[1][i - 1])
             for s in range(0, len(X), step)]
    return np.concatenate(parts) if parts else np.zeros((0, arch.widths[i - 1]))


def backward_finite(arch: NetworkArch, weights: FiniteWeights, sample: Sample,
                    loss: LossSpec) -> FinitePass:
    X = _as_batch(sample.x)
    _check_input(arch, weights, X)
    y = np.array([sample.y], dtype=float)
    yhat, H = _forward(arch, weights.layers, X)
    dH = _backward(arch, weights.layers, X, y, loss, yhat, H)
    dW = _per_sample_dW(arch, X, H, dH)
    return FinitePass(float(yhat[0]), [h[0] for h in H], [d[0] for d in dH], [d[0] for d in dW])


def batch_mean_dW(arch: NetworkArch, weights: FiniteWeights, data: DataModel,
                  loss: LossSpec) -> list[np.ndarray]:
    """``Delta^w`` averaged over every sample of the data panel."""
    panel = data.panel()
    X = _as_batch(panel.X)
    _check_input(arch, weights, X)
    step = _chunk_size(arch)
    partial = []
    for s in range(0, len(X), step):
        Xc, yc = X[s:s + step], panel.y[s:s + step]
        yhat, H = _forward(arch, weights.layers, Xc)
        dH = _backward(arch, weights.layers, Xc, yc, loss, yhat, H)
        partial.append([tree_sum(d, axis=0) for d in _per_sample_dW(arch, Xc, H, dH)])
    n = len(X)
    return [tree_sum(np.stack(parts), axis=0) / n for parts in zip(*partial)]


def _apply_update(weights, dW, schedules, eps, k):
    t = k * eps
    new = [w - eps * schedules(i + 1, t) * d for i, (w, d) in enumerate(zip(weights.layers, dW))]
    out = FiniteWeights(new)
    if not out.is_finite():
        raise NumericalOverflowError(f"non-finite weights after step {k}", step=k)
    return out


def sgd_step(arch: NetworkArch, weights: FiniteWeights, sample: Sample, loss: LossSpec,
             schedules: ScheduleSpec, eps: float, k: int) -> FiniteWeights:
    """One SGD update ``w_i <- w_i - eps xi_i(k eps) Delta_i^w``."""
    if not eps > 0:
        raise ConfigurationError("learning rate eps must be positive")
    return _apply_update(weights, backward_finite(arch, weights, sample, loss).dW, schedules, eps, k)


def full_batch_step(arch: NetworkArch, weights: FiniteWeights, data: DataModel, loss: LossSpec,
                    schedules: ScheduleSpec, eps: float, k: int) -> FiniteWeights:
    """Like :func:`sgd_step` with ``Delta^w`` averaged over the whole data panel."""
    if not eps > 0:
        raise ConfigurationError("learning rate eps must be positive")
    return _apply_update(weights, batch_mean_dW(arch, weights, data, loss), schedules, eps, k)


@dataclass
class FiniteTrajectory:
    """Snapshots of an SGD run at steps ``steps`` (physical time ``k * eps``)."""

    eps: float
    steps: list[int] = field(default_factory=list)
    snapshots: list[FiniteWeights] = field(default_factory=list)

    @property
    def times(self) -> list[float]:
        return [k * self.eps for k in self.steps]

    def record(self, k, weights):
        self.steps.append(k)
        self.snapshots.append(weights.copy())


def train_finite(arch: NetworkArch, init: FiniteWeights, data: DataModel, loss: LossSpec,
                 schedules: ScheduleSpec, eps: float, steps: int, rng=0, log_every: int = 1,
                 mode: str = "sgd", trajectory: FiniteTrajectory | None = None):
    """Run ``steps`` updates from ``init``.

    ``mode="sgd"`` draws one fresh sample per step from ``rng`` (an int seed,
    SeedSequence or Generator); ``mode="full-batch"`` averages over the data
    panel and ignores ``rng``. Snapshots are taken every ``log_every`` steps
    and at the final step. Pass ``trajectory`` to keep the partial log if a
    :class:`NumericalOverflowError` interrupts the run.
    """
    if steps < 0:
        raise ConfigurationError("steps must be nonnegative")
    if log_every < 1:
        raise ConfigurationError("log_every must be at least 1")
    if mode not in ("sgd", "full-batch"):
        raise ConfigurationError(f"unknown training mode {mode!r}")
    init.check(arch)
    gen = rng if isinstance(rng, np.random.Generator) else make_rng(rng)
    traj = FiniteTrajectory(eps) if trajectory is None else trajectory
    w = init.copy()
    traj.record(0, w)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            if mode == "sgd":
                w = sgd_step(arch, w, draw_sample(data, gen), loss, schedules, eps, k)
            else:
                w = full_batch_step(arch, w, data, loss, schedules, eps, k)
            if (k + 1) % log_every == 0 or k + 1 == steps:
                traj.record(k + 1, w)
                logger.debug("step %d / %d", k + 1, steps)
    return w, traj
