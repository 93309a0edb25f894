"""Measurable quantities: loss, convergence-mode metrics, coupling distance,
gradient checks and the reverse/forward round trip of the pair flows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataModel, LossSpec, Sample, ScheduleSpec, tree_sum
from .errors import ConfigurationError, HorizonError, StructuralError
from .finite import FiniteTrajectory, FiniteWeights, NetworkArch, backward_finite, predict_finite
from .mf import AuxPairState, MfTrajectory, ParticleSystem, _panel, aux_flow, mf_drift, mf_pass


@dataclass
class MetricsRecord:
    t: float
    pop_loss: float
    esssup_dwL: float
    weighted_l1: tuple[float, ...]
    coupling_dist: float | None = None


def population_loss(state, data, loss: LossSpec, arch: NetworkArch | None = None) -> float:
    """Average loss over the data panel.

    ``state`` is a :class:`ParticleSystem`, or :class:`FiniteWeights` together
    with its ``arch``.
    """
    panel = _panel(data)
    if isinstance(state, ParticleSystem):
        yhat = mf_pass(state, state.layers, panel, loss)[0]
    else:
        if arch is None:
            raise ConfigurationError("finite weights need their architecture")
        yhat = predict_finite(arch, state, panel.X)
    return float(tree_sum(loss.value(panel.y, yhat)) / len(panel))


def _layer_masses(ps):
    if ps.masses is not None:
        return list(ps.masses) + [np.ones(1)]
    return [np.full(M, 1.0 / M) for M in ps.widths]


def weighted_l1(state: ParticleSystem, reference: ParticleSystem) -> tuple[float, ...]:
    """Per layer ``E|w_i - wbar_i| prod_{j>i} |wbar_j|`` over the particle measure.

    Layer 1 uses the Euclidean norm of ``w_1 - wbar_1``.
    """
    if [w.shape for w in state.layers] != [w.shape for w in reference.layers]:
        raise StructuralError("state and reference shapes differ")
    p = _layer_masses(reference)
    B = [np.abs(w) for w in reference.layers]
    out = []
    for i in range(1, state.L + 1):
        diff = state.layers[i - 1] - reference.layers[i - 1]
        if i == 1:
            r = np.linalg.norm(diff, axis=1)
        else:
            r = p[i - 2] @ np.abs(diff)
        for j in range(i + 1, state.L + 1):
            r = (p[j - 2] * r) @ B[j - 1]
        out.append(float(r[0]))
    return tuple(out)


def esssup_dwL(ps: ParticleSystem, data, loss: LossSpec, schedules: ScheduleSpec) -> float:
    """Largest ``|d w_L / dt|`` over the particles of layer ``L-1`` that carry mass."""
    drift = mf_drift(ps, data, loss, schedules)[-1][:, 0]
    if ps.masses is not None:
        drift = drift[ps.masses[-1] > 0]
    return float(np.max(np.abs(drift)))


def convergence_metrics(traj: MfTrajectory, data, loss: LossSpec, schedules: ScheduleSpec,
                        reference: ParticleSystem | None = None) -> list[MetricsRecord]:
    """Metrics at every checkpoint; ``reference`` defaults to the final checkpoint."""
    ref = traj.final if reference is None else reference
    panel = _panel(data)
    return [MetricsRecord(t, population_loss(ps, panel, loss), esssup_dwL(ps, panel, loss, schedules),
                          weighted_l1(ps, ref))
            for t, ps in zip(traj.times, traj.states)]


def preactivation_gaps(state: ParticleSystem, reference: ParticleSystem, data) -> list[float]:
    """Per layer ``E_Z E_C |H_i(X, C; W) - H_i(X, C; Wbar)|``."""
    panel = _panel(data)
    null = LossSpec("half-squared")
    H = mf_pass(state, state.layers, panel, null)[1]
    Hbar = mf_pass(reference, reference.layers, panel, null)[1]
    p = _layer_masses(reference)
    return [float(np.mean(np.abs(a - b) @ m)) for a, b, m in zip(H, Hbar, p)]


@dataclass
class CouplingSeries:
    times: np.ndarray
    distance: np.ndarray
    running_max: np.ndarray


def _restrict(layers, index):
    if index is None:
        return layers
    out = [layers[0][index[0]]]
    for i in range(1, len(layers)):
        out.append(layers[i][np.ix_(index[i - 1], index[i])])
    return out


def coupling_distance(finite: FiniteTrajectory, mf: MfTrajectory, eps: float | None = None,
                      index: list[np.ndarray] | None = None, tol: float = 1e-9) -> CouplingSeries:
    """Per aligned time ``k eps``, the max over layers of the mean absolute weight difference.

    ``index`` picks the finite network's neurons out of a larger reference
    (see :func:`mflab.embedding.instantiate_tracked`).
    """
    eps = finite.eps if eps is None else eps
    mf_times = np.asarray(mf.times)
    times, dist = [], []
    for k, snap in zip(finite.steps, finite.snapshots):
        t = k * eps
        j = int(np.argmin(np.abs(mf_times - t)))
        if abs(mf_times[j] - t) > tol * max(1.0, abs(t)):
            raise HorizonError(f"no MF checkpoint at t={t:g} (finite step {k})")
        ref = _restrict(mf.states[j].layers, index)
        if [w.shape for w in ref] != [w.shape for w in snap.layers]:
            raise StructuralError("finite and MF layer shapes differ")
        times.append(t)
        dist.append(max(float(np.mean(np.abs(a - b))) for a, b in zip(snap.layers, ref)))
    dist = np.asarray(dist)
    return CouplingSeries(np.asarray(times), dist, np.maximum.accumulate(dist) if len(dist) else dist)


@dataclass
class GradCheckReport:
    worst: float
    layer: int
    index: tuple[int, ...]
    analytic: float
    numeric: float


def grad_check(arch: NetworkArch, weights: FiniteWeights, sample: Sample, loss: LossSpec,
               h: float = 1e-5, floor: float = 1e-8) -> GradCheckReport:
    """Compare the scaled backward quantities against central differences.

    The analytic side is ``Delta_i^w / (n_{i-1} n_i)`` for ``i >= 2`` and
    ``Delta_1^w / n_1``. The relative error of an entry is
    ``|a - b| / max(|a|, |b|, floor)``; ``0/0`` counts as 0.
    """
    if not h > 0:
        raise ConfigurationError("perturbation h must be positive")
    dW = backward_finite(arch, weights, sample, loss).dW
    n = arch.widths
    scale = [n[0]] + [n[i - 1] * n[i] for i in range(1, arch.L)]
    x = np.asarray(sample.x, dtype=float)[None, :]

    def value(w):
        return float(loss.value(sample.y, predict_finite(arch, w, x)[0]))

    best = None
    for li, (d, s) in enumerate(zip(dW, scale)):
        for idx in np.ndindex(*d.shape):
            plus, minus = weights.copy(), weights.copy()
            plus.layers[li][idx] += h
            minus.layers[li][idx] -= h
            num = (value(plus) - value(minus)) / (2 * h)
            ana = d[idx] / s
            den = max(abs(ana), abs(num), floor)
            err = abs(ana - num) / den
            if best is None or err > best.worst:
                best = GradCheckReport(err, li + 1, idx, float(ana), float(num))
    return best


def particle_probes(ps: ParticleSystem, i: int, particles) -> AuxPairState:
    """Probe pairs equal to the actual pairs of the given layer-``i`` particles."""
    particles = np.asarray(particles, dtype=int)
    if i == 1:
        left = ps.layers[0][particles]
    else:
        left = ps.layers[i - 1][:, particles].T
    return AuxPairState(i, left, ps.layers[i][particles])


def random_probes(ps: ParticleSystem, i: int, n: int, rng, scale: float = 1.0) -> AuxPairState:
    """Gaussian probe pairs shaped for layer ``i``."""
    left_dim = ps.d if i == 1 else ps.widths[i - 2]
    return AuxPairState(i, scale * rng.standard_normal((n, left_dim)),
                        scale * rng.standard_normal((n, ps.widths[i])))


def diversity_roundtrip(traj: MfTrajectory, i: int, probes: AuxPairState, schedules: ScheduleSpec,
                        data, loss: LossSpec, T: float | None = None) -> np.ndarray:
    """Sup-norm error of ``forward(reverse(u))`` against ``u`` for every probe."""
    panel = _panel(data)
    back = aux_flow(traj, i, probes, "reverse", schedules, panel, loss, T)
    again = aux_flow(traj, i, back, "forward", schedules, panel, loss, T)
    left = np.atleast_2d(again.left - probes.left)
    right = np.atleast_2d(again.right - probes.right)
    return np.maximum(np.max(np.abs(left), axis=1), np.max(np.abs(right), axis=1))
