"""Particle discretization of the mean-field ODEs and the auxiliary pair flows.

Expectations over a layer's latent codes are averages over that layer's
particles. By default every particle has mass ``1/M_i``; a non-uniform
``masses`` vector lets zero-mass tracer particles follow the flow driven by
the others without influencing it (used to read the limit off at the codes
of a smaller finite network).

Expectations over the data are exact averages over the data panel (the
dataset itself, or a fixed quasi-random panel for synthetic teachers), so the
drift is a deterministic function of the state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ActivationSpec, DataModel, LossSpec, Panel, ScheduleSpec, default_activations
from .errors import ConfigurationError, HorizonError, NumericalOverflowError, StructuralError
from .finite import FiniteWeights, NetworkArch, forward_finite

logger = logging.getLogger(__name__)

SCHEMES = ("euler", "rk4")


@dataclass
class ParticleSystem:
    """Values of the MF weights on sampled codes at time ``t``.

    ``layers[0]`` holds ``w_1`` with shape ``(M_1, d)``; ``layers[i-1]`` holds
    ``w_i`` with shape ``(M_{i-1}, M_i)``. ``masses[i-1]`` (layers ``1..L-1``)
    are probability vectors over each layer's particles, or ``None`` for
    uniform weighting.
    """

    layers: list[np.ndarray]
    t: float = 0.0
    activations: tuple[ActivationSpec, ...] | None = None
    masses: list[np.ndarray] | None = None

    def __post_init__(self):
        self.layers = [np.asarray(w, dtype=float) for w in self.layers]
        if self.activations is None:
            self.activations = default_activations(len(self.layers))
        self.check()

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def d(self) -> int:
        return self.layers[0].shape[1]

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0].shape[0],) + tuple(w.shape[1] for w in self.layers[1:])

    def check(self):
        if self.L < 2 or len(self.activations) != self.L:
            raise StructuralError("need at least two layers and one activation per layer")
        if self.layers[0].ndim != 2 or any(w.ndim != 2 for w in self.layers):
            raise StructuralError("every layer must be a matrix")
        for i in range(1, self.L):
            if self.layers[i].shape[0] != self.widths[i - 1]:
                raise StructuralError(f"layer {i + 1} does not chain onto layer {i}")
        if self.widths[-1] != 1:
            raise StructuralError("last layer must have a single particle")
        if self.masses is not None:
            if len(self.masses) != self.L - 1:
                raise StructuralError("need masses for layers 1..L-1")
            self.masses = [np.asarray(m, dtype=float) for m in self.masses]
            for m, M in zip(self.masses, self.widths):
                if m.shape != (M,) or np.any(m < 0) or not np.isclose(m.sum(), 1.0):
                    raise StructuralError("masses must be probability vectors over each layer")

    def arch(self) -> NetworkArch:
        return NetworkArch(self.d, self.widths, self.activations)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.layers)

    def with_layers(self, layers, t=None) -> "ParticleSystem":
        return ParticleSystem(layers, self.t if t is None else t, self.activations, self.masses)

    def to_finite(self) -> FiniteWeights:
        return FiniteWeights([w.copy() for w in self.layers])

    @classmethod
    def from_finite(cls, arch: NetworkArch, weights: FiniteWeights, t: float = 0.0) -> "ParticleSystem":
        weights.check(arch)
        return cls([w.copy() for w in weights.layers], t, arch.activations)


@dataclass
class MfTrajectory:
    """Checkpoints of an integration on a uniform grid of step ``h``.

    When integrated with ``keep_stages=True`` every grid point is a
    checkpoint and the trajectory also keeps, per step, the background state
    of each Runge-Kutta stage (``stages[m]``) and the drift at every grid
    point (``drifts``). The auxiliary flows read these instead of
    interpolating.
    """

    h: float
    scheme: str
    times: list[float] = field(default_factory=list)
    states: list[ParticleSystem] = field(default_factory=list)
    stages: list[list[list[np.ndarray]]] | None = None
    drifts: list[list[np.ndarray]] | None = None

    @property
    def t0(self) -> float:
        return self.times[0]

    @property
    def horizon(self) -> float:
        return self.times[-1] - self.times[0]

    @property
    def final(self) -> ParticleSystem:
        return self.states[-1]


@dataclass
class AuxPairState:
    """Probe pair for the auxiliary flow at layer ``i``.

    For ``layer == 1`` ``left`` lives in R^d; otherwise it is a function on
    the particles of layer ``i-1``. ``right`` is a function on the particles
    of layer ``i+1``. Either component may carry a leading probe axis.
    """

    layer: int
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=float)
        self.right = np.asarray(self.right, dtype=float)
        if self.left.ndim != self.right.ndim or self.left.shape[:-1] != self.right.shape[:-1]:
            raise StructuralError("left and right probe batches differ")


# ---------------------------------------------------------------------------
# batched MF quantities (rows of every array index the data panel)
# ---------------------------------------------------------------------------

def _expect_prev(values, w, mass):
    """E over codes of the previous layer: ``(N, M_prev) x (M_prev, M) -> (N, M)``."""
    if mass is None:
        return (values @ w) / w.shape[0]
    return (values * mass) @ w


def _expect_next(values, w, mass):
    """E over codes of the next layer: ``(N, M_next) x (M_prev, M_next)^T -> (N, M_prev)``."""
    if mass is None:
        return (values @ w.T) / w.shape[1]
    return (values * mass) @ w.T


def _mass(ps, i):
    """Mass vector of layer ``i`` (1-based); ``None`` means uniform."""
    if ps.masses is None or i >= ps.L:
        return None
    return ps.masses[i - 1]


def mf_pass(ps: ParticleSystem, layers, panel: Panel, loss: LossSpec):
    """Forward and backward quantities on the whole panel.

    Returns ``(yhat, H, A, dH)`` where ``H[i-1]``/``dH[i-1]`` have shape
    ``(N, M_i)`` and ``A[i-1] = phi_i(H_i)`` for the hidden layers.
    """
    acts = ps.activations
    L = ps.L
    X = panel.X
    H = [X @ layers[0].T]
    A = []
    for i in range(1, L):
        A.append(acts[i - 1].value(H[-1]))
        H.append(_expect_prev(A[-1], layers[i], _mass(ps, i)))
    yhat = acts[-1].value(H[-1][:, 0])
    dH = [None] * L
    dH[L - 1] = (loss.d2(panel.y, yhat) * acts[-1].derivative(H[-1][:, 0]))[:, None]
    for i in range(L - 1, 0, -1):
        dH[i - 1] = _expect_next(dH[i], layers[i], _mass(ps, i + 1)) * acts[i - 1].derivative(H[i - 1])
    return yhat, H, A, dH


def _mean_dW(panel, A, dH):
    n = len(panel)
    return [(dH[0].T @ panel.X) / n] + [(a.T @ d) / n for a, d in zip(A, dH[1:])]


def _drift(ps, layers, t, panel, loss, schedules):
    _, _, A, dH = mf_pass(ps, layers, panel, loss)
    return [-schedules(i + 1, t) * g for i, g in enumerate(_mean_dW(panel, A, dH))]


def _panel(data) -> Panel:
    panel = data if isinstance(data, Panel) else data.panel()
    if len(panel) == 0:
        raise ConfigurationError("empty data panel")
    return panel


def forward_particles(ps: ParticleSystem, x) -> tuple[float, list[np.ndarray]]:
    """Output and per-layer pre-activations on the particles for one input."""
    if ps.masses is None:
        return forward_finite(ps.arch(), ps.to_finite(), x)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != ps.d:
        raise StructuralError(f"input of dimension {x.shape[1]} does not match d={ps.d}")
    yhat, H, _, _ = mf_pass(ps, ps.layers, Panel(x, np.zeros(1)), _NULL_LOSS)
    return float(yhat[0]), [h[0] for h in H]


_NULL_LOSS = LossSpec("half-squared")


def predict_particles(ps: ParticleSystem, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != ps.d:
        raise StructuralError(f"input of dimension {X.shape[1]} does not match d={ps.d}")
    return mf_pass(ps, ps.layers, Panel(X, np.zeros(len(X))), _NULL_LOSS)[0]


def mf_drift(ps: ParticleSystem, data, loss: LossSpec, schedules: ScheduleSpec) -> list[np.ndarray]:
    """Time derivative of every weight: ``-xi_i(t) E_Z[Delta_i^w]``."""
    return _drift(ps, ps.layers, ps.t, _panel(data), loss, schedules)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def _n_steps(h, T):
    if not h > 0:
        raise ConfigurationError("step h must be positive")
    if T < 0:
        raise ConfigurationError("horizon T must be nonnegative")
    n = int(round(T / h))
    if abs(n * h - T) > 1e-9 * max(1.0, T):
        raise ConfigurationError(f"horizon {T} is not a multiple of the step {h}")
    return n


def _axpy(layers, h, k):
    return [w + h * d for w, d in zip(layers, k)]


def integrate_mf(ps: ParticleSystem, data, loss: LossSpec, schedules: ScheduleSpec, h: float,
                 T: float, scheme: str = "rk4", checkpoint_every: int = 1,
                 keep_stages: bool = False) -> MfTrajectory:
    """Fixed-step explicit Euler or classical RK4 on the MF ODEs from ``ps`` over ``[t, t+T]``.

    On overflow a :class:`NumericalOverflowError` is raised carrying the time
    stamp and the partial trajectory as ``exc.partial``.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    if checkpoint_every < 1:
        raise ConfigurationError("checkpoint_every must be at least 1")
    if keep_stages and checkpoint_every != 1:
        raise ConfigurationError("keep_stages requires a checkpoint at every step")
    n = _n_steps(h, T)
    panel = _panel(data)
    t0 = ps.t
    traj = MfTrajectory(h, scheme, [t0], [ps.with_layers([w.copy() for w in ps.layers])])
    if keep_stages:
        traj.stages, traj.drifts = [], []
    W = ps.layers
    # overflow is detected explicitly below, so the float warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(n):
            t = t0 + m * h
            k1 = _drift(ps, W, t, panel, loss, schedules)
            if scheme == "euler":
                new = _axpy(W, h, k1)
                stages = [W]
            else:
                S2 = _axpy(W, h / 2, k1)
                k2 = _drift(ps, S2, t + h / 2, panel, loss, schedules)
                S3 = _axpy(W, h / 2, k2)
                k3 = _drift(ps, S3, t + h / 2, panel, loss, schedules)
                S4 = _axpy(W, h, k3)
                k4 = _drift(ps, S4, t + h, panel, loss, schedules)
                new = [w + (h / 6) * (a + 2 * b + 2 * c + e) for w, a, b, c, e in zip(W, k1, k2, k3, k4)]
                stages = [W, S2, S3, S4]
            t_new = t0 + (m + 1) * h
            if not all(np.all(np.isfinite(w)) for w in new):
                exc = NumericalOverflowError(f"non-finite MF state at t={t_new:g}", time=t_new)
                exc.partial = traj
                raise exc
            if keep_stages:
                traj.stages.append(stages)
                traj.drifts.append(k1)
            W = new
            if (m + 1) % checkpoint_every == 0 or m + 1 == n:
                traj.times.append(t_new)
                traj.states.append(ps.with_layers(W, t_new))
    if keep_stages:
        traj.drifts.append(_drift(ps, W, t0 + n * h, panel, loss, schedules))
    return traj


# ---------------------------------------------------------------------------
# auxiliary pair flows
# ---------------------------------------------------------------------------

def _background(ps, layers, i, panel, loss):
    """What the layer-``i`` pair flow needs from a frozen background state."""
    _, _, A, dH = mf_pass(ps, layers, panel, loss)
    prev = panel.X if i == 1 else A[i - 2]
    return prev, dH[i]


def _aux_rhs(ps, i, bg, left, right, xi_i, xi_next):
    """Forward-time derivative of a batch of probes against one background.

    ``left``: ``(P, d)`` or ``(P, M_{i-1})``; ``right``: ``(P, M_{i+1})``.
    """
    prev, dH_next = bg
    n = prev.shape[0]
    act = ps.activations[i - 1]
    if i == 1:
        pre = prev @ left.T                                    # <a_1, X>
    else:
        pre = _expect_prev(prev, left.T, _mass(ps, i - 1))     # H_i^a(Z, a_i)
    back = _expect_next(dH_next, right, _mass(ps, i + 1))     # E_C[dH_{i+1} a_{i+1}]
    delta_a = back * act.derivative(pre)
    d_left = -xi_i * ((delta_a.T @ prev) / n)
    d_right = -xi_next * ((act.value(pre).T @ dH_next) / n)
    return d_left, d_right


def _rk_combine(scheme, y, h, ks):
    if scheme == "euler":
        return y + h * ks[0]
    return y + (h / 6) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])


def aux_flow(traj: MfTrajectory, i: int, u: AuxPairState, direction: str,
             schedules: ScheduleSpec, data, loss: LossSpec, T: float | None = None) -> AuxPairState:
    """Integrate the layer-``i`` probe pair against the stored trajectory up to time ``T``.

    ``direction="forward"`` runs the pair against ``W(t)`` using the stored
    Runge-Kutta stage states, so a probe started at a particle's own
    ``(w_i(0, ., c_i), w_{i+1}(0, c_i, .))`` reproduces that particle.
    ``direction="reverse"`` runs the time-reversed pair against ``W(T - t)``
    with the sign of the drift flipped; its half-step backgrounds are the
    cubic Hermite midpoints of the neighbouring grid states and drifts.
    """
    if traj.stages is None:
        raise ConfigurationError("auxiliary flows need a trajectory integrated with keep_stages=True")
    if direction not in ("forward", "reverse"):
        raise ConfigurationError(f"unknown direction {direction!r}")
    if u.layer != i:
        raise StructuralError(f"probe is for layer {u.layer}, flow requested at layer {i}")
    ps0 = traj.states[0]
    if not 1 <= i <= ps0.L - 1:
        raise StructuralError(f"pair flows exist for layers 1..{ps0.L - 1}")
    M = ps0.widths
    left_dim = ps0.d if i == 1 else M[i - 2]
    if u.left.shape[-1] != left_dim or u.right.shape[-1] != M[i]:
        raise StructuralError(f"probe shapes {u.left.shape}, {u.right.shape} do not match layer {i}")
    h = traj.h
    T = traj.horizon if T is None else T
    n = int(round(T / h))
    if T < 0 or abs(n * h - T) > 1e-9 * max(1.0, T):
        raise HorizonError(f"T={T} is not on the integration grid")
    if n > len(traj.stages):
        raise HorizonError(f"T={T} exceeds the trajectory horizon {traj.horizon}")

    panel = _panel(data)
    scheme = traj.scheme
    t0 = traj.t0
    single = u.left.ndim == 1
    left = np.atleast_2d(u.left).copy()
    right = np.atleast_2d(u.right).copy()
    offsets = [0.0] if scheme == "euler" else [0.0, 0.5, 0.5, 1.0]

    def grid_bg(g):
        return _background(ps0, traj.states[g].layers, i, panel, loss)

    def mid_bg(g):
        # Hermite midpoint of [t_{g-1}, t_g]
        W0, W1 = traj.states[g - 1].layers, traj.states[g].layers
        F0, F1 = traj.drifts[g - 1], traj.drifts[g]
        mid = [0.5 * (a + b) + (h / 8) * (f - e) for a, b, f, e in zip(W0, W1, F0, F1)]
        return _background(ps0, mid, i, panel, loss)

    for m in range(n):
        if direction == "forward":
            bgs = [_background(ps0, S, i, panel, loss) for S in traj.stages[m]]
            times = [t0 + (m + o) * h for o in offsets]
            sign = 1.0
        else:
            g = n - m
            if scheme == "euler":
                bgs = [grid_bg(g)]
            else:
                mid = mid_bg(g)
                bgs = [grid_bg(g), mid, mid, grid_bg(g - 1)]
            times = [t0 + (g - o) * h for o in offsets]
            sign = -1.0
        kl, kr = [], []
        for s, (bg, t) in enumerate(zip(bgs, times)):
            if s == 0:
                yl, yr = left, right
            else:
                frac = offsets[s] * h
                yl, yr = left + frac * kl[-1], right + frac * kr[-1]
            dl, dr = _aux_rhs(ps0, i, bg, yl, yr, schedules(i, t), schedules(i + 1, t))
            kl.append(sign * dl)
            kr.append(sign * dr)
        left = _rk_combine(scheme, left, h, kl)
        right = _rk_combine(scheme, right, h, kr)
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise NumericalOverflowError(f"non-finite probe at step {m + 1}", time=(m + 1) * h)
    if single:
        left, right = left[0], right[0]
    return AuxPairState(i, left, right)
