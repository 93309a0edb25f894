"""Desk-scale experiments shared by the acceptance suite and the command line."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DataModel, LossSpec, Sample, Schedule, ScheduleSpec, make_rng, split_seed
from .diagnostics import (MetricsRecord, coupling_distance, diversity_roundtrip, esssup_dwL,
                          grad_check, particle_probes, population_loss, random_probes)
from .embedding import (LatentCodes, build_embedding, instantiate_coupled, instantiate_tracked,
                        sample_codes)
from .finite import FiniteWeights, NetworkArch, train_finite
from .mf import aux_flow, integrate_mf

TEACHER = (3.0, -2.0)


def grad_oracle(n_instances: int = 20, rng=0, h: float = 1e-5, max_width: int = 6,
                max_d: int = 3, loss: LossSpec | None = None):
    """Finite-difference check on random small networks (L cycles through 2, 3, 4)."""
    g = make_rng(rng)
    loss = LossSpec("huber", 1.0) if loss is None else loss
    reports = []
    for n in range(n_instances):
        L = (2, 3, 4)[n % 3]
        d = int(g.integers(1, max_d + 1))
        widths = tuple(int(w) for w in g.integers(1, max_width + 1, size=L - 1)) + (1,)
        arch = NetworkArch(d, widths)
        W = FiniteWeights([g.standard_normal(s) for s in arch.weight_shapes()])
        smp = Sample(g.uniform(-1, 1, d), float(g.uniform(-1, 1)))
        reports.append((arch, grad_check(arch, W, smp, loss, h=h)))
    return reports


def equivalence_run(steps: int = 100, h: float = 0.05, width: int = 16, n_data: int = 32, seed: int = 0):
    """Full-batch GD with ``eps = h`` against Euler on the coupled particle system.

    Returns the max entrywise deviation over every logged step.
    """
    arch = NetworkArch(2, (width, width, 1))
    s = split_seed(seed, 2)
    emb = build_embedding("bidiverse", arch, seed=seed)
    pair = instantiate_coupled(emb, sample_codes(emb, arch.widths, s[0]))
    data = DataModel.teacher(TEACHER, panel_size=n_data, panel_seed=seed).as_finite()
    loss, sch = LossSpec(), ScheduleSpec.constant(3)
    _, ft = train_finite(arch, pair.finite, data, loss, sch, h, steps, mode="full-batch")
    tr = integrate_mf(pair.particles, data, loss, sch, h, steps * h, "euler")
    return max(float(np.max(np.abs(a - b)))
               for snap, ps in zip(ft.snapshots, tr.states)
               for a, b in zip(snap.layers, ps.layers))


def roundtrip_schedules() -> ScheduleSpec:
    # Strong hidden-layer learning rates move the trajectory far enough that the
    # integration error rises above roundoff and its h^4 decay is observable.
    return ScheduleSpec((Schedule("constant", 8.0), Schedule("exponential-decay", 8.0, 0.5),
                         Schedule("constant", 1.0)))


@dataclass
class RoundTripResult:
    h: float
    errors: dict = field(default_factory=dict)       # layer -> per-probe errors
    consistency: dict = field(default_factory=dict)  # layer -> sup-norm deviation

    @property
    def worst(self) -> float:
        return max(float(np.max(e)) for e in self.errors.values())


def roundtrip_run(h: float = 1e-3, T: float = 1.0, width: int = 8, n_probes: int = 16, seed: int = 0,
                  layers=(1, 2), schedules: ScheduleSpec | None = None) -> RoundTripResult:
    arch = NetworkArch(2, (width, width, 1))
    s = split_seed(seed, 3)
    emb = build_embedding("bidiverse", arch, seed=seed)
    pair = instantiate_coupled(emb, sample_codes(emb, arch.widths, s[0]))
    data = DataModel.teacher(TEACHER, panel_size=64, panel_seed=seed).as_finite()
    loss = LossSpec()
    sch = roundtrip_schedules() if schedules is None else schedules
    tr = integrate_mf(pair.particles, data, loss, sch, h, T, "rk4", keep_stages=True)
    out = RoundTripResult(h)
    for i in layers:
        probes = random_probes(tr.states[0], i, n_probes, make_rng(split_seed(s[1], i)[-1]))
        out.errors[i] = diversity_roundtrip(tr, i, probes, sch, data, loss)
        own = particle_probes(tr.states[0], i, np.arange(width))
        moved = aux_flow(tr, i, own, "forward", sch, data, loss)
        fin = particle_probes(tr.final, i, np.arange(width))
        out.consistency[i] = max(float(np.max(np.abs(moved.left - fin.left))),
                                 float(np.max(np.abs(moved.right - fin.right))))
    return out


def chaos_run(seed: int, widths=(25, 50, 100, 200), reference_size: int = 512, T: float = 0.5,
              eps: float = 1e-3, h: float = 0.01, n_data: int = 256, log_every: int = 10,
              reference: str = "nested", scheme: str = "bidiverse", d: int = 2) -> np.ndarray:
    """Running-max coupling distance at time ``T`` for each width, one seed.

    Every width reuses prefixes of one code pool, so the widths are compared
    under common random numbers. With ``reference="nested"`` the MF reference
    is the particle system on the first ``reference_size`` pool codes and the
    finite neurons are its leading particles. With ``"tracer"`` the reference
    runs on independent background codes and the finite codes ride along as
    massless tracers.
    """
    s = split_seed(seed, 3)
    L = 3
    pool_n = reference_size if reference == "nested" else max(widths)
    pool_arch = NetworkArch(d, (pool_n, pool_n, 1))
    emb = build_embedding(scheme, pool_arch, seed=seed)
    pool = sample_codes(emb, pool_arch.widths, s[0])
    coef = TEACHER + (0.0,) * (d - len(TEACHER))
    data = DataModel.teacher(coef, panel_size=n_data, panel_seed=seed).as_finite()
    loss, sch = LossSpec(), ScheduleSpec.constant(L)
    if reference == "nested":
        ref_ps = instantiate_coupled(emb, pool).particles
        base_index = [np.arange(pool_n)] * (L - 1) + [np.zeros(1, dtype=int)]
    elif reference == "tracer":
        tp = instantiate_tracked(emb, pool, reference_size, s[1])
        ref_ps, base_index = tp.particles, tp.index
    else:
        raise ValueError(f"unknown reference kind {reference!r}")
    tr = integrate_mf(ref_ps, data, loss, sch, h, T, "rk4",
                      checkpoint_every=max(1, int(round(log_every * eps / h))))
    out = []
    for n in widths:
        codes = LatentCodes([c[:n] for c in pool.codes[:-1]] + [pool.codes[-1]])
        pair = instantiate_coupled(emb, codes)
        steps = int(round(T / eps))
        _, ft = train_finite(pair.arch, pair.finite, data, loss, sch, eps, steps, rng=s[2],
                             log_every=log_every)
        idx = [ix[:n] for ix in base_index[:-1]] + [base_index[-1]]
        out.append(coupling_distance(ft, tr, index=idx).running_max[-1])
    return np.asarray(out)


def chaos_trend(seeds=range(5), **kwargs) -> np.ndarray:
    """Seed-averaged running-max coupling distance per width."""
    return np.mean([chaos_run(s, **kwargs) for s in seeds], axis=0)


@dataclass
class ConvergenceResult:
    initial_loss: float
    final_loss: float
    final_esssup: float
    records: list


def convergence_run(width: int = 200, L: int = 4, h: float = 0.1, T: float = 200.0,
                    panel_size: int = 512, seed: int = 0, checkpoint_every: int = 100) -> ConvergenceResult:
    """MF gradient flow from a bidiverse initialization on the noiseless teacher."""
    arch = NetworkArch(2, (width,) * (L - 1) + (1,))
    s = split_seed(seed, 1)
    emb = build_embedding("bidiverse", arch, seed=seed)
    pair = instantiate_coupled(emb, sample_codes(emb, arch.widths, s[0]))
    panel = DataModel.teacher(TEACHER, panel_size=panel_size, panel_seed=seed).panel()
    loss, sch = LossSpec("huber", 1.0), ScheduleSpec.constant(L)
    tr = integrate_mf(pair.particles, panel, loss, sch, h, T, "rk4", checkpoint_every=checkpoint_every)
    recs = [MetricsRecord(t, population_loss(ps, panel, loss), esssup_dwL(ps, panel, loss, sch), ())
            for t, ps in zip(tr.times, tr.states)]
    return ConvergenceResult(recs[0].pop_loss, recs[-1].pop_loss, recs[-1].esssup_dwL, recs)
