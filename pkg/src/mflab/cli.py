"""Command line entry point.

Run subcommands (``train-finite``, ``train-mf``, ``couple``, ``diversity``,
``grad-check``) read an experiment config, write their artifacts into
``--out-dir`` and finish with ``manifest.json``. ``replay`` re-runs a
manifest and compares output digests; ``sweep`` expands a base config over
a grid of values.

Exit codes: 0 success, 1 replay mismatch or unexpected error, 2 invalid
configuration, 3 numerical overflow (partial outputs and a failure manifest
are still written).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import logging
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import KINDS, ConfigError, ExperimentConfig, load_config, parse_config
from .core import make_rng, split_seed
from .diagnostics import _restrict
from .diagnostics import (MetricsRecord, convergence_metrics, coupling_distance, diversity_roundtrip,
                          esssup_dwL, particle_probes, population_loss, random_probes, weighted_l1)
from .embedding import LatentCodes, build_embedding, instantiate_coupled, instantiate_tracked, sample_codes
from .errors import ConfigurationError, MflabError, NumericalOverflowError
from .experiments import grad_oracle
from .finite import FiniteTrajectory, train_finite
from .io import save_codes, save_finite_trajectory, save_mf_trajectory, write_metrics_csv
from .mf import MfTrajectory, ParticleSystem, aux_flow, integrate_mf

log = logging.getLogger("mflab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_OVERFLOW = 0, 1, 2, 3
STREAMS = ("codes", "background", "sgd", "probes")


class _Run:
    """Collects the files a run writes, so the manifest can list and hash them."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out_dir / name


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------

def _streams(cfg: ExperimentConfig) -> dict:
    return dict(zip(STREAMS, split_seed(cfg.raw["seed"], len(STREAMS))))


def _embedding(cfg: ExperimentConfig, arch):
    e = cfg.section("embedding")
    kw = {"n_features": e["n_features"], "gain": e["gain"], "frequency": e["frequency"]} \
        if e["scheme"] == "bidiverse" else {}
    return build_embedding(e["scheme"], arch, latent_dims=e["latent_dim"], seed=cfg.embedding_seed,
                           law=e["law"], **kw)


def _train_args(cfg):
    s = cfg.section("sgd")
    return dict(eps=s["eps"], steps=s["steps"], log_every=s["log_every"], mode=s["mode"])


def _integrate_args(cfg):
    g = cfg.section("integration")
    return dict(h=g["h"], T=g["T"], scheme=g["scheme"], checkpoint_every=g["checkpoint_every"])


def _finite_records(cfg, traj: FiniteTrajectory):
    arch, data, loss, sch = cfg.arch, cfg.data, cfg.loss, cfg.schedules
    panel = data.panel()
    final = ParticleSystem.from_finite(arch, traj.snapshots[-1])
    out = []
    for t, w in zip(traj.times, traj.snapshots):
        ps = ParticleSystem.from_finite(arch, w, t)
        out.append(MetricsRecord(t, population_loss(w, panel, loss, arch), esssup_dwL(ps, panel, loss, sch),
                                 weighted_l1(ps, final)))
    return out


def _train_finite_partial(cfg, init, rng):
    traj = FiniteTrajectory(cfg.section("sgd")["eps"])
    try:
        train_finite(cfg.arch, init, cfg.data, cfg.loss, cfg.schedules, rng=rng, trajectory=traj,
                     **_train_args(cfg))
    except NumericalOverflowError as exc:
        exc.partial = traj
        raise
    return traj


# ---------------------------------------------------------------------------
# run kinds
# ---------------------------------------------------------------------------

def _run_train_finite(cfg, run, streams):
    emb = _embedding(cfg, cfg.arch)
    codes = sample_codes(emb, cfg.arch.widths, streams["codes"])
    save_codes(run.path("codes.txt"), codes, emb)
    pair = instantiate_coupled(emb, codes, cfg.arch.activations)
    try:
        traj = _train_finite_partial(cfg, pair.finite, streams["sgd"])
    except NumericalOverflowError as exc:
        save_finite_trajectory(run.path("trajectory.txt"), exc.partial)
        raise
    save_finite_trajectory(run.path("trajectory.txt"), traj)
    write_metrics_csv(run.path("metrics.csv"), _finite_records(cfg, traj), cfg.arch.L)


def _integrate(cfg, ps, run, name, keep_stages=False) -> MfTrajectory:
    kw = _integrate_args(cfg)
    if keep_stages:
        kw["checkpoint_every"] = 1  # the pair flows need every grid point
    try:
        return integrate_mf(ps, cfg.data, cfg.loss, cfg.schedules, keep_stages=keep_stages, **kw)
    except NumericalOverflowError as exc:
        if getattr(exc, "partial", None) is not None and exc.partial.states:
            save_mf_trajectory(run.path(name), exc.partial)
        raise


def _run_train_mf(cfg, run, streams):
    emb = _embedding(cfg, cfg.arch)
    codes = sample_codes(emb, cfg.arch.widths, streams["codes"])
    save_codes(run.path("codes.txt"), codes, emb)
    ps = instantiate_coupled(emb, codes, cfg.arch.activations).particles
    traj = _integrate(cfg, ps, run, "trajectory.txt")
    save_mf_trajectory(run.path("trajectory.txt"), traj)
    panel = cfg.data.panel()
    write_metrics_csv(run.path("metrics.csv"), convergence_metrics(traj, panel, cfg.loss, cfg.schedules),
                      cfg.arch.L)


def _coupled_setup(cfg, streams):
    """Finite initialization, reference particles and the index of the finite neurons in them."""
    arch = cfg.arch
    c = cfg.section("coupling")
    M = c["reference_size"]
    if M is None:
        emb = _embedding(cfg, arch)
        codes = sample_codes(emb, arch.widths, streams["codes"])
        pair = instantiate_coupled(emb, codes, arch.activations)
        return emb, codes, pair.finite, pair.particles, None
    if c["reference"] == "tracer":
        emb = _embedding(cfg, arch)
        codes = sample_codes(emb, arch.widths, streams["codes"])
        tp = instantiate_tracked(emb, codes, M, streams["background"], arch.activations)
        return emb, codes, tp.finite, tp.particles, tp.index
    # nested: the finite codes are the leading codes of the reference pool
    pool_widths = tuple(max(M, n) for n in arch.widths[:-1]) + (1,)
    emb = _embedding(cfg, arch)
    pool = sample_codes(emb, pool_widths, streams["codes"])
    ref = instantiate_coupled(emb, pool, arch.activations)
    codes = LatentCodes([p[:n] for p, n in zip(pool.codes[:-1], arch.widths[:-1])] + [pool.codes[-1]])
    finite = instantiate_coupled(emb, codes, arch.activations).finite
    index = [np.arange(n) for n in arch.widths[:-1]] + [np.zeros(1, dtype=int)]
    return emb, pool, finite, ref.particles, index


def _restricted(ps: ParticleSystem, index, arch) -> ParticleSystem:
    if index is None:
        return ps
    return ParticleSystem(_restrict(ps.layers, index), ps.t, arch.activations)


def _run_couple(cfg, run, streams):
    emb, codes, finite, particles, index = _coupled_setup(cfg, streams)
    save_codes(run.path("codes.txt"), codes, emb)
    try:
        ftraj = _train_finite_partial(cfg, finite, streams["sgd"])
    except NumericalOverflowError as exc:
        save_finite_trajectory(run.path("finite.txt"), exc.partial)
        raise
    save_finite_trajectory(run.path("finite.txt"), ftraj)
    mtraj = _integrate(cfg, particles, run, "mf.txt")
    save_mf_trajectory(run.path("mf.txt"), mtraj)
    series = coupling_distance(ftraj, mtraj, index=index)
    arch, panel = cfg.arch, cfg.data.panel()
    mf_times = np.asarray(mtraj.times)
    records = []
    for t, w, dist in zip(series.times, ftraj.snapshots, series.distance):
        ref = mtraj.states[int(np.argmin(np.abs(mf_times - t)))]
        fin = ParticleSystem.from_finite(arch, w, t)
        records.append(MetricsRecord(t, population_loss(w, panel, cfg.loss, arch),
                                     esssup_dwL(fin, panel, cfg.loss, cfg.schedules),
                                     weighted_l1(fin, _restricted(ref, index, arch)), float(dist)))
    write_metrics_csv(run.path("metrics.csv"), records, arch.L)


def _run_diversity(cfg, run, streams):
    emb = _embedding(cfg, cfg.arch)
    codes = sample_codes(emb, cfg.arch.widths, streams["codes"])
    save_codes(run.path("codes.txt"), codes, emb)
    ps = instantiate_coupled(emb, codes, cfg.arch.activations).particles
    traj = _integrate(cfg, ps, run, "trajectory.txt", keep_stages=True)
    save_mf_trajectory(run.path("trajectory.txt"), traj)
    dv = cfg.section("diversity")
    layers = dv["layers"] or list(range(1, cfg.arch.L))
    panel = cfg.data.panel()
    rows = []
    for i in layers:
        rng = make_rng(split_seed(streams["probes"], i)[-1])
        probes = random_probes(traj.states[0], i, dv["probes"], rng, dv["probe_scale"])
        errs = diversity_roundtrip(traj, i, probes, cfg.schedules, panel, cfg.loss)
        rows.extend(("roundtrip", i, j, e) for j, e in enumerate(errs))
        own = particle_probes(traj.states[0], i, np.arange(cfg.arch.widths[i - 1]))
        moved = aux_flow(traj, i, own, "forward", cfg.schedules, panel, cfg.loss)
        fin = particle_probes(traj.final, i, np.arange(cfg.arch.widths[i - 1]))
        dev = np.maximum(np.max(np.abs(np.atleast_2d(moved.left - fin.left)), axis=1),
                         np.max(np.abs(np.atleast_2d(moved.right - fin.right)), axis=1))
        rows.extend(("consistency", i, j, e) for j, e in enumerate(dev))
    with open(run.path("diversity.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test", "layer", "probe", "error"])
        w.writerows([a, b, c, format(float(e), ".17g")] for a, b, c, e in rows)
    write_metrics_csv(run.path("metrics.csv"), convergence_metrics(traj, panel, cfg.loss, cfg.schedules),
                      cfg.arch.L)


def _run_grad_check(cfg, run, streams):
    gc = cfg.section("grad_check")
    reports = grad_oracle(gc["instances"], streams["codes"], gc["h"], gc["max_width"], gc["max_d"], cfg.loss)
    with open(run.path("gradcheck.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "L", "d", "widths", "worst_rel_error", "layer", "entry",
                    "analytic", "numeric"])
        for k, (arch, r) in enumerate(reports):
            w.writerow([k, arch.L, arch.d, "x".join(map(str, arch.widths)), format(r.worst, ".17g"), r.layer,
                        "x".join(map(str, np.atleast_1d(r.index))), format(r.analytic, ".17g"),
                        format(r.numeric, ".17g")])


RUNNERS = {"train-finite": _run_train_finite, "train-mf": _run_train_mf, "couple": _run_couple,
           "diversity": _run_diversity, "grad-check": _run_grad_check}


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _versions() -> dict:
    import scipy
    import sklearn
    return {"mflab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: ExperimentConfig, out_dir) -> tuple[int, dict]:
    """Execute ``cfg`` into ``out_dir``; returns ``(exit code, manifest)``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(out_dir)
    threads = 1 if cfg.raw["deterministic"] else cfg.raw["threads"]
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    status, error, code = "ok", None, EXIT_OK
    with threadpool_limits(limits=threads):
        try:
            RUNNERS[cfg.kind](cfg, run, _streams(cfg))
        except NumericalOverflowError as exc:
            status, code = "overflow", EXIT_OVERFLOW
            error = {"message": str(exc), "step": exc.step, "time": exc.time}
            log.error("numerical overflow: %s", exc)
    files = sorted(dict.fromkeys(run.files))
    manifest = {
        "manifest": True,
        "status": status,
        "error": error,
        "kind": cfg.kind,
        "seed": cfg.raw["seed"],
        "seed_streams": {name: f"split_seed({cfg.raw['seed']}, {len(STREAMS)})[{k}]"
                         for k, name in enumerate(STREAMS)},
        "embedding_seed": cfg.embedding_seed,
        "deterministic": cfg.raw["deterministic"],
        "blas_threads": threads,
        "versions": _versions(),
        "config": cfg.raw,
        "outputs": {name: _digest(out_dir / name) for name in files if (out_dir / name).exists()},
        "started_at": started,
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return code, manifest


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _apply_overrides(obj: dict, args, kind: str) -> dict:
    obj = copy.deepcopy(obj)
    obj.setdefault("kind", kind)
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.threads is not None:
        obj["threads"] = args.threads
    if args.deterministic:
        obj["deterministic"] = True
    if args.out_dir is not None:
        obj["out_dir"] = str(args.out_dir)
    for item in args.set or []:
        key, _, value = item.partition("=")
        _set_path(obj, key, _json_or_str(value))
    return obj


def _json_or_str(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(obj: dict, dotted: str, value):
    parts = dotted.split(".")
    for p in parts[:-1]:
        obj = obj.setdefault(p, {})
    obj[parts[-1]] = value


def _read_json(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    if isinstance(obj, dict) and obj.get("manifest") is True:
        obj = obj["config"]
    return obj


def _cmd_run(args) -> int:
    base = _read_json(args.config) if args.config else {}
    cfg = parse_config(_apply_overrides(base, args, args.command), args.command)
    code, manifest = run_experiment(cfg, cfg.raw["out_dir"])
    print(f"{manifest['status']}: wrote {len(manifest['outputs'])} files to {cfg.raw['out_dir']}")
    return code


def _cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    cfg = load_config(args.manifest)
    if args.out_dir is not None:
        cfg.raw["out_dir"] = str(args.out_dir)
    if Path(cfg.raw["out_dir"]).resolve() == Path(args.manifest).resolve().parent:
        raise ConfigError(["replay needs an --out-dir different from the original run"])
    code, fresh = run_experiment(cfg, cfg.raw["out_dir"])
    if code != EXIT_OK:
        return code
    same = fresh["outputs"] == manifest["outputs"]
    for name in sorted(set(fresh["outputs"]) | set(manifest["outputs"])):
        ok = fresh["outputs"].get(name) == manifest["outputs"].get(name)
        print(f"{'identical' if ok else 'DIFFERENT'}  {name}")
    if not cfg.raw["deterministic"]:
        print("note: the original run was not in deterministic mode")
    return EXIT_OK if same else EXIT_FAIL


def _cmd_sweep(args) -> int:
    base = _read_json(args.config) if args.config else {}
    axes = []
    for item in args.vary:
        key, _, value = item.partition("=")
        values = _json_or_str(value)
        if not isinstance(values, list) or not values:
            raise ConfigError([f"--vary {key} needs a non-empty JSON list"])
        axes.append((key, values))
    out = Path(args.out_dir or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    paths, problems = [], []
    for k, combo in enumerate(itertools.product(*[v for _, v in axes])):
        obj = copy.deepcopy(base)
        for (key, _), value in zip(axes, combo):
            _set_path(obj, key, value)
        obj["out_dir"] = str(out / f"run_{k:03d}")
        try:
            parse_config(obj)
        except ConfigError as exc:
            problems.extend(f"run_{k:03d}: {p}" for p in exc.problems)
        path = out / f"config_{k:03d}.json"
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    if problems:
        raise ConfigError(problems)
    for p in paths:
        print(p)
    if args.run:
        worst = EXIT_OK
        for p in paths:
            code, manifest = run_experiment(load_config(p), json.loads(p.read_text())["out_dir"])
            print(f"{manifest['status']}: {p}")
            worst = max(worst, code)
        return worst
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mflab", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"mflab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", type=Path, help="JSON config (or a manifest to reuse its config)")
        p.add_argument("--out-dir", type=Path)
        p.add_argument("--seed", type=int, help="master seed; overrides the config")
        p.add_argument("--threads", type=int, help="BLAS threads when not deterministic")
        p.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")
        p.add_argument("--set", action="append", metavar="KEY=JSON",
                       help="override a config entry, e.g. --set sgd.eps=0.001")
        p.set_defaults(func=_cmd_run)
    p = sub.add_parser("replay", help="re-run a manifest and compare output digests")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=_cmd_replay)
    p = sub.add_parser("sweep", help="write one config per point of a parameter grid")
    p.add_argument("--config", type=Path)
    p.add_argument("--vary", action="append", required=True, metavar="KEY=JSONLIST")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--run", action="store_true", help="also run every generated config")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except MflabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
