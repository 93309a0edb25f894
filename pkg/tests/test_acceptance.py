"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines.
"""
import json
import time

import numpy as np
import pytest

from mflab.cli import main
from mflab.embedding import build_embedding, gram_ratio, moment_proxy
from mflab.experiments import (chaos_trend, convergence_run, equivalence_run, grad_oracle,
                               roundtrip_run)
from mflab.finite import NetworkArch


def verdict(n, ok, detail):
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    reports = grad_oracle(n_instances=20, rng=0, h=1e-5)
    worst = max(r.worst for _, r in reports)
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-5 and dt < 10, f"max relative error {worst:.2e} (<= 1e-5), {dt:.1f}s")


def test_criterion_2_finite_mf_exactness():
    t0 = time.perf_counter()
    dev = equivalence_run(steps=100, width=16)
    dt = time.perf_counter() - t0
    verdict(2, dev <= 1e-10 and dt < 30, f"max deviation {dev:.2e} (<= 1e-10), {dt:.1f}s")


@pytest.fixture(scope="module")
def roundtrips():
    t0 = time.perf_counter()
    fine, coarse = roundtrip_run(h=1e-3), roundtrip_run(h=2e-3)
    return fine, coarse, time.perf_counter() - t0


def test_criterion_3_reverse_flow_roundtrip(roundtrips):
    fine, coarse, dt = roundtrips
    ratio = coarse.worst / fine.worst
    ok = fine.worst <= 1e-5 and ratio >= 8 and dt < 120
    verdict(3, ok, f"worst round-trip error {fine.worst:.2e} at h=1e-3, halving ratio {ratio:.1f}, {dt:.1f}s")


def test_criterion_4_particle_consistency(roundtrips):
    fine = roundtrips[0]
    worst = max(fine.consistency.values())
    verdict(4, worst <= 1e-12, f"max trajectory mismatch {worst:.2e} (<= 1e-12)")


@pytest.mark.slow
def test_criterion_5_propagation_of_chaos():
    t0 = time.perf_counter()
    dist = chaos_trend(range(5))
    ratios = dist[1:] / dist[:-1]
    dt = time.perf_counter() - t0
    ok = bool(np.all(ratios <= 0.9)) and dt < 1200
    verdict(5, ok, f"mean coupling distance {np.round(dist, 4).tolist()} over widths 25..200, "
                   f"ratios {np.round(ratios, 3).tolist()} (each <= 0.9), {dt:.0f}s")


@pytest.mark.slow
def test_criterion_6_global_convergence():
    t0 = time.perf_counter()
    r = convergence_run()
    dt = time.perf_counter() - t0
    target = max(1e-2, 0.01 * r.initial_loss)
    ok = r.final_loss < target and r.final_esssup <= 1e-3 and dt < 1800
    verdict(6, ok, f"loss {r.initial_loss:.4f} -> {r.final_loss:.2e} (< {target:.2e}), "
                   f"esssup {r.final_esssup:.2e} (<= 1e-3), {dt:.0f}s")


@pytest.mark.parametrize("scheme", ["bidiverse", "pseudo-iid"])
def test_criterion_7_initialization_conformance(scheme):
    arch = NetworkArch(2, (16, 16, 16, 1))
    K = np.array([moment_proxy(build_embedding(scheme, arch, seed=s), n_samples=50_000, rng=s)
                  for s in range(5)])
    spread = np.max(np.abs(K / K.mean(axis=0) - 1))
    grams = [gram_ratio(build_embedding(scheme, arch, seed=0), i, direction)
             for i in range(2, arch.L) for direction in ("forward", "backward")]
    ok = bool(np.all(np.isfinite(K))) and spread <= 0.2 and min(grams) >= 1e-6
    verdict(7, ok, f"{scheme}: moment proxy spread {spread:.1%} (<= 20%), min Gram ratio {min(grams):.2e} (>= 1e-6)")


def test_criterion_8_determinism(tmp_path):
    cfg = {"arch": {"d": 2, "widths": [6, 5, 1]}, "data": {"panel_size": 32},
           "sgd": {"eps": 0.02, "steps": 30, "log_every": 10},
           "integration": {"h": 0.02, "T": 0.6, "checkpoint_every": 10}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    kinds = ["train-finite", "train-mf", "couple", "diversity", "grad-check"]
    failed = []
    for kind in kinds:
        run = tmp_path / kind
        assert main([kind, "--config", str(path), "--out-dir", str(run), "--deterministic", "--seed", "11"]) == 0
        if main(["replay", str(run / "manifest.json"), "--out-dir", str(tmp_path / f"{kind}-replay")]) != 0:
            failed.append(kind)
    verdict(8, not failed, f"replays byte-identical for {len(kinds) - len(failed)}/{len(kinds)} run kinds")
