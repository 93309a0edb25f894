"""Plain-text containers for weights, trajectories and codes, plus the metrics CSV.

Container layout::

    #mflab-container 1
    #meta <key> <json value>
    ...
    @record <name> <shape, e.g. 3x2 or 5>
    <one line per row, values separated by single spaces>

Values are written row-major with 17 significant digits, which round-trips
every float64 exactly. Matrices with zero columns still get one (empty) line
per row.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .finite import FiniteTrajectory, FiniteWeights
from .mf import MfTrajectory, ParticleSystem

MAGIC = "#mflab-container 1"


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_container(path, records: dict, meta: dict | None = None):
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        lines.append(f"#meta {key} {json.dumps(value, sort_keys=True)}")
    for name, arr in records.items():
        if any(c.isspace() for c in name):
            raise ConfigurationError(f"record name {name!r} contains whitespace")
        a = np.asarray(arr, dtype=float)
        if a.ndim not in (1, 2):
            raise ConfigurationError(f"record {name!r} must be 1-D or 2-D")
        lines.append(f"@record {name} {'x'.join(str(s) for s in a.shape)}")
        rows = [a] if a.ndim == 1 else a
        lines.extend(" ".join(_fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def read_container(path) -> tuple[dict, dict]:
    lines = Path(path).read_text().split("\n")
    if not lines or lines[0] != MAGIC:
        raise ConfigurationError(f"{path} is not an mflab container")
    meta, records = {}, {}
    pos = 1
    while pos < len(lines):
        line = lines[pos]
        pos += 1
        if line.startswith("#meta "):
            _, key, value = line.split(" ", 2)
            meta[key] = json.loads(value)
        elif line.startswith("@record "):
            _, name, shape_txt = line.split(" ")
            shape = tuple(int(s) for s in shape_txt.split("x"))
            nrows = 1 if len(shape) == 1 else shape[0]
            body = lines[pos:pos + nrows]
            pos += nrows
            values = [float(v) for row in body for v in row.split()]
            records[name] = np.array(values, dtype=float).reshape(shape)
        elif line.strip():
            raise ConfigurationError(f"unexpected line {pos} in {path}: {line[:40]!r}")
    return meta, records


def _layer_records(prefix, layers):
    return {f"{prefix}/w{i + 1}": w for i, w in enumerate(layers)}


def _collect_layers(records, prefix):
    out, i = [], 1
    while f"{prefix}/w{i}" in records:
        out.append(records[f"{prefix}/w{i}"])
        i += 1
    return out


def save_finite_trajectory(path, traj: FiniteTrajectory, meta: dict | None = None):
    records = {}
    for j, snap in enumerate(traj.snapshots):
        records.update(_layer_records(f"snap{j}", snap.layers))
    head = {"kind": "finite-trajectory", "eps": traj.eps, "steps": traj.steps}
    write_container(path, records, {**head, **(meta or {})})


def load_finite_trajectory(path) -> FiniteTrajectory:
    meta, records = read_container(path)
    traj = FiniteTrajectory(meta["eps"])
    for j, k in enumerate(meta["steps"]):
        traj.steps.append(int(k))
        traj.snapshots.append(FiniteWeights(_collect_layers(records, f"snap{j}")))
    return traj


def save_mf_trajectory(path, traj: MfTrajectory, meta: dict | None = None):
    records = {}
    for j, ps in enumerate(traj.states):
        records.update(_layer_records(f"snap{j}", ps.layers))
    first = traj.states[0]
    if first.masses is not None:
        records.update({f"mass/layer{i + 1}": m for i, m in enumerate(first.masses)})
    head = {"kind": "mf-trajectory", "h": traj.h, "scheme": traj.scheme, "times": traj.times,
            "activations": [a.kind for a in first.activations]}
    write_container(path, records, {**head, **(meta or {})})


def load_mf_trajectory(path) -> MfTrajectory:
    from .core import ActivationSpec

    meta, records = read_container(path)
    kinds = meta["activations"]
    acts = tuple(ActivationSpec(k, role="output" if j == len(kinds) - 1 else "hidden")
                 for j, k in enumerate(kinds))
    masses = None
    if "mass/layer1" in records:
        masses = [records[f"mass/layer{i}"] for i in range(1, len(kinds))]
    traj = MfTrajectory(meta["h"], meta["scheme"])
    for j, t in enumerate(meta["times"]):
        traj.times.append(t)
        traj.states.append(ParticleSystem(_collect_layers(records, f"snap{j}"), t, acts, masses))
    return traj


def save_codes(path, codes, embedding):
    """Codes plus everything needed to rebuild the embedding deterministically."""
    from .embedding import embedding_meta

    records = {f"codes/layer{i + 1}": c for i, c in enumerate(codes.codes)}
    if embedding.scheme == "bidiverse":
        records["param/A"] = embedding.first
        for i, s in enumerate(embedding.series, start=2):
            records.update({f"param/w{i}/U": s.U, f"param/w{i}/V": s.V,
                            f"param/w{i}/b": s.b, f"param/w{i}/a": s.a,
                            f"param/w{i}/offset": np.array([s.offset])})
    write_container(path, records, {"kind": "latent-codes", **embedding_meta(embedding)})


def load_codes(path):
    """Returns ``(codes, embedding)``; the embedding is rebuilt from the header."""
    from .embedding import LatentCodes, embedding_from_meta

    meta, records = read_container(path)
    L = meta["L"]
    codes = LatentCodes([records[f"codes/layer{i}"] for i in range(1, L + 1)])
    return codes, embedding_from_meta(meta)


METRIC_FIELDS = ("t", "pop_loss", "esssup_dwL")


def write_metrics_csv(path, records, L: int):
    header = list(METRIC_FIELDS) + [f"wl1_layer_{i}" for i in range(1, L + 1)] + ["coupling_dist"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            wl1 = list(r.weighted_l1) if r.weighted_l1 else [None] * L
            row = [r.t, r.pop_loss, r.esssup_dwL] + wl1 + [r.coupling_dist]
            w.writerow(["" if v is None else _fmt(v) for v in row])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()}
                for row in csv.DictReader(fh)]
