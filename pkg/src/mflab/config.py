"""Experiment configuration: strict JSON documents validated as a whole.

Unknown keys are errors. :func:`parse_config` collects every violation
before raising a single :class:`ConfigError`, so one invocation reports all
problems at once. The schema is documented in the README.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .core import (ActivationSpec, DataModel, LossSpec, Schedule, ScheduleSpec,
                   default_activations)
from .errors import ConfigurationError, MflabError
from .finite import NetworkArch

KINDS = ("train-finite", "train-mf", "couple", "diversity", "grad-check")

DEFAULTS = {
    "kind": "train-finite",
    "seed": 0,
    "arch": {"d": 2, "widths": [16, 16, 1], "activations": None},
    "loss": {"kind": "huber", "delta": 1.0},
    "schedules": {"kind": "constant", "c": 1.0},
    "data": {"source": "synthetic-teacher", "target": "tanh-linear", "coef": [3.0, -2.0],
             "input_law": "uniform-cube", "input_scale": 1.0, "noise": 0.0,
             "panel_size": 512, "panel_seed": None, "x": None, "y": None},
    "embedding": {"scheme": "bidiverse", "latent_dim": 8, "n_features": 64, "gain": 1.0,
                  "frequency": 2.0, "law": "gaussian", "seed": None},
    "sgd": {"eps": 0.01, "steps": 100, "mode": "sgd", "log_every": 10},
    "integration": {"h": 0.01, "T": 1.0, "scheme": "rk4", "checkpoint_every": 10},
    "coupling": {"reference_size": None, "reference": "nested"},
    "diversity": {"layers": None, "probes": 16, "probe_scale": 1.0},
    "grad_check": {"instances": 20, "h": 1e-5, "max_width": 6, "max_d": 3},
    "convergence_run": None,
    "threads": 1,
    "deterministic": False,
    "out_dir": "mflab-run",
}


# sections whose value may take more than one shape; validated separately
FREE_FORM = {"schedules"}


class ConfigError(ConfigurationError):
    """Invalid configuration; ``problems`` lists every violated rule."""

    def __init__(self, problems):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))
        self.problems = list(problems)


@dataclass
class ExperimentConfig:
    raw: dict
    arch: NetworkArch
    loss: LossSpec
    schedules: ScheduleSpec
    data: DataModel

    @property
    def kind(self) -> str:
        return self.raw["kind"]

    def section(self, name) -> dict:
        return self.raw[name]

    @property
    def embedding_seed(self) -> int:
        s = self.raw["embedding"]["seed"]
        return self.raw["seed"] if s is None else s

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _merge(defaults, given, where, problems):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            problems.append(f"unknown key '{where}{key}'")
        elif isinstance(defaults[key], dict) and defaults[key] and key not in FREE_FORM:
            if not isinstance(value, dict):
                problems.append(f"{where}{key!r} must be an object")
            else:
                out[key] = _merge(defaults[key], value, f"{where}{key}.", problems)
        else:
            out[key] = value
    return out


def _schedule(obj, where, problems):
    if not isinstance(obj, dict):
        problems.append(f"{where} must be an object")
        return None
    allowed = {"kind", "c", "rate", "knots"}
    extra = set(obj) - allowed
    if extra:
        problems.append(f"unknown key(s) {sorted(extra)} in {where}")
    try:
        knots = tuple(tuple(k) for k in obj.get("knots", ()))
        return Schedule(obj.get("kind", "constant"), float(obj.get("c", 1.0)),
                        float(obj.get("rate", 0.0)), knots)
    except (MflabError, TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_config(obj: dict, kind: str | None = None) -> ExperimentConfig:
    problems: list[str] = []
    if not isinstance(obj, dict):
        raise ConfigError(["configuration must be a JSON object"])
    raw = _merge(DEFAULTS, obj, "", problems)
    if kind is not None:
        if "kind" in obj and obj["kind"] != kind:
            problems.append(f"config kind {obj['kind']!r} conflicts with subcommand {kind!r}")
        raw["kind"] = kind
    if raw["kind"] not in KINDS:
        problems.append(f"kind must be one of {KINDS}, got {raw['kind']!r}")
    if not isinstance(raw["seed"], int) or not 0 <= raw["seed"] < 2 ** 64:
        problems.append("seed must be an unsigned 64-bit integer")
    if not isinstance(raw["threads"], int) or raw["threads"] < 1:
        problems.append("threads must be a positive integer")

    a = raw["arch"]
    arch = None
    widths = a["widths"]
    if not isinstance(widths, list) or len(widths) < 2 or not all(isinstance(n, int) and n >= 1 for n in widths):
        problems.append("arch.widths must list at least two positive integers")
    elif widths[-1] != 1:
        problems.append(f"arch.widths must end with n_L = 1, got {widths[-1]}")
    if not isinstance(a["d"], int) or a["d"] < 1:
        problems.append("arch.d must be a positive integer")
    L = len(widths) if isinstance(widths, list) else 0
    acts = None
    if a["activations"] is not None:
        if not isinstance(a["activations"], list) or len(a["activations"]) != L:
            problems.append("arch.activations must list one activation per layer")
        else:
            try:
                acts = tuple(ActivationSpec(k, role="output" if j == L - 1 else "hidden")
                             for j, k in enumerate(a["activations"]))
            except MflabError as exc:
                problems.append(f"arch.activations: {exc}")
    if not any(p.startswith("arch") for p in problems):
        arch = NetworkArch(a["d"], tuple(widths), acts or default_activations(L))

    loss = None
    try:
        loss = LossSpec(raw["loss"]["kind"], float(raw["loss"]["delta"]))
    except (MflabError, TypeError, ValueError) as exc:
        problems.append(f"loss: {exc}")

    sched = raw["schedules"]
    if isinstance(sched, list):
        if len(sched) != L:
            problems.append(f"schedules must list {L} layers, got {len(sched)}")
        parts = [_schedule(s, f"schedules[{j}]", problems) for j, s in enumerate(sched)]
    else:
        parts = [_schedule(sched, "schedules", problems)] * max(L, 1)
    schedules = ScheduleSpec(tuple(parts)) if all(parts) and L else None

    convergence = raw["convergence_run"]
    if convergence is None:
        convergence = raw["kind"] == "train-mf"
    if convergence and schedules is not None and not schedules.layers[-1].is_identically(1.0):
        problems.append("convergence runs require the output-layer schedule xi_L == 1")

    data = None
    dcfg = raw["data"]
    try:
        if dcfg["source"] == "finite-dataset":
            if dcfg["x"] is None or dcfg["y"] is None:
                raise ConfigurationError("finite-dataset needs x and y")
            data = DataModel.finite(dcfg["x"], dcfg["y"])
            if len(data.y) == 0:
                raise ConfigurationError("finite-dataset is empty")
        else:
            panel_seed = raw["seed"] if dcfg["panel_seed"] is None else dcfg["panel_seed"]
            data = DataModel.teacher(dcfg["coef"], target=dcfg["target"], input_law=dcfg["input_law"],
                                     input_scale=float(dcfg["input_scale"]), noise=float(dcfg["noise"]),
                                     panel_size=int(dcfg["panel_size"]), panel_seed=int(panel_seed))
        if arch is not None and data.input_dim != arch.d:
            problems.append(f"data input dimension {data.input_dim} differs from arch.d={arch.d}")
    except (MflabError, TypeError, ValueError) as exc:
        problems.append(f"data: {exc}")

    e = raw["embedding"]
    if e["scheme"] not in ("bidiverse", "pseudo-iid"):
        problems.append(f"embedding.scheme must be bidiverse or pseudo-iid, got {e['scheme']!r}")
    if not isinstance(e["latent_dim"], int) or e["latent_dim"] < 1:
        problems.append("embedding.latent_dim must be a positive integer")
    elif arch is not None and e["scheme"] == "bidiverse" and e["latent_dim"] < arch.d:
        problems.append("embedding.latent_dim must be at least arch.d for the bidiverse scheme")
    if not isinstance(e["n_features"], int) or e["n_features"] < 1:
        problems.append("embedding.n_features must be a positive integer")

    s = raw["sgd"]
    if not _num(s["eps"]) or s["eps"] <= 0:
        problems.append("sgd.eps must be positive")
    if not isinstance(s["steps"], int) or s["steps"] < 0:
        problems.append("sgd.steps must be a nonnegative integer")
    if s["mode"] not in ("sgd", "full-batch"):
        problems.append("sgd.mode must be sgd or full-batch")
    if not isinstance(s["log_every"], int) or s["log_every"] < 1:
        problems.append("sgd.log_every must be a positive integer")

    g = raw["integration"]
    if not _num(g["h"]) or g["h"] <= 0:
        problems.append("integration.h must be positive")
    if not _num(g["T"]) or g["T"] < 0:
        problems.append("integration.T must be nonnegative")
    elif _num(g["h"]) and g["h"] > 0 and abs(round(g["T"] / g["h"]) * g["h"] - g["T"]) > 1e-9 * max(1, g["T"]):
        problems.append("integration.T must be a multiple of integration.h")
    if g["scheme"] not in ("euler", "rk4"):
        problems.append("integration.scheme must be euler or rk4")
    if not isinstance(g["checkpoint_every"], int) or g["checkpoint_every"] < 1:
        problems.append("integration.checkpoint_every must be a positive integer")

    if raw["kind"] == "couple" and not any(p.startswith(("sgd", "integration")) for p in problems):
        if abs(s["steps"] * s["eps"] - g["T"]) > 1e-9 * max(1, g["T"]):
            problems.append("couple: sgd.steps * sgd.eps must equal integration.T")
        ratio = (s["log_every"] * s["eps"]) / (g["checkpoint_every"] * g["h"])
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            problems.append("couple: finite snapshot spacing must be a multiple of the MF checkpoint spacing")
    if raw["coupling"]["reference"] not in ("nested", "tracer"):
        problems.append("coupling.reference must be nested or tracer")
    ref = raw["coupling"]["reference_size"]
    if ref is not None and (not isinstance(ref, int) or ref < 1):
        problems.append("coupling.reference_size must be a positive integer or null")

    dv = raw["diversity"]
    if dv["layers"] is not None and L:
        if not isinstance(dv["layers"], list) or not all(isinstance(i, int) and 1 <= i <= L - 1 for i in dv["layers"]):
            problems.append(f"diversity.layers must be integers in 1..{L - 1}")
    if not isinstance(dv["probes"], int) or dv["probes"] < 1:
        problems.append("diversity.probes must be a positive integer")

    gc = raw["grad_check"]
    if not _num(gc["h"]) or gc["h"] <= 0:
        problems.append("grad_check.h must be positive")
    if not isinstance(gc["instances"], int) or gc["instances"] < 1:
        problems.append("grad_check.instances must be a positive integer")

    if problems:
        raise ConfigError(problems)
    raw["convergence_run"] = bool(convergence)
    return ExperimentConfig(raw, arch, loss, schedules, data)


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def load_config(path, kind: str | None = None) -> ExperimentConfig:
    """Read a config file; a run manifest is accepted too (its ``config`` entry is used)."""
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    if isinstance(obj, dict) and obj.get("manifest") is True:
        obj = obj["config"]
    return parse_config(obj, kind)
