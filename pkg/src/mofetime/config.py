"""Experiment configuration: JSON file + dotted overrides -> validated, canonical settings."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .backbone import ConfigError, ModelConfig
from .checkpoint import canonical_json
from .objective import LossConfig
from .preprocess import RawSeries, SeriesWindow, load_csv, make_windows, synth_composite
from .trainer import TrainConfig

SYNTH_DEFAULTS = {"freqs": [4.0, 6.0, 8.0], "amps": [1.0, 1.0, 1.0], "rate": 64.0, "n": 512,
                  "noise_std": 0.0, "series_id": None}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model": ModelConfig().to_dict(),
    "train": {},  # filled per phase; see resolve()
    "loss": {"huber_delta": 1.0, "aux_weight": 0.02},
    "data": {
        "source": {"synth": dict(SYNTH_DEFAULTS)},
        "T_x": 64,
        "T_y": 16,
        "stride": 1,
        "split": {"train": 0.75, "val": 0.25, "test": 0.0},
    },
    "checkpoint": None,
    "spectrum": {"truth_freqs": [4.0, 6.0, 8.0], "sample_rate_hz": None, "compare": None},
    "gradcheck": {"samples": 200, "tolerance": 1e-4, "step": 1e-5},
}

_TRAIN_KEYS = set(TrainConfig().to_dict()) - {"seed"}
# subtrees that are replaced wholesale instead of merged key by key
_OPAQUE = {("data", "source")}


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        here = path + (k,)
        if here == ("train",):
            if not isinstance(v, dict):
                raise ConfigError("train", "must be an object")
            unknown = set(v) - _TRAIN_KEYS
            if "seed" in v:
                raise ConfigError("train.seed", "use the top-level seed")
            if unknown:
                raise ConfigError("train." + sorted(unknown)[0], "unknown field")
            out["train"] = {**out.get("train", {}), **v}
        elif k not in base:
            raise ConfigError(".".join(here), "unknown field")
        elif here in _OPAQUE:
            out[k] = copy.deepcopy(v)
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(".".join(here), "must be an object")
            out[k] = _merge(base[k], v, here)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``dotted.path=value`` override; the value is JSON when it parses as JSON."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like path=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(path, "empty path component")
    nested: Any = _parse_value(raw)
    for k in reversed(keys):
        nested = {k: nested}
    # overrides inside an opaque subtree update it in place rather than replacing it
    if len(keys) > 2 and tuple(keys[:2]) in _OPAQUE:
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(path, "unknown field")
            node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(path, "cannot set a field inside a non-object")
        out = copy.deepcopy(cfg)
        node = out
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = _parse_value(raw)
        return out
    return _merge(cfg, nested)


@dataclass(frozen=True)
class DataConfig:
    source: dict
    T_x: int
    T_y: int
    stride: int
    split: dict


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict  # the fully resolved tree, as echoed to effective-config.json
    seed: int
    model: ModelConfig
    train: TrainConfig
    loss: LossConfig
    data: DataConfig
    checkpoint: str | None
    spectrum: dict
    gradcheck: dict

    def canonical(self) -> str:
        return canonical_json(self.raw)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


def _int(v, path, minimum=1):
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(path, f"must be an integer >= {minimum}, got {v!r}")
    return v


def _num(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(path, f"must be a finite number, got {v!r}")
    return float(v)


def _sub(cls, d, prefix):
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except ConfigError as exc:
        raise ConfigError(f"{prefix}.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


def _synth_specs(source: dict) -> list[dict]:
    specs = source["synth"]
    specs = specs if isinstance(specs, list) else [specs]
    if not specs:
        raise ConfigError("data.source.synth", "needs at least one signal")
    out = []
    for i, s in enumerate(specs):
        path = f"data.source.synth[{i}]" if isinstance(source["synth"], list) else "data.source.synth"
        if not isinstance(s, dict):
            raise ConfigError(path, "must be an object")
        unknown = set(s) - set(SYNTH_DEFAULTS)
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
        full = {**SYNTH_DEFAULTS, **s}
        if full["series_id"] is None:
            full["series_id"] = f"synth{i}" if isinstance(source["synth"], list) else "synth"
        if not isinstance(full["freqs"], list) or not isinstance(full["amps"], list) \
                or len(full["freqs"]) != len(full["amps"]):
            raise ConfigError(f"{path}.amps", "freqs and amps must be lists of equal length")
        full["freqs"] = [_num(f, f"{path}.freqs") for f in full["freqs"]]
        full["amps"] = [_num(a, f"{path}.amps") for a in full["amps"]]
        full["rate"] = _num(full["rate"], f"{path}.rate")
        full["n"] = _int(full["n"], f"{path}.n")
        full["noise_std"] = _num(full["noise_std"], f"{path}.noise_std")
        if full["rate"] <= 0:
            raise ConfigError(f"{path}.rate", "must be positive")
        if any(f >= full["rate"] / 2 for f in full["freqs"]):
            raise ConfigError(f"{path}.freqs", "tones must lie below Nyquist")
        if full["noise_std"] < 0:
            raise ConfigError(f"{path}.noise_std", "must be non-negative")
        out.append(full)
    return out


def _resolve_source(source) -> dict:
    if not isinstance(source, dict) or len(source) != 1 or next(iter(source)) not in ("csv", "synth"):
        raise ConfigError("data.source", 'must be {"csv": path} or {"synth": spec or [specs]}')
    if "csv" in source:
        if not isinstance(source["csv"], str):
            raise ConfigError("data.source.csv", "must be a path string")
        return {"csv": source["csv"]}
    specs = _synth_specs(source)
    return {"synth": specs if isinstance(source["synth"], list) else specs[0]}


def resolve(tree: dict, phase: str = "pretrain") -> ExperimentConfig:
    """Validate a merged tree and fill phase-dependent training defaults."""
    tree = _merge(DEFAULTS, tree)
    seed = _int(tree["seed"], "seed", minimum=0)
    model = _sub(ModelConfig, tree["model"], "model")
    user_train = dict(tree["train"])
    if user_train.get("phase", phase) != phase:
        raise ConfigError("train.phase", f"this command runs the {phase!r} phase")
    user_train.pop("phase", None)
    try:
        train = TrainConfig.for_phase(phase, seed=seed, **user_train)
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
    except TypeError as exc:
        raise ConfigError("train", str(exc)) from exc
    loss = _sub(LossConfig, tree["loss"], "loss")

    d = tree["data"]
    source = _resolve_source(d["source"])
    T_x = _int(d["T_x"], "data.T_x")
    T_y = _int(d["T_y"], "data.T_y")
    stride = _int(d["stride"], "data.stride")
    split = d["split"]
    if not isinstance(split, dict) or set(split) - {"train", "val", "test"}:
        raise ConfigError("data.split", "keys must be among train, val, test")
    split = {k: _num(split.get(k, 0.0), f"data.split.{k}") for k in ("train", "val", "test")}
    if any(v < 0 for v in split.values()):
        raise ConfigError("data.split", "fractions must be non-negative")
    if abs(sum(split.values()) - 1.0) > 1e-9:
        raise ConfigError("data.split", f"fractions sum to {sum(split.values())}, not 1")

    spec = dict(tree["spectrum"])
    spec["truth_freqs"] = [_num(f, "spectrum.truth_freqs") for f in spec["truth_freqs"]]
    if spec["sample_rate_hz"] is None:
        first = source.get("synth")
        first = first[0] if isinstance(first, list) else first
        spec["sample_rate_hz"] = first["rate"] if first else 1.0
    spec["sample_rate_hz"] = _num(spec["sample_rate_hz"], "spectrum.sample_rate_hz")
    if spec["compare"] is not None and not isinstance(spec["compare"], str):
        raise ConfigError("spectrum.compare", "must be a checkpoint path or null")

    gc = dict(tree["gradcheck"])
    gc["samples"] = _int(gc["samples"], "gradcheck.samples")
    gc["tolerance"] = _num(gc["tolerance"], "gradcheck.tolerance")
    gc["step"] = _num(gc["step"], "gradcheck.step")

    ckpt = tree["checkpoint"]
    if ckpt is not None and not isinstance(ckpt, str):
        raise ConfigError("checkpoint", "must be a path string or null")

    train_dict = train.to_dict()
    train_dict.pop("seed")
    raw = {
        "seed": seed, "model": model.to_dict(), "train": train_dict,
        "loss": {"huber_delta": loss.huber_delta, "aux_weight": loss.aux_weight},
        "data": {"source": source, "T_x": T_x, "T_y": T_y, "stride": stride, "split": split},
        "checkpoint": ckpt, "spectrum": spec, "gradcheck": gc,
    }
    return ExperimentConfig(raw, seed, model, train, loss,
                            DataConfig(source, T_x, T_y, stride, split), ckpt, spec, gc)


def load_config(path, overrides=(), phase: str = "pretrain") -> ExperimentConfig:
    p = Path(path)
    try:
        tree = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError("config", f"no such file: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(tree, dict):
        raise ConfigError("config", "top level must be an object")
    tree = _merge(DEFAULTS, tree)
    for ov in overrides:
        tree = apply_override(tree, ov)
    return resolve(tree, phase)


# ---------------------------------------------------------------- data

def load_series(data: DataConfig, seed: int) -> list[RawSeries]:
    if "csv" in data.source:
        path = Path(data.source["csv"])
        if not path.exists():
            raise ConfigError("data.source.csv", f"no such file: {path}")
        return load_csv(path)
    specs = data.source["synth"]
    specs = specs if isinstance(specs, list) else [specs]
    out = []
    for i, s in enumerate(specs):
        noise_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out.append(synth_composite(s["freqs"], s["amps"], s["rate"], s["n"], s["noise_std"],
                                   noise_seed, s["series_id"]))
    return out


def split_windows(series: list[RawSeries], data: DataConfig) -> dict[str, list[SeriesWindow]]:
    """Chronological split per series.

    Validation and test windows borrow their context from the points just
    before their segment, so every target lies inside its own segment.
    """
    out: dict[str, list[SeriesWindow]] = {"train": [], "val": [], "test": []}
    need = data.T_x + data.T_y
    for s in series:
        n = len(s)
        n_tr = int(round(data.split["train"] * n))
        n_va = int(round(data.split["val"] * n))
        bounds = {"train": (0, n_tr), "val": (n_tr, n_tr + n_va), "test": (n_tr + n_va, n)}
        for name, (lo, hi) in bounds.items():
            if hi <= lo:
                continue
            start = lo if name == "train" else max(0, lo - data.T_x)
            seg = s.values[start:hi]
            if seg.size < need:
                continue
            for w in make_windows(RawSeries(s.series_id, seg), data.T_x, data.T_y, data.stride):
                out[name].append(SeriesWindow(w.context, w.target, w.offset + start, s.series_id))
    return out
