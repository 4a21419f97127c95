"""Training loop, learning-rate schedule, finetuning and gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .backbone import (ConfigError, ModelConfig, MoFETime, context_moments, forward_normalized,
                       normalize_input, standardize_predictions)
from .checkpoint import Checkpoint, ConfigMismatchError, load_checkpoint
from .objective import LossBreakdown, LossConfig, combined_loss
from .optim import AdamWState, adamw_step
from .preprocess import SeriesWindow

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune")
_PHASE_DEFAULTS = {
    "pretrain": {"lr": 1e-3, "warmup_fraction": 0.1},
    "finetune": {"lr": 5e-6, "warmup_fraction": 0.0},
}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, component: str):
        self.step = step
        self.component = component
        super().__init__(f"non-finite {component} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    steps: int = 100
    batch_size: int = 2
    seed: int = 0
    phase: str = "pretrain"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError("phase", f"must be one of {PHASES}, got {self.phase!r}")
        if self.lr < 0:
            raise ConfigError("lr", "must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction", "must lie in [0, 1]")
        if isinstance(self.steps, bool) or not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError("steps", "must be a non-negative integer")
        if isinstance(self.batch_size, bool) or not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size", "must be a positive integer")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1", "betas must lie in [0, 1)")

    @classmethod
    def for_phase(cls, phase: str = "pretrain", **overrides) -> "TrainConfig":
        if phase not in PHASES:
            raise ConfigError("phase", f"must be one of {PHASES}, got {phase!r}")
        return cls(**{**_PHASE_DEFAULTS[phase], "phase": phase, **overrides})

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown train config field")
        d = dict(d)
        return cls.for_phase(d.pop("phase", "pretrain"), **d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 over the first ``warmup_fraction * steps`` steps, then flat."""
    warm = cfg.warmup_fraction * cfg.steps
    if warm > 0 and step < warm:
        return cfg.lr * step / warm
    return cfg.lr


@dataclass
class StepRecord:
    step: int
    lr: float
    ar_loss: float
    aux_loss: list[float]
    total: float
    dispatch_fraction: list[list[float]]


@dataclass
class TrainingLog:
    records: list[StepRecord] = field(default_factory=list)
    rng_state: dict | None = None

    def __len__(self) -> int:
        return len(self.records)

    def ar_losses(self) -> np.ndarray:
        return np.array([r.ar_loss for r in self.records])

    def to_rows(self) -> list[dict]:
        rows = []
        for r in self.records:
            row = {"step": r.step, "lr": r.lr, "ar_loss": r.ar_loss, "total": r.total}
            for layer, a in enumerate(r.aux_loss):
                row[f"aux_loss.{layer}"] = a
            rows.append(row)
        return rows


def window_batch(windows: Sequence[SeriesWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack contexts (B, T_x) and their next-point raw targets (B, T_x)."""
    ctx = np.stack([w.context for w in windows])
    nxt = np.stack([np.concatenate([w.context[1:], w.target[:1]]) for w in windows])
    return ctx, nxt


def batch_loss(model: MoFETime, contexts: np.ndarray, next_values: np.ndarray,
               lcfg: LossConfig) -> tuple[LossBreakdown, list]:
    """Dense next-point loss in per-window standardized units."""
    cfg = model.cfg
    mean, std = context_moments(contexts, cfg)
    xin = normalize_input(contexts, mean, std, cfg, model.params)
    preds, stats, _ = forward_normalized(xin, cfg, model.params)
    targets = (next_values - mean) / std
    loss = combined_loss(targets, standardize_predictions(preds, cfg, model.params), stats, lcfg)
    return loss, stats


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    while True:
        picked = []
        while len(picked) < batch_size:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            take = min(batch_size - len(picked), n - pos)
            picked.extend(order[pos:pos + take].tolist())
            pos += take
        yield picked


def train(model: MoFETime, windows: Sequence[SeriesWindow], tcfg: TrainConfig, lcfg: LossConfig,
          state: AdamWState | None = None, rng: np.random.Generator | None = None) -> TrainingLog:
    """Optimize ``model`` in place; one log record per step."""
    if not windows:
        raise ValueError("train: no windows")
    lengths = {(w.context.size, w.target.size) for w in windows}
    if len(lengths) != 1:
        raise ValueError(f"train: windows have mixed lengths {sorted(lengths)}")
    rng = rng if rng is not None else np.random.default_rng(tcfg.seed)
    state = state if state is not None else AdamWState()
    params = model.params
    out = TrainingLog()
    batches = _batches(len(windows), tcfg.batch_size, rng)
    for step in range(tcfg.steps):
        ctx, nxt = window_batch([windows[i] for i in next(batches)])
        params.zero_grad()
        try:
            loss, stats = batch_loss(model, ctx, nxt, lcfg)
        except T.NonFiniteError as exc:
            raise TrainingDivergedError(step, exc.op) from exc
        vals = loss.values()
        for comp in ("ar_loss", "total"):
            if not math.isfinite(vals[comp]):
                raise TrainingDivergedError(step, comp)
        loss.total.backward()
        for name, p in params.items():
            if not np.isfinite(p.grad).all():
                raise TrainingDivergedError(step, f"gradient of {name}")
        lr = lr_schedule(step, tcfg)
        adamw_step(params, state, lr, tcfg.weight_decay, tcfg.beta1, tcfg.beta2, tcfg.eps)
        out.records.append(StepRecord(step, lr, vals["ar_loss"], vals["aux_loss"], vals["total"],
                                      [s.dispatch_fraction.tolist() for s in stats]))
        if step % 50 == 0 or step == tcfg.steps - 1:
            log.debug("step %d lr %.3g ar %.5f total %.5f", step, lr, vals["ar_loss"], vals["total"])
    out.rng_state = rng.bit_generator.state
    return out


def finetune(checkpoint, windows: Sequence[SeriesWindow], tcfg: TrainConfig, lcfg: LossConfig,
             expected: ModelConfig | None = None) -> tuple[MoFETime, TrainingLog]:
    """Continue training a pretrained checkpoint with fresh optimizer moments."""
    if tcfg.phase != "finetune":
        raise ConfigError("phase", "finetune requires phase='finetune'")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint, expected)
    if expected is not None and isinstance(checkpoint, Checkpoint):
        differing = expected.diff(ckpt.config)
        if differing:
            raise ConfigMismatchError(differing)
    model = ckpt.to_model()
    return model, train(model, windows, tcfg, lcfg)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    per_parameter: dict[str, float]
    max_error: float
    checked: int
    tolerance: float
    worst: tuple[str, int, float, float] | None = None  # name, flat index, analytic, numeric

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> dict:
        return {"per_parameter": self.per_parameter, "max_error": self.max_error,
                "checked": self.checked, "tolerance": self.tolerance, "passed": self.passed,
                "worst": list(self.worst) if self.worst else None}


def relative_error(analytic: float, numeric: float, zero_tol: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|)``; both below ``zero_tol`` counts as agreement."""
    denom = max(abs(analytic), abs(numeric))
    if denom < zero_tol:
        return 0.0
    return abs(analytic - numeric) / denom


def grad_check(model: MoFETime, window: SeriesWindow, tolerance: float = 1e-4,
               samples: int = 200, step: float = 1e-5, lcfg: LossConfig | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode grads of the combined loss with central differences.

    Entries are drawn from every parameter tensor in turn (names sorted) so each
    tensor is represented; at least ``samples`` entries are checked overall.
    """
    lcfg = lcfg or LossConfig()
    ctx, nxt = window_batch([window])
    params = model.params
    params.zero_grad()
    loss, _ = batch_loss(model, ctx, nxt, lcfg)
    loss.total.backward()

    def value() -> float:
        with T.no_grad():
            return batch_loss(model, ctx, nxt, lcfg)[0].total.item()

    rng = np.random.default_rng(seed)
    names = sorted(params)
    per_tensor = max(1, math.ceil(samples / len(names)))
    per_param: dict[str, float] = {}
    worst, worst_err, checked = None, 0.0, 0
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        err_max = 0.0
        for i in sorted(picks.tolist()):
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(p.grad.reshape(-1)[i])
            err = relative_error(analytic, numeric)
            checked += 1
            err_max = max(err_max, err)
            if worst is None or err > worst_err:
                worst, worst_err = (name, i, analytic, numeric), err
        per_param[name] = err_max
    return GradCheckReport(per_param, max(per_param.values()), checked, tolerance, worst)
