"""Forecast metrics, hidden-state spectra, the FTC/feed-forward ablation and timing."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import ConfigError, ModelConfig, MoFETime, context_stats
from .objective import LossConfig
from .preprocess import RawSeries, SeriesWindow, make_windows
from .trainer import TrainConfig, train

SPACES = ("normalized", "original-units")


@dataclass(frozen=True)
class MetricReport:
    mse: float
    mae: float
    horizon: int
    space: str = "original-units"

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "space": self.space, "horizon": self.horizon}


def mse_mae(y, y_hat, space: str = "original-units") -> MetricReport:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("mse_mae: empty input")
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}")
    err = y_hat - y
    horizon = y.shape[-1] if y.ndim else 1
    return MetricReport(float(np.mean(err * err)), float(np.mean(np.abs(err))), horizon, space)


def evaluate(model: MoFETime, windows: Sequence[SeriesWindow]) -> dict[str, MetricReport]:
    """Roll out every window's horizon; metrics in per-window standardized and raw units."""
    if not windows:
        raise ValueError("evaluate: no windows")
    horizon = windows[0].target.size
    ctx = np.stack([w.context for w in windows])
    truth = np.stack([w.target for w in windows])
    pred = model.forecast_batch(ctx, horizon)
    stats = [context_stats(c, model.cfg) for c in ctx]
    eps = model.cfg.revin_eps if model.cfg.revin else 0.0
    mean = np.array([[s.mean] for s in stats])
    std = np.array([[np.sqrt(s.var + eps)] for s in stats])
    return {
        "normalized": mse_mae((truth - mean) / std, (pred - mean) / std, "normalized"),
        "original-units": mse_mae(truth, pred, "original-units"),
    }


# ---------------------------------------------------------------- spectra

@dataclass
class SpectralReport:
    bin_freqs_hz: np.ndarray
    energy: np.ndarray
    peaks: list[tuple[float, float]]
    length: int

    @property
    def bin_width_hz(self) -> float:
        return float(self.bin_freqs_hz[1] - self.bin_freqs_hz[0]) if self.bin_freqs_hz.size > 1 else 0.0

    def total_energy(self) -> float:
        """Time-domain energy implied by the one-sided spectrum (Parseval)."""
        w = np.full(self.energy.size, 2.0)
        w[0] = 1.0
        if self.length % 2 == 0:
            w[-1] = 1.0
        return float((w * self.energy).sum() / self.length)

    def to_dict(self) -> dict:
        return {
            "bin_hz": self.bin_freqs_hz.tolist(),
            "energy": self.energy.tolist(),
            "peaks": [[f, e] for f, e in self.peaks],
            "length": self.length,
        }


def find_peaks(energy: np.ndarray, rel_floor: float = 1e-12) -> list[int]:
    """Local maxima over bins 1..end ranked by energy; DC never qualifies."""
    e = np.asarray(energy)
    floor = rel_floor * float(e.max()) if e.size else 0.0
    found = []
    for k in range(1, e.size):
        left = e[k - 1] if k > 1 else -np.inf
        right = e[k + 1] if k + 1 < e.size else -np.inf
        if e[k] > left and e[k] >= right and e[k] > floor:
            found.append(k)
    return sorted(found, key=lambda k: (-e[k], k))


def hidden_spectrum(hidden, sample_rate_hz: float) -> SpectralReport:
    """Channel-mean squared DFT magnitude along time of a (T, h) capture."""
    x = np.asarray(hidden, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    T_len = x.shape[0]
    if T_len < 4:
        raise ValueError("hidden_spectrum needs at least 4 time steps")
    spec = np.fft.rfft(x, axis=0)
    energy = (spec.real ** 2 + spec.imag ** 2).mean(axis=1)
    freqs = np.arange(energy.size) * sample_rate_hz / T_len
    peaks = [(float(freqs[k]), float(energy[k])) for k in find_peaks(energy)]
    return SpectralReport(freqs, energy, peaks, T_len)


def peak_alignment(report: SpectralReport, truth_freqs: Sequence[float]) -> float | None:
    """Fraction of ``truth_freqs`` within one bin of a top-``len(truth_freqs)`` peak."""
    if not len(truth_freqs):
        return None
    top = [f for f, _ in report.peaks[:len(truth_freqs)]]
    tol = report.bin_width_hz * (1 + 1e-9)
    hits = sum(any(abs(f - t) <= tol for f in top) for t in truth_freqs)
    return hits / len(truth_freqs)


def heldout_window(signal: RawSeries, T_x: int, T_y: int) -> SeriesWindow:
    """The final context/target pair of ``signal``."""
    return make_windows(RawSeries(signal.series_id, signal.values[-(T_x + T_y):]), T_x, T_y)[0]


def last_layer_spectrum(model: MoFETime, context, sample_rate_hz: float) -> SpectralReport:
    hidden = model.forward(np.asarray(context), capture=True).hidden
    return hidden_spectrum(hidden[-1], sample_rate_hz)


@dataclass
class ArmReport:
    spectrum: SpectralReport
    metrics: dict[str, MetricReport]
    alignment: float | None

    def to_dict(self) -> dict:
        return {
            "spectrum": self.spectrum.to_dict(),
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "alignment": self.alignment,
        }


@dataclass
class ComparisonReport:
    truth_freqs: list[float]
    sample_rate_hz: float
    arms: dict[str, ArmReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"truth_freqs": list(self.truth_freqs), "sample_rate_hz": self.sample_rate_hz,
                "arms": {k: v.to_dict() for k, v in self.arms.items()}}


def check_ablation_pair(cfg_ftc: ModelConfig, cfg_ffn: ModelConfig) -> None:
    extra = [f for f in cfg_ftc.diff(cfg_ffn) if f != "ftc"]
    if extra:
        raise ConfigError(extra[0], "ablation arms may differ only in the ftc flag")


def spectral_experiment(model_ftc: MoFETime, model_ffn: MoFETime, signal: RawSeries,
                        truth_freqs: Sequence[float], T_x: int, T_y: int,
                        sample_rate_hz: float) -> ComparisonReport:
    """Spectra and forecast metrics of both arms on the held-out tail of ``signal``."""
    check_ablation_pair(model_ftc.cfg, model_ffn.cfg)
    window = heldout_window(signal, T_x, T_y)
    report = ComparisonReport([float(f) for f in truth_freqs], float(sample_rate_hz))
    for name, model in (("ftc", model_ftc), ("ffn", model_ffn)):
        spec = last_layer_spectrum(model, window.context, sample_rate_hz)
        report.arms[name] = ArmReport(spec, evaluate(model, [window]), peak_alignment(spec, truth_freqs))
    return report


@dataclass
class AblationResult:
    models: dict[str, MoFETime]
    validation: dict[str, dict[str, MetricReport]]


def run_ablation(base: ModelConfig, train_windows: Sequence[SeriesWindow],
                 val_windows: Sequence[SeriesWindow], tcfg: TrainConfig,
                 lcfg: LossConfig) -> AblationResult:
    """Train the FTC and feed-forward arms on identical data, seeds and schedule."""
    models, val = {}, {}
    for name, flag in (("ftc", True), ("ffn", False)):
        cfg = replace(base, ftc=flag)
        model = MoFETime.init(cfg, tcfg.seed)
        train(model, train_windows, tcfg, lcfg)
        models[name] = model
        val[name] = evaluate(model, val_windows)
    return AblationResult(models, val)


# ---------------------------------------------------------------- timing

def time_inference(model: MoFETime, context_lengths: Sequence[int], repeats: int = 5,
                   horizon: int = 4, seed: int = 0) -> list[dict]:
    """Wall-clock seconds per generated point: median and p90 over repeats after a warm-up."""
    if repeats < 3:
        raise ValueError("time_inference needs repeats >= 3")
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=1):
        for n in context_lengths:
            ctx = np.sin(2 * np.pi * np.arange(n) / 16.0) + 0.1 * rng.standard_normal(n)
            per_point = []
            for r in range(repeats + 1):
                t0 = time.perf_counter()
                model.forecast(ctx, horizon)
                if r:
                    per_point.append((time.perf_counter() - t0) / horizon)
            rows.append({"context_length": int(n),
                         "median_s": float(np.median(per_point)),
                         "p90_s": float(np.percentile(per_point, 90))})
    return rows


# ---------------------------------------------------------------- emitters

def to_json(obj) -> str:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_spectrum_csv(report: SpectralReport, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_hz", "energy"))
        for f, e in zip(report.bin_freqs_hz, report.energy):
            w.writerow((repr(float(f)), repr(float(e))))


def write_metrics_csv(metrics: dict[str, MetricReport] | Sequence[MetricReport], path) -> None:
    items = metrics.values() if isinstance(metrics, dict) else metrics
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "value"))
        for m in items:
            w.writerow((f"{m.space}.mse", repr(m.mse)))
            w.writerow((f"{m.space}.mae", repr(m.mae)))
