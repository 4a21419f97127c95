"""Instance normalization, windowing, CSV ingestion and synthetic signals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CSV_HEADER = ("series_id", "timestamp", "value")
SCALE_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed input data."""


@dataclass
class RawSeries:
    series_id: str
    values: np.ndarray
    granularity: str = ""
    timestamps: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise DataError(f"series {self.series_id!r}: values must be a nonempty 1-d array")
        if not np.isfinite(self.values).all():
            raise DataError(f"series {self.series_id!r}: non-finite values")

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class SeriesWindow:
    context: np.ndarray
    target: np.ndarray
    offset: int = 0
    series_id: str = ""


@dataclass
class RevInParams:
    affine_scale: float | Tensor = 1.0
    affine_shift: float | Tensor = 0.0
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("RevIN eps must be positive")


@dataclass(frozen=True)
class RevInStats:
    mean: float
    var: float

    def std(self, eps: float) -> float:
        return math.sqrt(self.var + eps)


def _value(x) -> float:
    return float(x.data.reshape(-1)[0]) if isinstance(x, Tensor) else float(x)


def instance_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean and population variance over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    dev = x - mean
    return mean, (dev * dev).mean(axis=-1, keepdims=True)


def revin_apply(z: np.ndarray, scale: Tensor, shift: Tensor) -> Tensor:
    """``scale * z + shift`` for standardized rows ``z`` (..., T); differentiable in the affine."""
    length = z.shape[-1]
    return T.add(T.mul(T.tensor(z), T.broadcast_to(scale, (length,))),
                 T.broadcast_to(shift, (length,)))


def revin_normalize(x, p: RevInParams) -> tuple[np.ndarray, RevInStats]:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("revin_normalize: empty input")
    mean, var = instance_stats(x)
    stats = RevInStats(float(mean[0]), float(var[0]))
    z = (x - mean) / np.sqrt(var + p.eps)
    scale = p.affine_scale if isinstance(p.affine_scale, Tensor) else T.tensor(p.affine_scale)
    shift = p.affine_shift if isinstance(p.affine_shift, Tensor) else T.tensor(p.affine_shift)
    with T.no_grad():
        out = revin_apply(z, scale, shift)
    return out.data.copy(), stats


def revin_denormalize(y, p: RevInParams, stats: RevInStats) -> np.ndarray:
    scale = _value(p.affine_scale)
    if abs(scale) < SCALE_FLOOR:
        raise DataError(f"revin_denormalize: |affine_scale| = {abs(scale):.3g} below {SCALE_FLOOR}")
    y = np.asarray(y, dtype=np.float64)
    return stats.std(p.eps) * (y - _value(p.affine_shift)) / scale + stats.mean


def make_windows(s: RawSeries, T_x: int, T_y: int, stride: int = 1) -> list[SeriesWindow]:
    if T_x < 1 or T_y < 1:
        raise ValueError("T_x and T_y must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = len(s.values)
    need = T_x + T_y
    if n < need:
        raise DataError(f"series {s.series_id!r} has {n} points; windows need at least {need}")
    count = (n - need) // stride + 1
    out = []
    for i in range(count):
        o = i * stride
        out.append(SeriesWindow(s.values[o:o + T_x].copy(), s.values[o + T_x:o + need].copy(),
                                offset=o, series_id=s.series_id))
    return out


def load_csv(path) -> list[RawSeries]:
    """Read ``series_id,timestamp,value`` rows; one series per id, rows in file order."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = tuple(c.strip() for c in rows[0])
    if header != CSV_HEADER:
        raise DataError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
    values: dict[str, list[float]] = {}
    stamps: dict[str, list[str]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise DataError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
        sid, ts, raw = row
        if not sid:
            raise DataError(f"{path}: line {lineno}: empty series_id")
        try:
            v = float(raw)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: unparseable value {raw!r}") from None
        if not math.isfinite(v):
            raise DataError(f"{path}: line {lineno}: non-finite value {raw!r}")
        values.setdefault(sid, []).append(v)
        stamps.setdefault(sid, []).append(ts)
    if not values:
        raise DataError(f"{path}: no data rows")
    return [RawSeries(sid, np.array(v), timestamps=stamps[sid]) for sid, v in values.items()]


def write_csv(series: list[RawSeries], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in series:
            stamps = s.timestamps or [str(i) for i in range(len(s.values))]
            for ts, v in zip(stamps, s.values):
                w.writerow((s.series_id, ts, repr(float(v))))


def synth_composite(
    freqs_hz,
    amps,
    sample_rate_hz: float,
    n: int,
    noise_std: float = 0.0,
    seed: int = 0,
    series_id: str = "synth",
) -> RawSeries:
    freqs = np.asarray(freqs_hz, dtype=np.float64).reshape(-1)
    amps = np.asarray(amps, dtype=np.float64).reshape(-1)
    if freqs.size != amps.size:
        raise ValueError(f"{freqs.size} frequencies but {amps.size} amplitudes")
    if n < 1:
        raise ValueError("n must be >= 1")
    nyquist = sample_rate_hz / 2.0
    for f in freqs:
        if f >= nyquist:
            raise ValueError(f"frequency {f} Hz is at or above Nyquist ({nyquist} Hz)")
    t = np.arange(n, dtype=np.float64)
    values = np.zeros(n)
    for f, a in zip(freqs, amps):
        values += a * np.sin(2.0 * np.pi * f * t / sample_rate_hz)
    if noise_std > 0:
        values += np.random.default_rng(seed).normal(0.0, noise_std, size=n)
    return RawSeries(series_id, values, granularity=f"{sample_rate_hz:g}Hz")
