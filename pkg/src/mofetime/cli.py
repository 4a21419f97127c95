"""``mofetime <command> config.json [--set path=value ...] [--out dir]``.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .backbone import ConfigError, MoFETime
from .checkpoint import ConfigMismatchError, canonical_json, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, load_series, split_windows
from .preprocess import write_csv
from .trainer import TrainingLog, finetune, grad_check, train

COMMANDS = ("synth", "pretrain", "finetune", "forecast", "eval", "spectrum", "gradcheck")
CHECKPOINT_NAME = "model.ckpt"

log = logging.getLogger("mofetime")


class UsageError(Exception):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def make_run_dir(root: Path, cfg: ExperimentConfig) -> Path:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    base = root / f"{cfg.digest()}-{stamp}"
    run, k = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}.{k}")
        k += 1
    run.mkdir(parents=True)
    (run / "effective-config.json").write_text(cfg.canonical() + "\n", encoding="utf-8")
    return run


def _write_json(path: Path, obj) -> None:
    path.write_text(analysis.to_json(obj), encoding="utf-8")


def _write_metrics(run: Path, metrics: dict, name: str = "metrics") -> None:
    _write_json(run / f"{name}.json", [m.to_dict() for m in metrics.values()])
    analysis.write_metrics_csv(metrics, run / f"{name}.csv")


def _write_log(run: Path, tlog: TrainingLog) -> None:
    rows = tlog.to_rows()
    with (run / "train-log.csv").open("w", encoding="utf-8", newline="") as fh:
        cols = list(rows[0]) if rows else ["step", "lr", "ar_loss", "total"]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def _checkpoint_path(value: str | None, field: str = "checkpoint") -> Path:
    if value is None:
        raise UsageError(field, "this command needs a checkpoint path")
    p = Path(value)
    if not p.exists():
        raise UsageError(field, f"no such file: {p}")
    return p


def _model(cfg: ExperimentConfig, field: str = "checkpoint", value: str | None = None) -> MoFETime:
    value = cfg.checkpoint if field == "checkpoint" else value
    return load_checkpoint(_checkpoint_path(value, field), expected=cfg.model).to_model()


def _splits(cfg: ExperimentConfig):
    series = load_series(cfg.data, cfg.seed)
    return series, split_windows(series, cfg.data)


def _eval_windows(splits: dict, prefer=("test", "val")):
    for name in prefer:
        if splits[name]:
            return splits[name]
    raise UsageError("data.split", "no evaluation windows: give val or test a non-zero fraction "
                                   "long enough for T_x + T_y points")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: ExperimentConfig, run: Path) -> None:
    if "synth" not in cfg.data.source:
        raise UsageError("data.source", "synth needs a synthetic source")
    write_csv(load_series(cfg.data, cfg.seed), run / "data.csv")


def _fit(cfg: ExperimentConfig, run: Path, model: MoFETime, tlog: TrainingLog, splits: dict) -> None:
    save_checkpoint(model, run / CHECKPOINT_NAME, rng_state=tlog.rng_state, step=len(tlog))
    _write_log(run, tlog)
    if splits["val"]:
        _write_metrics(run, analysis.evaluate(model, splits["val"]))


def cmd_pretrain(cfg: ExperimentConfig, run: Path) -> None:
    _, splits = _splits(cfg)
    if not splits["train"]:
        raise UsageError("data.split.train", "no training windows")
    model = MoFETime.init(cfg.model, cfg.seed)
    tlog = train(model, splits["train"], cfg.train, cfg.loss)
    _fit(cfg, run, model, tlog, splits)


def cmd_finetune(cfg: ExperimentConfig, run: Path) -> None:
    _, splits = _splits(cfg)
    if not splits["train"]:
        raise UsageError("data.split.train", "no training windows")
    model, tlog = finetune(_checkpoint_path(cfg.checkpoint), splits["train"], cfg.train, cfg.loss,
                           expected=cfg.model)
    _fit(cfg, run, model, tlog, splits)


def cmd_forecast(cfg: ExperimentConfig, run: Path) -> None:
    model = _model(cfg)
    series = load_series(cfg.data, cfg.seed)
    with (run / "forecast.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("series_id", "timestamp", "value"))
        for s in series:
            if len(s) < cfg.data.T_x:
                raise UsageError("data.T_x", f"series {s.series_id!r} is shorter than T_x")
            pred = model.forecast(s.values[-cfg.data.T_x:], cfg.data.T_y)
            for k, v in enumerate(pred):
                w.writerow((s.series_id, str(len(s) + k), repr(float(v))))


def cmd_eval(cfg: ExperimentConfig, run: Path) -> None:
    model = _model(cfg)
    _, splits = _splits(cfg)
    _write_metrics(run, analysis.evaluate(model, _eval_windows(splits)))


def cmd_spectrum(cfg: ExperimentConfig, run: Path) -> None:
    model = _model(cfg)
    series = load_series(cfg.data, cfg.seed)
    signal = series[0]
    rate = cfg.spectrum["sample_rate_hz"]
    truth = cfg.spectrum["truth_freqs"]
    window = analysis.heldout_window(signal, cfg.data.T_x, cfg.data.T_y)
    report = analysis.last_layer_spectrum(model, window.context, rate)
    analysis.write_spectrum_csv(report, run / "spectrum.csv")
    _write_json(run / "spectrum.json", {**report.to_dict(), "alignment": analysis.peak_alignment(report, truth),
                                        "truth_freqs": truth, "series_id": signal.series_id})
    if cfg.spectrum["compare"] is not None:
        other = _model(cfg, "spectrum.compare", cfg.spectrum["compare"])
        pair = (model, other) if model.cfg.ftc else (other, model)
        comp = analysis.spectral_experiment(pair[0], pair[1], signal, truth, cfg.data.T_x, cfg.data.T_y, rate)
        _write_json(run / "comparison.json", comp)
        analysis.write_spectrum_csv(comp.arms["ffn"].spectrum, run / "spectrum-ffn.csv")


def cmd_gradcheck(cfg: ExperimentConfig, run: Path) -> None:
    model = _model(cfg) if cfg.checkpoint is not None else MoFETime.init(cfg.model, cfg.seed)
    _, splits = _splits(cfg)
    if not splits["train"]:
        raise UsageError("data.split.train", "no training windows")
    gc = cfg.gradcheck
    rep = grad_check(model, splits["train"][0], tolerance=gc["tolerance"], samples=gc["samples"],
                     step=gc["step"], lcfg=cfg.loss, seed=cfg.seed)
    _write_json(run / "gradcheck.json", rep)
    if not rep.passed:
        raise RuntimeError(f"gradient check failed: max relative error {rep.max_error:.3g} "
                           f">= {rep.tolerance:g} at {rep.worst[0]}")


HANDLERS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "forecast": cmd_forecast, "eval": cmd_eval, "spectrum": cmd_spectrum, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mofetime", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config field, e.g. train.lr=1e-4 (repeatable)")
    p.add_argument("--out", default="runs", help="directory that receives run directories")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    phase = "finetune" if args.command == "finetune" else "pretrain"
    try:
        cfg = load_config(args.config, args.overrides, phase)
        run = make_run_dir(Path(args.out), cfg)
        HANDLERS[args.command](cfg, run)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfigMismatchError as exc:
        print(f"config error: checkpoint differs in {', '.join('model.' + f for f in exc.fields)}",
              file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to status 1
        origin = type(exc).__module__
        print(f"error ({origin}): {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
