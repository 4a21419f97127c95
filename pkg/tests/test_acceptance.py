"""Acceptance criteria A1-A8 at their stated tolerances.

Each test prints one ``A<n> PASS|FAIL ...`` line; the terminal summary
repeats them.  Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from mofetime import tensor as T
from mofetime.analysis import heldout_window, last_layer_spectrum, peak_alignment, run_ablation
from mofetime.backbone import (ModelConfig, MoFETime, RouterParams, RoutingStats, expert_forward,
                               forward_normalized, ftc_frequency_branch, moe_layer, route)
from mofetime.checkpoint import load_checkpoint, save_checkpoint
from mofetime.cli import main as cli_main
from mofetime.objective import LossConfig, aux_load_balance, huber
from mofetime.preprocess import (RawSeries, RevInParams, SeriesWindow, make_windows,
                                 revin_denormalize, revin_normalize, synth_composite)
from mofetime.trainer import TrainConfig, grad_check, train

from conftest import record_acceptance

DESK = ModelConfig()  # h=64, L=2, H=4, N=8, K=2, m=64
SEEDS = range(5)

# shared recipe for the spectral and ablation analogs
RATE, LENGTH, T_X, T_Y = 64.0, 512, 64, 16
TRAIN_POINTS = 384
RECIPE = dict(steps=600, batch_size=8)


def _split(values):
    train_w = make_windows(RawSeries("s", values[:TRAIN_POINTS]), T_X, T_Y, 1)
    val_w = make_windows(RawSeries("s", values[TRAIN_POINTS - T_X:]), T_X, T_Y, 4)
    return train_w, val_w


def test_a1_gradient_fidelity():
    rng = np.random.default_rng(0)
    values = rng.standard_normal(48)
    window = SeriesWindow(values[:32], values[32:], 0, "noise")
    model = MoFETime.init(DESK, 0)
    t0 = time.perf_counter()
    rep = grad_check(model, window, tolerance=1e-4, samples=200)
    elapsed = time.perf_counter() - t0
    ok = rep.checked >= 200 and rep.max_error < 1e-4 and elapsed < 120
    record_acceptance("A1", ok, f"max_rel_err={rep.max_error:.2e} over {rep.checked} entries "
                                f"({len(rep.per_parameter)} tensors), {elapsed:.1f}s")
    assert ok


def test_a2_loss_oracles():
    uni = RoutingStats(np.full(4, 0.25), T.tensor(np.full(4, 0.25)), 8)
    col = RoutingStats(np.array([1.0, 0, 0, 0]), T.tensor(np.array([1.0, 0, 0, 0])), 8)
    vals = {
        "huber(0.5)": (huber([0.5], [0.0], 1.0), 0.125, 0.0),
        "huber(3)": (huber([3.0], [0.0], 1.0), 2.5, 0.0),
        "aux uniform": (aux_load_balance(uni).item(), 1.0, 1e-9),
        "aux collapsed": (aux_load_balance(col).item(), 4.0, 1e-9),
    }
    ok = all(abs(got - want) <= tol for got, want, tol in vals.values())
    record_acceptance("A2", ok, ", ".join(f"{k}={v[0]!r}" for k, v in vals.items()))
    assert ok


def test_a3_memorization():
    s = synth_composite([4.0], [1.0], RATE, 65)
    window = make_windows(RawSeries("sine", s.values), 64, 1, 1)
    t0 = time.perf_counter()
    model = MoFETime.init(DESK, 0)
    log = train(model, window, TrainConfig(steps=500, batch_size=1), LossConfig())
    elapsed = time.perf_counter() - t0
    first, last = log.ar_losses()[0], log.ar_losses()[-1]
    ok = last < 1e-2 and elapsed < 180
    record_acceptance("A3", ok, f"ar_loss {first:.4f} -> {last:.2e} after 500 steps, {elapsed:.1f}s")
    assert ok


def test_a4_spectral_recovery():
    truth = [4.0, 6.0, 8.0]
    sig = synth_composite(truth, [1.0, 1.0, 1.0], RATE, LENGTH)
    train_w, _ = _split(sig.values)
    window = heldout_window(sig, T_X, T_Y)
    t0 = time.perf_counter()
    hits, tops = 0, []
    for seed in SEEDS:
        model = MoFETime.init(DESK, seed)
        train(model, train_w, TrainConfig(seed=seed, **RECIPE), LossConfig())
        rep = last_layer_spectrum(model, window.context, RATE)
        score = peak_alignment(rep, truth)
        hits += score == 1.0
        tops.append([f for f, _ in rep.peaks[:3]])
    elapsed = time.perf_counter() - t0
    ok = hits >= 4 and elapsed < 900
    record_acceptance("A4", ok, f"{hits}/5 seeds with top-3 peaks on {{4,6,8}} Hz; "
                                f"top-3 per seed {tops}; {elapsed:.0f}s")
    assert ok


def test_a5_ftc_ablation_direction():
    sig = synth_composite([1.0, 2.0, 4.0, 8.0], [1.0] * 4, RATE, LENGTH)
    train_w, val_w = _split(sig.values)
    wins, pairs = 0, []
    for seed in SEEDS:
        res = run_ablation(DESK, train_w, val_w, TrainConfig(seed=seed, **RECIPE), LossConfig())
        ftc = res.validation["ftc"]["normalized"].mse
        ffn = res.validation["ffn"]["normalized"].mse
        wins += ftc < ffn
        pairs.append(f"{ftc:.3f}/{ffn:.3f}")
    ok = wins >= 4
    record_acceptance("A5", ok, f"FTC beats FFN in {wins}/5 seeds (val MSE ftc/ffn: {', '.join(pairs)})")
    assert ok


def _family():
    rng = np.random.default_rng(2024)
    out = []
    for i in range(20):
        f = rng.choice([1.0, 2.0, 3.0, 5.0, 6.0, 7.0, 8.0, 10.0], size=2, replace=False)
        a = rng.uniform(0.5, 1.5, size=2)
        out.append(synth_composite(f.tolist(), a.tolist(), RATE, 256, series_id=f"fam{i}"))
    return out


def test_a6_pretrain_finetune_transfer():
    fam_w = [w for s in _family() for w in make_windows(s, T_X, T_Y, 4)]
    target = synth_composite([4.5, 9.0], [1.0, 0.6], RATE, 256, series_id="heldout")
    tgt_w = make_windows(target, T_X, T_Y, 4)
    ft_cfg = lambda seed: TrainConfig.for_phase("finetune", steps=50, batch_size=4, seed=seed)
    rows, wins = [], 0
    for seed in SEEDS:
        pre = MoFETime.init(DESK, seed)
        train(pre, fam_w, TrainConfig(steps=300, batch_size=8, seed=seed), LossConfig())
        ft_log = train(pre.copy(), tgt_w, ft_cfg(seed), LossConfig())
        rnd_log = train(MoFETime.init(DESK, seed), tgt_w, ft_cfg(seed), LossConfig())
        a, b = ft_log.records[0].ar_loss, rnd_log.records[0].ar_loss
        wins += a < b
        rows.append(f"{a:.3f}<{b:.3f}" if a < b else f"{a:.3f}>={b:.3f}")
    ok = wins == 5
    record_acceptance("A6", ok, f"{wins}/5 seeds: initial finetune loss pretrained/random {', '.join(rows)}")
    assert ok


def test_a7_invariant_suites(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    checks = {}

    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(rng.integers(2, 128)) * rng.uniform(0.1, 50) + rng.uniform(-20, 20)
        p = RevInParams(rng.uniform(0.5, 2), rng.uniform(-1, 1))
        y, st = revin_normalize(x, p)
        worst = max(worst, float(np.max(np.abs(revin_denormalize(y, p, st) - x))))
    checks["revin round trip"] = (worst < 1e-9, f"{worst:.1e}")

    model = MoFETime.init(DESK, 1)
    x = rng.standard_normal((1, 48))
    drift = 0.0
    with T.no_grad():
        base = forward_normalized(T.tensor(x), DESK, model.params)[0].data
        for t in (0, 10, 30, 46):
            y = x.copy()
            y[0, t + 1:] += rng.standard_normal(47 - t)
            pert = forward_normalized(T.tensor(y), DESK, model.params)[0].data
            drift = max(drift, float(np.max(np.abs(pert[0, :t + 1] - base[0, :t + 1]))))
    no_revin = MoFETime.init(replace(DESK, revin=False), 1)
    v = rng.standard_normal(48)
    w = v.copy()
    w[20:] += 5.0
    drift = max(drift, float(np.max(np.abs(no_revin.forward(v).predictions.data[:20]
                                             - no_revin.forward(w).predictions.data[:20]))))
    checks["causality"] = (drift < 1e-12, f"{drift:.1e}")

    out = model.forward(rng.standard_normal(40))
    cons = max(max(abs(s.dispatch_fraction.sum() - 1), abs(s.mean_prob.data.sum() - 1)) for s in out.stats)
    checks["routing conservation"] = (cons < 1e-9, f"{cons:.1e}")

    experts = model.params.experts(0)
    gate = model.params.router(0).gate
    toks = T.tensor(rng.standard_normal((30, DESK.h)))
    sparse, _ = moe_layer(toks, RouterParams(gate, DESK.experts), experts)
    probs = route(toks, RouterParams(gate, DESK.experts)).probs.data
    with T.no_grad():
        dense = toks.data + sum(probs[:, [i]] * expert_forward(toks, e).data for i, e in enumerate(experts))
    eq = float(np.max(np.abs(sparse.data - dense)))
    checks["K=N sparse/dense"] = (eq < 1e-10, f"{eq:.1e}")

    big = T.tensor(rng.standard_normal((500, DESK.h)) * 100)
    bound = max(float(np.abs(ftc_frequency_branch(big, e).data).max()) for e in experts)
    checks["FTC bound"] = (bound <= math.sqrt(2) + 1e-12, f"{bound:.6f}")

    a = save_checkpoint(model, tmp_path / "a.ckpt", step=3)
    b = save_checkpoint(load_checkpoint(a).to_model(), tmp_path / "b.ckpt", step=3)
    checks["checkpoint bytes"] = (a.read_bytes() == b.read_bytes(), f"{a.stat().st_size} bytes")

    elapsed = time.perf_counter() - t0
    ok = all(v[0] for v in checks.values()) and elapsed < 600
    record_acceptance("A7", ok, "; ".join(f"{k} {'ok' if v[0] else 'FAILED'} ({v[1]})"
                                          for k, v in checks.items()) + f"; {elapsed:.1f}s")
    assert ok


COMMANDS = ("synth", "pretrain", "finetune", "forecast", "eval", "spectrum", "gradcheck")


def test_a8_cli_determinism(tmp_path, capsys):
    cfg = {
        "seed": 3,
        "model": {"h": 16, "layers": 2, "heads": 2, "experts": 4, "top_k": 2, "expert_width": 16},
        "train": {"steps": 10, "batch_size": 4},
        "data": {"source": {"synth": {"freqs": [4, 6, 8], "amps": [1, 1, 1], "n": 256, "noise_std": 0.1}},
                 "T_x": 32, "T_y": 8, "stride": 4, "split": {"train": 0.6, "val": 0.2, "test": 0.2}},
        "gradcheck": {"samples": 40},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))

    def run(cmd, out, extra=()):
        code = cli_main([cmd, str(path), "--out", str(out), *extra])
        return code, capsys.readouterr().out.strip()

    code, pre = run("pretrain", tmp_path / "seed-run")
    assert code == 0
    ck = [f'--set=checkpoint="{pre}/model.ckpt"']
    mismatched = []
    for cmd in COMMANDS:
        dirs = []
        for rep in range(2):
            code, rd = run(cmd, tmp_path / f"{cmd}-{rep}", ck if cmd not in ("synth", "pretrain") else ())
            assert code == 0, cmd
            dirs.append(rd)
        a, b = Path(dirs[0]), Path(dirs[1])
        for f in sorted(a.iterdir()):
            if f.read_bytes() != (b / f.name).read_bytes():
                mismatched.append(f"{cmd}/{f.name}")
    ok = not mismatched
    record_acceptance("A8", ok, f"{len(COMMANDS)} commands run twice, all artifacts byte-identical"
                      if ok else f"differing artifacts: {mismatched}")
    assert ok
