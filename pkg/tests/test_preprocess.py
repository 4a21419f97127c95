import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mofetime.preprocess import (DataError, RawSeries, RevInParams, RevInStats, load_csv,
                                 make_windows, revin_denormalize, revin_normalize, synth_composite,
                                 write_csv)


def test_revin_hand_example():
    out, stats = revin_normalize([1.0, 2.0, 3.0], RevInParams(1.0, 0.0, eps=1e-15))
    assert np.allclose(out, [-1.224745, 0.0, 1.224745], atol=1e-6)
    assert stats.mean == 2.0
    assert stats.var == pytest.approx(2 / 3, abs=1e-15)


def test_revin_constant_series():
    out, stats = revin_normalize([5.0, 5.0, 5.0], RevInParams())
    assert np.array_equal(out, np.zeros(3))
    assert stats.var == 0.0


def test_revin_affine_action(rng):
    x = rng.standard_normal(50)
    x = (x - x.mean()) / x.std()
    out, _ = revin_normalize(x, RevInParams(2.0, 1.0, eps=1e-15))
    assert np.allclose(out, 2 * x + 1, atol=1e-12)


def test_revin_empty_rejected():
    with pytest.raises(DataError):
        revin_normalize([], RevInParams())


def test_denormalize_center_maps_to_mean():
    p = RevInParams(1.7, 0.4)
    stats = RevInStats(mean=3.5, var=2.0)
    assert np.allclose(revin_denormalize([0.4, 0.4], p, stats), 3.5)


def test_denormalize_degenerate_variance():
    p = RevInParams(1.0, 0.0, eps=1e-5)
    out = revin_denormalize([0.0, 0.0], p, RevInStats(mean=5.0, var=0.0))
    assert np.allclose(out, 5.0)


def test_denormalize_scale_floor():
    with pytest.raises(DataError):
        revin_denormalize([1.0], RevInParams(1e-9, 0.0), RevInStats(0.0, 1.0))


@pytest.mark.parametrize("seed", range(100))
def test_revin_round_trip_random(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(rng.integers(2, 200)) * rng.uniform(0.1, 100) + rng.uniform(-50, 50)
    p = RevInParams(rng.uniform(0.5, 2.0), rng.uniform(-1, 1))
    y, stats = revin_normalize(x, p)
    assert np.max(np.abs(revin_denormalize(y, p, stats) - x)) < 1e-9


def _conditioning(vals, scale, shift):
    """Float64 error floor of the affine round trip: ulp(y) amplified by std / |scale|."""
    v = np.asarray(vals, dtype=float)
    std = np.sqrt(v.var() + 1e-5)
    z_max = np.max(np.abs(v - v.mean())) / std
    return np.finfo(float).eps * (abs(shift) + abs(scale) * z_max) * std / abs(scale) + np.finfo(float).eps * np.max(np.abs(v))


_vals = st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=64).filter(lambda v: np.var(v) > 1e-3)


@settings(max_examples=100, deadline=None)
@given(_vals, st.floats(1e-4, 1e4), st.floats(-1e3, 1e3))
def test_revin_round_trip_property(vals, scale, shift):
    assume(_conditioning(vals, scale, shift) < 1e-10)
    for sign in (1.0, -1.0):
        p = RevInParams(sign * scale, shift)
        y, stats = revin_normalize(vals, p)
        assert np.max(np.abs(revin_denormalize(y, p, stats) - np.array(vals))) < 1e-9


@settings(max_examples=100, deadline=None)
@given(_vals, st.floats(1e-4, 1e4), st.floats(-1e3, 1e3))
def test_revin_round_trip_within_conditioning(vals, scale, shift):
    # tiny scales with large shifts cannot beat the representable precision of y
    p = RevInParams(scale, shift)
    y, stats = revin_normalize(vals, p)
    err = np.max(np.abs(revin_denormalize(y, p, stats) - np.array(vals)))
    assert err <= 8 * _conditioning(vals, scale, shift) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=64))
def test_revin_standardized_moments(vals):
    eps = 1e-5
    y, stats = revin_normalize(vals, RevInParams(1.0, 0.0, eps=eps))
    assert abs(y.mean()) < 1e-10
    var = stats.var
    assert var / (var + eps) - 1e-12 <= y.var() <= 1 + 1e-12


def _enumerate_windows(n, T_x, T_y, stride):
    return [o for o in range(0, n) if o % stride == 0 and o + T_x + T_y <= n]


def test_make_windows_count():
    s = RawSeries("a", np.arange(10.0))
    wins = make_windows(s, 4, 2, 1)
    assert len(wins) == len(_enumerate_windows(10, 4, 2, 1)) == 5


@pytest.mark.parametrize("n,T_x,T_y,stride", [(6, 4, 2, 1), (10, 4, 2, 10), (37, 5, 3, 4), (100, 16, 8, 7)])
def test_make_windows_slices(n, T_x, T_y, stride):
    values = np.random.default_rng(n).standard_normal(n)
    wins = make_windows(RawSeries("a", values), T_x, T_y, stride)
    offsets = _enumerate_windows(n, T_x, T_y, stride)
    assert [w.offset for w in wins] == offsets
    assert len(wins) == (n - T_x - T_y) // stride + 1
    for w in wins:
        assert np.array_equal(np.concatenate([w.context, w.target]), values[w.offset:w.offset + T_x + T_y])


def test_make_windows_too_short():
    with pytest.raises(DataError, match="at least 7"):
        make_windows(RawSeries("a", np.arange(6.0)), 4, 3, 1)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_bytes(text.encode("utf-8"))
    return p


def test_load_csv_single_series(tmp_path):
    p = _write(tmp_path, "series_id,timestamp,value\na,t0,1.5\na,t1,2\na,t2,-3e-1\n")
    (s,) = load_csv(p)
    assert s.series_id == "a"
    assert np.array_equal(s.values, [1.5, 2.0, -0.3])


def test_load_csv_interleaved_preserves_order(tmp_path):
    rows = [("x", 1.0), ("y", 10.0), ("x", 2.0), ("x", 3.0), ("y", 20.0)]
    text = "series_id,timestamp,value\r\n" + "".join(f"{i},{k},{v}\r\n" for k, (i, v) in enumerate(rows))
    out = {s.series_id: s.values.tolist() for s in load_csv(_write(tmp_path, text))}
    expected = {}
    for sid, v in rows:
        expected.setdefault(sid, []).append(v)
    assert out == expected


def test_load_csv_bad_value_names_line(tmp_path):
    lines = ["series_id,timestamp,value"] + [f"a,{i},{i}" for i in range(5)] + ["a,5,abc"]
    with pytest.raises(DataError, match="line 7"):
        load_csv(_write(tmp_path, "\n".join(lines) + "\n"))


def test_load_csv_missing_header(tmp_path):
    with pytest.raises(DataError, match="header"):
        load_csv(_write(tmp_path, "a,0,1\na,1,2\n"))


def test_load_csv_empty(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_csv(_write(tmp_path, ""))


def test_csv_round_trip(tmp_path):
    s = synth_composite([1.0], [1.0], 16, 20, series_id="s1")
    write_csv([s], tmp_path / "o.csv")
    (back,) = load_csv(tmp_path / "o.csv")
    assert np.array_equal(back.values, s.values)


def test_synth_dft_bins():
    s = synth_composite([4, 6, 8], [1, 1, 1], 64, 512)
    energy = np.abs(np.fft.rfft(s.values)) ** 2
    top = set(np.argsort(energy)[-3:].tolist())
    assert top == {32, 48, 64}
    assert energy[[32, 48, 64]].sum() / energy.sum() > 1 - 1e-12


def test_synth_empty_sum():
    assert np.array_equal(synth_composite([], [], 10, 8).values, np.zeros(8))


def test_synth_deterministic():
    a = synth_composite([1, 2], [1, 0.5], 32, 100, noise_std=0.3, seed=7).values
    b = synth_composite([1, 2], [1, 0.5], 32, 100, noise_std=0.3, seed=7).values
    assert np.array_equal(a, b)


def test_synth_nyquist_rejected():
    with pytest.raises(ValueError, match="Nyquist"):
        synth_composite([32], [1], 64, 10)


@pytest.mark.parametrize("freqs,period", [([4, 6, 8], 32), ([1, 2, 4, 8], 64)])
def test_synth_periodic(freqs, period):
    v = synth_composite(freqs, [1] * len(freqs), 64, 3 * period).values
    assert np.allclose(v[period:], v[:-period], atol=1e-12)
