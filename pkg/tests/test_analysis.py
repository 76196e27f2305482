import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from oracles import (butterworth_digital_gain, dft_magnitudes, max_pct_loop, nrms_loop,
                     zoh_scan)
from qdl.analysis import (DeviationReport, FilterSpec, FilterSpecError, TimeSeries,
                          UndefinedMetricError, butterworth_sos, butterworth_zero_phase,
                          decaying_oscillation, deviation_report, filtfilt, max_pct_deviation,
                          nrms_deviation, resample_zoh, residual_oscillation, sos_filter,
                          sos_response, update_intensity)
from qdl.engine import DerivativeClosure, EngineConfig, QdlSystem, run


# ----- time series and resampling -----


def test_time_series_checks():
    with pytest.raises(ValueError):
        TimeSeries([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        TimeSeries([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        TimeSeries([0.0, 1.0, 3.0], [0, 0, 0]).sample_rate()
    assert TimeSeries([0.0, 0.5, 1.0], [0, 0, 0]).sample_rate() == pytest.approx(2.0)


def test_zoh_single_event():
    s = resample_zoh([0.0], [3.0], [0.0, 0.5, 1.0])
    assert s.values.tolist() == [3.0, 3.0, 3.0]


def test_zoh_hold():
    assert resample_zoh([0.0, 0.5], [1.0, 2.0], [0.25, 0.75]).values.tolist() == [1.0, 2.0]


def test_zoh_before_first_event_uses_initial():
    assert resample_zoh([1.0], [5.0], [0.5, 1.0], initial=2.0).values.tolist() == [2.0, 5.0]


def test_zoh_repeated_time_last_wins():
    assert resample_zoh([0.0, 1.0, 1.0], [1.0, 2.0, 3.0], [1.0]).values.tolist() == [3.0]


@pytest.mark.parametrize("seed", range(10))
def test_zoh_matches_scan(seed):
    rng = random.Random(seed)
    et = sorted(rng.uniform(0, 10) for _ in range(rng.randint(1, 60)))
    ev = [rng.uniform(-5, 5) for _ in et]
    grid = [rng.uniform(0, 10) for _ in range(100)]
    grid.sort()
    got = resample_zoh(et, ev, grid, initial=-9.0).values.tolist()
    assert got == zoh_scan(et, ev, grid, -9.0)


# ----- metrics -----


def test_nrms_identical_is_zero():
    assert nrms_deviation([1.0, 2.0, 5.0], [1.0, 2.0, 5.0]) == 0.0


def test_nrms_hand_value():
    assert nrms_deviation([0.0, 1.0], [0.0, 0.0]) == pytest.approx(math.sqrt(0.5))


def test_nrms_flat_reference_undefined():
    with pytest.raises(UndefinedMetricError):
        nrms_deviation([2.0, 2.0], [1.0, 3.0])


def test_max_pct_values():
    assert max_pct_deviation([1.0, 2.0], [1.0, 2.0]).value == 0.0
    assert max_pct_deviation([2.0], [1.9]).value == pytest.approx(5.0)


def test_max_pct_skips_zero_reference():
    r = max_pct_deviation([0.0, 4.0, 0.0], [1.0, 5.0, 1.0])
    assert (r.value, r.excluded) == (pytest.approx(25.0), 2)
    with pytest.raises(UndefinedMetricError):
        max_pct_deviation([0.0, 0.0], [1.0, 1.0])


def test_metrics_match_loops_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 400))
        ref = rng.normal(0, rng.uniform(0.1, 100), n) + rng.uniform(-50, 50)
        qdl = ref + rng.normal(0, rng.uniform(1e-4, 1), n)
        assert nrms_deviation(ref, qdl) == pytest.approx(nrms_loop(ref, qdl), rel=1e-12)
        assert max_pct_deviation(ref, qdl).value == pytest.approx(max_pct_loop(ref, qdl), rel=1e-12)


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), st.floats(-1e3, 1e3))
def test_metrics_vanish_only_for_identical(ref, bump):
    ref = np.array(ref)
    qdl = ref.copy()
    qdl[len(qdl) // 2] += bump
    if np.ptp(ref) == 0 or np.array_equal(ref, qdl):
        return
    assert nrms_deviation(ref, qdl) > 0.0
    assert nrms_deviation(ref, ref) == 0.0


def test_nrms_normalizer_from_reference_only():
    ref = np.array([0.0, 1.0, 2.0, 3.0])
    qdl = ref + 0.1
    # shifting both series together leaves the deviation unchanged
    assert nrms_deviation(ref + 7.0, qdl + 7.0) == pytest.approx(nrms_deviation(ref, qdl))
    # widening only the QDL series does not change the normalizer
    assert nrms_deviation(ref, qdl * 1.0) == pytest.approx(0.1 / 3.0)


def test_grid_mismatch():
    with pytest.raises(ValueError):
        nrms_deviation(TimeSeries([0, 1], [0, 1]), TimeSeries([0, 2], [0, 1]))


# ----- filter -----


def test_filter_spec_checks():
    with pytest.raises(FilterSpecError):
        FilterSpec(500.0, 1000.0)
    with pytest.raises(FilterSpecError):
        FilterSpec(0.0, 1000.0)
    with pytest.raises(FilterSpecError):
        FilterSpec(10.0, 1000.0, order=0)


@pytest.mark.parametrize("order, fc, fs", [(6, 100.0, 10_000.0), (5, 30.0, 1000.0), (2, 1.0, 50.0)])
def test_sos_matches_scipy_design(order, fc, fs):
    ours = butterworth_sos(FilterSpec(fc, fs, order))
    ref = signal.butter(order, fc, fs=fs, output="sos")
    f = np.linspace(0.0, fs / 2 * 0.999, 257)
    _, h_ref = signal.sosfreqz(ref, worN=f, fs=fs)
    assert np.allclose(sos_response(ours, f, fs), h_ref, rtol=0, atol=1e-10)


@pytest.mark.parametrize("f", [0.0, 10.0, 50.0, 100.0, 200.0, 1000.0, 4000.0])
def test_response_matches_analytic_magnitude(f):
    fc, fs = 100.0, 10_000.0
    sos = butterworth_sos(FilterSpec(fc, fs))
    got = abs(sos_response(sos, [f], fs)[0])
    assert got == pytest.approx(butterworth_digital_gain(f, fc, fs, 6), rel=1e-9, abs=1e-15)


def test_double_pass_is_magnitude_squared():
    fc, fs = 100.0, 10_000.0
    sos = butterworth_sos(FilterSpec(fc, fs))
    n = 20_001
    t = np.arange(n) / fs
    for f in (20.0, 80.0, 150.0):
        x = np.sin(2 * np.pi * f * t)
        y = filtfilt(sos, x, 18)
        # project the middle 10000 samples (whole periods) onto the input tone
        mid = slice(5000, 15000)
        gain = 2.0 * np.dot(y[mid], x[mid]) / 10000
        expected = butterworth_digital_gain(f, fc, fs, 6) ** 2
        assert gain == pytest.approx(expected, rel=1e-6)
        assert abs(sos_response(sos, [f], fs)[0]) ** 2 == pytest.approx(expected, rel=1e-9)


def test_dc_gain_and_attenuation():
    fs, fc = 10_000.0, 100.0
    ts = TimeSeries(np.arange(4001) / fs, np.full(4001, 6677.0))
    out = butterworth_zero_phase(ts, FilterSpec(fc, fs))
    assert np.max(np.abs(out.values / 6677.0 - 1.0)) <= 1e-6
    sos = butterworth_sos(FilterSpec(fc, fs))
    single = abs(sos_response(sos, [10 * fc], fs)[0])
    assert -20 * math.log10(single ** 2) >= 60.0


def test_zero_phase_symmetry():
    fs = 1000.0
    n = 1001
    t = np.arange(n) / fs
    tri = np.maximum(0.0, 1.0 - np.abs(t - 0.5) / 0.1)
    y = butterworth_zero_phase(TimeSeries(t, tri), FilterSpec(20.0, fs)).values
    # edge initial conditions are not mirror images, so allow a tiny residue
    assert np.max(np.abs(y - y[::-1])) <= 1e-6 * np.max(np.abs(y))
    assert int(np.argmax(y)) == n // 2


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_filter_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    s1, s2 = rng.normal(size=(2, 500))
    sos = butterworth_sos(FilterSpec(40.0, 1000.0))
    lhs = filtfilt(sos, a * s1 + b * s2, 18)
    rhs = a * filtfilt(sos, s1, 18) + b * filtfilt(sos, s2, 18)
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * (abs(a) + abs(b) + 1))


def test_filter_columns_independent():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 3))
    sos = butterworth_sos(FilterSpec(40.0, 1000.0))
    both = filtfilt(sos, x, 18)
    for j in range(3):
        assert np.allclose(both[:, j], filtfilt(sos, x[:, j], 18), rtol=0, atol=1e-12)


def test_steady_start_removes_step_transient():
    sos = butterworth_sos(FilterSpec(40.0, 1000.0))
    y = sos_filter(sos, np.full(100, 3.0))
    assert np.allclose(y, 3.0, rtol=1e-12)


# ----- oscillation characterization -----


def test_decaying_oscillation_constant():
    assert decaying_oscillation(np.array([0.0, 1.0, 7.0]), 0.0, 0.4, 2.5, 3.14, 6677.0, 0.0).tolist() \
        == [6677.0] * 3


def test_decaying_oscillation_fit_values_finite():
    v = decaying_oscillation(0.0, 72.0, 0.4, 2.5, 3.14, 6677.0, 5.0)
    assert math.isfinite(float(v))
    assert float(v) == pytest.approx(72 * (math.cos(3.14) + math.sin(3.14)) + 6677.0 + 5 * math.cos(3.14))


def test_decaying_oscillation_envelope():
    t = np.linspace(100.0, 110.0, 20001)
    v = decaying_oscillation(t, 72.0, 0.4, 2.5, 3.14, 6677.0, 5.0) - 6677.0
    assert np.max(np.abs(v)) == pytest.approx(5.0, rel=1e-4)


def test_residual_tone():
    fs = 200.0
    t = np.arange(0, 50.0, 1 / fs)
    y = 6677.0 + 9.96 * np.sin(2 * np.pi * 0.4 * t + 0.3)
    f, a = residual_oscillation(TimeSeries(t, y), (10.0, 40.0))
    assert f == pytest.approx(0.4, rel=0.05)
    assert a == pytest.approx(9.96, rel=0.05)


def test_residual_constant():
    t = np.arange(0, 10.0, 0.01)
    assert residual_oscillation(TimeSeries(t, np.full(t.size, 3.0)), (0.0, 9.0))[1] \
        == pytest.approx(0.0, abs=1e-9)


def test_residual_two_tones_matches_direct_dft():
    fs = 64.0
    n = 512
    t = np.arange(n) / fs
    y = 3.0 * np.sin(2 * np.pi * 2.0 * t) + 5.0 * np.sin(2 * np.pi * 5.0 * t)
    f, _ = residual_oscillation(TimeSeries(t, y), (t[0], t[-1]))
    # reference periodogram of the same detrended, windowed samples
    w = TimeSeries(t, y).window(t[0], t[-1])
    x = w.values - np.polyval(np.polyfit(w.times, w.values, 1), w.times)
    hann = [0.5 - 0.5 * math.cos(2 * math.pi * k / n) for k in range(n)]
    mags = dft_magnitudes([a * b for a, b in zip(x, hann)])
    k = 1 + max(range(len(mags) - 1), key=lambda i: mags[i + 1])
    assert f == pytest.approx(k * fs / n)
    assert f == pytest.approx(5.0)


def test_residual_window_checks():
    ts = TimeSeries(np.arange(100) * 0.01, np.zeros(100))
    with pytest.raises(ValueError):
        residual_oscillation(ts, (0.0, 5.0))
    with pytest.raises(ValueError):
        residual_oscillation(ts, (0.0, 0.1))


# ----- update intensity -----


def test_intensity_empty_log():
    ui = update_intensity(["a", "b"], [], [], [], 2.0)
    assert ui.per_second.tolist() == [0.0, 0.0]


def test_intensity_uniform_events():
    t = np.linspace(0.05, 9.95, 100)
    ui = update_intensity(["a"], t, np.zeros(100), np.arange(1, 101), 10.0)
    assert ui.per_second[0] == pytest.approx(10.0)
    assert ui.windowed([0.0, 5.0, 10.0])[0] == pytest.approx([10.0, 10.0])


def test_intensity_of_thirty_volt_ramp():
    sys = QdlSystem(["vds"], [0.0], [1e-3], [DerivativeClosure(lambda q: 30.0, ())])
    res = run(sys, EngineConfig(1.0 + 1e-9))
    ui = update_intensity(res.labels, res.log.t, res.log.atom, res.log.count, 1.0)
    assert ui.counts[0] == pytest.approx(3e4, rel=0.01)


# ----- reports -----


def test_report_identical_is_zero():
    ref = np.column_stack([np.linspace(0, 1, 50), np.linspace(5, 2, 50)])
    rep = deviation_report(["a", "b"], ref, ref.copy())
    assert all(r.nrms == 0.0 and r.max_pct == 0.0 for r in rep.rows)


def test_report_sinusoidal_noise_closed_form():
    n = 1000
    t = np.arange(n) / n
    ref = (10.0 + 4.0 * t)[:, None]
    qdl = ref + 0.2 * np.sin(2 * np.pi * 5 * t)[:, None]
    r = deviation_report(["x"], ref, qdl, updates=[40], horizon=2.0).get("x")
    # an integer number of periods: rms of the sine is its amplitude over sqrt(2)
    assert r.nrms == pytest.approx(0.2 / math.sqrt(2) / (4.0 * (n - 1) / n), rel=1e-9)
    assert r.max_pct == pytest.approx(max_pct_loop(ref[:, 0], qdl[:, 0]), rel=1e-12)
    assert (r.updates, r.intensity) == (40, 20.0)


def test_report_ranking_and_csv(tmp_path):
    ref = np.column_stack([np.linspace(0, 1, 10)] * 3)
    qdl = ref + np.array([0.01, 0.3, 0.1])
    ref[:, 2] = 1.0
    rep = deviation_report(["a", "b", "c"], ref, qdl)
    assert [r.state for r in rep.ranked()] == ["b", "a", "c"]
    assert math.isnan(rep.get("c").nrms)
    p = tmp_path / "dev.csv"
    rep.write_csv(p, ["h"])
    lines = p.read_text().splitlines()
    assert lines[0] == "# h"
    assert lines[1] == "state,nrms,max_pct,updates,intensity"
    assert lines[2].startswith("b,")
    assert isinstance(rep, DeviationReport)
    assert "b" in rep.summary(top=1) and "a " not in rep.summary(top=1)
