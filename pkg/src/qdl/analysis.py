"""Deviation metrics, resampling and post-filtering of quantized trajectories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """The requested metric has no finite value for these inputs."""


class FilterSpecError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        if t.ndim != 1 or v.shape[:1] != t.shape:
            raise ValueError("times and values must have equal length")
        if t.size > 1 and not np.all(np.diff(t) > 0.0):
            raise ValueError("times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size

    def window(self, t0: float, t1: float) -> "TimeSeries":
        m = (self.times >= t0) & (self.times <= t1)
        return TimeSeries(self.times[m], self.values[m])

    def sample_rate(self, rtol: float = 1e-6) -> float:
        """1/dt for a uniform grid; raises if spacing varies."""
        if self.times.size < 2:
            raise ValueError("need at least two samples")
        dt = np.diff(self.times)
        if np.max(np.abs(dt - dt[0])) > rtol * dt[0]:
            raise ValueError("series is not uniformly sampled")
        return 1.0 / float(np.mean(dt))


# ===== resampling =====


def resample_zoh(event_times, event_values, grid, initial: float | None = None) -> TimeSeries:
    """Hold the most recent event value at each grid time.

    Event times may repeat; the last entry at a given time wins.  Grid points
    earlier than the first event take ``initial`` (or the first value).
    """
    et = np.asarray(event_times, dtype=float)
    ev = np.asarray(event_values, dtype=float)
    g = np.asarray(grid, dtype=float)
    if et.shape != ev.shape:
        raise ValueError("event times and values must have equal length")
    if et.size > 1 and np.any(np.diff(et) < 0.0):
        raise ValueError("event times must be non-decreasing")
    if et.size == 0:
        if initial is None:
            raise ValueError("empty event list needs an initial value")
        return TimeSeries(g, np.full(g.shape, float(initial)))
    k = np.searchsorted(et, g, side="right") - 1
    before = ev[0] if initial is None else float(initial)
    out = np.where(k >= 0, ev[np.clip(k, 0, None)], before)
    return TimeSeries(g, out)


# ===== deviation metrics =====


def _values(s) -> np.ndarray:
    return s.values if isinstance(s, TimeSeries) else np.asarray(s, dtype=float)


def _check_grids(ref, qdl) -> tuple[np.ndarray, np.ndarray]:
    y, q = _values(ref), _values(qdl)
    if y.shape != q.shape:
        raise ValueError(f"series lengths differ: {y.shape} vs {q.shape}")
    if isinstance(ref, TimeSeries) and isinstance(qdl, TimeSeries):
        if not np.array_equal(ref.times, qdl.times):
            raise ValueError("series are on different grids")
    if y.size == 0:
        raise UndefinedMetricError("empty series")
    return y, q


def nrms_deviation(ref, qdl) -> float:
    """RMS of (ref - qdl) divided by the dynamic range of ref."""
    y, q = _check_grids(ref, qdl)
    span = float(np.max(y) - np.min(y))
    if not span > 0.0:
        raise UndefinedMetricError("reference has zero dynamic range")
    return math.sqrt(float(np.mean((y - q) ** 2))) / span


@dataclass(frozen=True)
class MaxPct:
    value: float
    excluded: int


def max_pct_deviation(ref, qdl) -> MaxPct:
    """Largest |ref - qdl| / |ref| in percent; samples with ref == 0 are skipped and counted."""
    y, q = _check_grids(ref, qdl)
    keep = y != 0.0
    excluded = int(y.size - np.count_nonzero(keep))
    if excluded == y.size:
        raise UndefinedMetricError("every reference sample is zero")
    dev = np.abs(y[keep] - q[keep]) / np.abs(y[keep])
    return MaxPct(float(np.max(dev)) * 100.0, excluded)


# ===== Butterworth low-pass =====


@dataclass(frozen=True)
class FilterSpec:
    cutoff: float
    sample_rate: float
    order: int = 6

    def __post_init__(self):
        if self.order < 1:
            raise FilterSpecError("filter order must be at least 1")
        if not self.sample_rate > 0.0:
            raise FilterSpecError("sample rate must be positive")
        if not 0.0 < self.cutoff < self.sample_rate / 2.0:
            raise FilterSpecError(
                f"cutoff {self.cutoff} Hz must lie in (0, Nyquist = {self.sample_rate / 2.0} Hz)")


def butterworth_sos(spec: FilterSpec) -> np.ndarray:
    """Digital low-pass as second-order sections, rows ``[b0, b1, b2, 1, a1, a2]``.

    Analog prototype poles are scaled to the pre-warped cutoff and mapped
    through the bilinear transform; every section is normalized to unit DC gain.
    """
    n = spec.order
    fs2 = 2.0 * spec.sample_rate
    wa = fs2 * math.tan(math.pi * spec.cutoff / spec.sample_rate)
    poles = [wa * complex(math.cos(th), math.sin(th))
             for th in (math.pi * (2 * k + n + 1) / (2 * n) for k in range(n))]
    zp = [(fs2 + p) / (fs2 - p) for p in poles]
    rows = []
    for z in sorted((z for z in zp if z.imag > 1e-14), key=lambda z: -abs(z)):
        a1, a2 = -2.0 * z.real, abs(z) ** 2
        g = (1.0 + a1 + a2) / 4.0
        rows.append([g, 2.0 * g, g, 1.0, a1, a2])
    if n % 2:
        r = min(zp, key=lambda z: abs(z.imag)).real
        g = (1.0 - r) / 2.0
        rows.append([g, g, 0.0, 1.0, -r, 0.0])
    return np.array(rows)


def sos_response(sos: np.ndarray, freqs, sample_rate: float) -> np.ndarray:
    """Complex frequency response of a section cascade at ``freqs`` (Hz)."""
    z = np.exp(-2j * np.pi * np.asarray(freqs, dtype=float) / sample_rate)
    h = np.ones_like(z)
    for b0, b1, b2, _, a1, a2 in sos:
        h *= (b0 + b1 * z + b2 * z * z) / (1.0 + a1 * z + a2 * z * z)
    return h


def sos_filter(sos: np.ndarray, x: np.ndarray, steady_start: bool = True) -> np.ndarray:
    """Run the cascade along axis 0 (transposed direct form II).

    With ``steady_start`` each section starts in the state it would hold after
    an infinitely long input equal to ``x[0]``.
    """
    y = np.array(x, dtype=float, copy=True)
    for b0, b1, b2, _, a1, a2 in sos:
        u = y
        y = np.empty_like(u)
        if steady_start:
            x0 = u[0]
            s2 = (b2 - a2) * x0
            s1 = (b1 - a1) * x0 + s2
        else:
            s1 = np.zeros_like(u[0])
            s2 = np.zeros_like(u[0])
        for k in range(u.shape[0]):
            xk = u[k]
            yk = b0 * xk + s1
            s1 = b1 * xk - a1 * yk + s2
            s2 = b2 * xk - a2 * yk
            y[k] = yk
    return y


def filtfilt(sos: np.ndarray, x, pad: int) -> np.ndarray:
    """Forward pass, reversed pass, with odd reflection of ``pad`` samples at each end."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if pad >= n:
        raise ValueError(f"series of {n} samples is too short for {pad} samples of padding")
    if pad > 0:
        head = 2.0 * x[0] - x[pad:0:-1]
        tail = 2.0 * x[-1] - x[-2:-pad - 2:-1]
        ext = np.concatenate([head, x, tail])
    else:
        ext = x
    y = sos_filter(sos, ext)
    y = sos_filter(sos, y[::-1])[::-1]
    return y[pad:pad + n] if pad > 0 else y


def butterworth_zero_phase(series: TimeSeries, spec: FilterSpec) -> TimeSeries:
    fs = series.sample_rate()
    if abs(fs - spec.sample_rate) > 1e-6 * fs:
        raise FilterSpecError(f"series is sampled at {fs} Hz, spec expects {spec.sample_rate} Hz")
    sos = butterworth_sos(spec)
    return TimeSeries(series.times, filtfilt(sos, series.values, 3 * spec.order))


# ===== characterization helpers =====


def decaying_oscillation(t, A: float, lam: float, w: float, phi: float,
                         x_dc: float, B: float):
    """A e^(-lam t) (cos(wt + phi) + sin(wt + phi)) + x_dc + B cos(wt + phi)."""
    t = np.asarray(t, dtype=float)
    arg = w * t + phi
    out = A * np.exp(-lam * t) * (np.cos(arg) + np.sin(arg)) + x_dc + B * np.cos(arg)
    return float(out) if out.ndim == 0 else out


def residual_oscillation(series: TimeSeries, window: tuple[float, float],
                         min_samples: int = 32) -> tuple[float, float]:
    """Dominant nonzero frequency (Hz) and amplitude inside ``window``.

    The window is linearly detrended and Hann-weighted; the amplitude divides
    the peak magnitude by the window's coherent gain so a pure tone on a bin
    reads back its own amplitude.
    """
    t0, t1 = window
    if t0 < series.times[0] or t1 > series.times[-1] or not t1 > t0:
        raise ValueError("window must lie inside the series")
    w = series.window(t0, t1)
    n = len(w)
    if n < min_samples:
        raise ValueError(f"window holds {n} samples, need at least {min_samples}")
    fs = w.sample_rate()
    y = w.values - np.polyval(np.polyfit(w.times - w.times[0], w.values, 1), w.times - w.times[0])
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    mag = np.abs(np.fft.rfft(y * hann))
    k = 1 + int(np.argmax(mag[1:]))
    return k * fs / n, 2.0 * float(mag[k]) / float(hann.sum())


# ===== update intensity =====


@dataclass
class UpdateIntensity:
    labels: list[str]
    horizon: float
    counts: np.ndarray
    # per atom: (times, cumulative update count) as a right-continuous step function
    cumulative: list[tuple[np.ndarray, np.ndarray]]

    @property
    def per_second(self) -> np.ndarray:
        return self.counts / self.horizon

    def windowed(self, edges) -> np.ndarray:
        """Updates per second inside each [edges[k], edges[k+1]) window, one row per atom."""
        e = np.asarray(edges, dtype=float)
        out = np.zeros((len(self.labels), e.size - 1))
        for j, (ts, cs) in enumerate(self.cumulative):
            at = np.concatenate([[0.0], cs])[np.searchsorted(ts, e, side="left")]
            out[j] = np.diff(at) / np.diff(e)
        return out


def update_intensity(labels: Sequence[str], event_t, event_atom, event_count, horizon: float,
                     totals: Sequence[int] | None = None) -> UpdateIntensity:
    """Cumulative update counts per atom and their average rate over ``horizon``.

    ``event_count`` is the atom's running update count at each logged event;
    ``totals`` (final counts) covers updates after the last logged event.
    """
    if not horizon > 0.0:
        raise ValueError("horizon must be positive")
    t = np.asarray(event_t, dtype=float)
    a = np.asarray(event_atom, dtype=int)
    c = np.asarray(event_count, dtype=float)
    n = len(labels)
    cum = []
    counts = np.zeros(n)
    for j in range(n):
        m = a == j
        cum.append((t[m], c[m]))
        counts[j] = c[m][-1] if m.any() else 0.0
    if totals is not None:
        counts = np.asarray(totals, dtype=float)
    return UpdateIntensity(list(labels), float(horizon), counts, cum)


# ===== reports =====


@dataclass
class StateDeviation:
    state: str
    nrms: float
    max_pct: float
    excluded: int = 0
    updates: int = 0
    intensity: float = 0.0


@dataclass
class DeviationReport:
    rows: list[StateDeviation] = field(default_factory=list)
    title: str = ""

    def ranked(self) -> list[StateDeviation]:
        """Largest normalized RMS first; undefined entries last."""
        return sorted(self.rows, key=lambda r: (-r.nrms if r.nrms == r.nrms else math.inf, r.state))

    def get(self, state: str) -> StateDeviation:
        for r in self.rows:
            if r.state == state:
                return r
        raise KeyError(state)

    def write_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state", "nrms", "max_pct", "updates", "intensity"])
            for r in self.ranked():
                w.writerow([r.state, repr(r.nrms), repr(r.max_pct), r.updates, repr(r.intensity)])

    def summary(self, top: int | None = None) -> str:
        rows = self.ranked()[:top] if top else self.ranked()
        out = [self.title] if self.title else []
        out.append(f"{'state':<14} {'nrms %':>10} {'max %':>10} {'updates':>9} {'upd/s':>10}")
        for r in rows:
            note = f"  ({r.excluded} zero samples skipped)" if r.excluded else ""
            out.append(f"{r.state:<14} {100.0 * r.nrms:10.4f} {r.max_pct:10.4f} "
                       f"{r.updates:9d} {r.intensity:10.1f}{note}")
        return "\n".join(out)


def deviation_report(labels: Sequence[str], ref: np.ndarray, qdl: np.ndarray,
                     updates: Sequence[int] | None = None, horizon: float | None = None,
                     states: Sequence[str] | None = None, title: str = "") -> DeviationReport:
    """Per-column metrics for two arrays sampled on the same grid (rows = samples).

    States whose reference is flat or identically zero get NaN for the
    undefined metric rather than aborting the whole report.
    """
    ref = np.asarray(ref, dtype=float)
    qdl = np.asarray(qdl, dtype=float)
    if ref.shape != qdl.shape:
        raise ValueError("reference and QDL arrays differ in shape")
    rep = DeviationReport(title=title)
    for j, lab in enumerate(labels):
        if states is not None and lab not in states:
            continue
        try:
            nr = nrms_deviation(ref[:, j], qdl[:, j])
        except UndefinedMetricError:
            nr = math.nan
        try:
            mp = max_pct_deviation(ref[:, j], qdl[:, j])
            mx, ex = mp.value, mp.excluded
        except UndefinedMetricError:
            mx, ex = math.nan, ref.shape[0]
        u = int(updates[j]) if updates is not None else 0
        rate = u / horizon if horizon else 0.0
        rep.rows.append(StateDeviation(lab, nr, mx, ex, u, rate))
    return rep
