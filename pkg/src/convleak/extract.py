"""Per-cycle power recovery from raw traces.

The stages mirror the measurement chain in reverse: a zero-phase
low-pass removes scope noise, the recursive DC restoration inverts the
AC-coupling droop exactly, Pearson-correlation template matching finds
cycle boundaries, and a per-cycle exponential curve fit re-attributes
the pulse energy that trailed into later cycles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import filtfilt, find_peaks, firwin, lfilter

from .errors import AlignmentError, ConfigError, DataLengthError, DimensionError, FormatError
from .accel import CyclePowers
from .chain import RawTrace

PCYC_MAGIC = b"PCYC"

LOWPASS_TAPS = 127
FIT_MAX_ITER = 50
FIT_TOL = 1e-8
TRAIL_AMPLITUDE_CUTOFF = 0.01
TRAIL_MAX_CYCLES = 5


@dataclass
class AlignmentPoints:
    """Detected cycle-start sample indices plus the template used."""

    indices: np.ndarray
    template: np.ndarray
    nominal: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def segment_bounds(self, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
        """(starts, ends) of per-cycle segments, last one nominal-length."""
        starts = self.indices
        if len(starts) > 1:
            gap = int(round(float(np.median(np.diff(starts)))))
        else:
            gap = self.nominal
        ends = np.empty_like(starts)
        ends[:-1] = starts[1:]
        ends[-1] = min(n_samples, starts[-1] + gap)
        return starts, ends


@dataclass
class FitParams:
    """One cycle's discharge fit: peak amplitude, decay constant, RMS error."""

    v_peak: float
    tau: float
    residual: float
    converged: bool


@dataclass
class ExtractConfig:
    """Knobs for the trace-to-cycle-powers pipeline."""

    samples_per_cycle: int = 64
    lowpass_cutoff: float | None = 0.3
    restore_tau: float | None = None
    sample_interval: float | None = None
    template_start: int | None = None
    seed: int = 0


def lowpass(trace: RawTrace, cutoff_norm: float) -> RawTrace:
    """Zero-phase windowed-sinc low-pass (applied forward and backward).

    ``cutoff_norm`` is a fraction of Nyquist in (0, 1). DC gain is one.
    """
    if not 0.0 < cutoff_norm < 1.0:
        raise ConfigError("cutoff must lie strictly between 0 and 1 of Nyquist")
    if len(trace.samples) <= 3 * LOWPASS_TAPS:
        raise DimensionError(
            f"trace of {len(trace.samples)} samples too short for a "
            f"{LOWPASS_TAPS}-tap zero-phase filter")
    taps = firwin(LOWPASS_TAPS, cutoff_norm)
    filtered = filtfilt(taps, [1.0], trace.samples)
    return trace.copy_with(filtered)


def restore_dc(trace: RawTrace, tau_highpass: float) -> RawTrace:
    """Exact recursive inverse of the AC-coupling high-pass.

    With d = exp(-T/tau) the restored signal satisfies
    r(n) = x(n) + (T/tau) * sum_{i<n} r(i) d^(n-i); substituting the
    recursion for the sum turns it into a single linear filter.
    """
    if tau_highpass <= 0:
        raise ConfigError("tau_highpass must be positive")
    x = trace.samples
    alpha = trace.sample_interval / tau_highpass
    d = np.exp(-trace.sample_interval / tau_highpass)
    s = lfilter([0.0, d], [1.0, -d * (1.0 + alpha)], x)
    return trace.copy_with(x + alpha * s)


def _sliding_pearson(x: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Pearson correlation of the template against every trace offset."""
    m = len(template)
    n = len(x) - m + 1
    if n < 1:
        raise DimensionError("trace shorter than the alignment template")
    t = template - template.mean()
    t_norm = np.sqrt(np.sum(t * t))
    dot = np.correlate(x, t, mode="valid")
    csum = np.concatenate([[0.0], np.cumsum(x)])
    csum2 = np.concatenate([[0.0], np.cumsum(x * x)])
    win_sum = csum[m:] - csum[:-m]
    win_sum2 = csum2[m:] - csum2[:-m]
    win_var = win_sum2 - win_sum * win_sum / m
    win_var = np.maximum(win_var, 0.0)
    denom = t_norm * np.sqrt(win_var)
    corr = np.zeros(n, dtype=np.float64)
    ok = denom > 1e-12 * max(t_norm, 1.0)
    # dot already subtracts nothing; remove the mean term of the window
    corr[ok] = dot[ok] / denom[ok]
    return np.clip(corr, -1.0, 1.0)


def _auto_template(x: np.ndarray, nominal: int, seed: int) -> int:
    """Start index of the cycle-length window that correlates best, on
    average, with 32 randomly sampled windows of the trace."""
    rng = np.random.default_rng(seed)
    n = len(x) - nominal
    refs = rng.integers(0, n + 1, size=min(32, n + 1))
    cands = rng.integers(0, n + 1, size=min(64, n + 1))
    ref_wins = np.stack([x[r:r + nominal] for r in refs])
    ref_wins = ref_wins - ref_wins.mean(axis=1, keepdims=True)
    ref_norm = np.sqrt(np.sum(ref_wins ** 2, axis=1))
    best, best_score = int(cands[0]), -np.inf
    for c in cands:
        w = x[c:c + nominal]
        w = w - w.mean()
        wn = np.sqrt(np.sum(w * w))
        if wn < 1e-12:
            continue
        denom = wn * ref_norm
        ok = denom > 1e-24
        if not np.any(ok):
            continue
        score = float(np.mean(ref_wins[ok] @ w / denom[ok]))
        if score > best_score:
            best_score, best = score, int(c)
    return best


def align(trace: RawTrace, template: np.ndarray | None = None,
          nominal: int | None = None, seed: int = 0,
          template_start: int | None = None) -> AlignmentPoints:
    """Locate cycle starts by sliding-Pearson template matching.

    Correlation maxima above 0.5 with at least 0.8 * nominal separation
    anchor a regular boundary lattice: the cycle period is the median
    match spacing and the phase is snapped to the rise onset of the
    mean cycle profile (the steepest upward sample step, which marks
    where each pulse begins). The lattice covers the whole trace, so
    cycles whose individual peak fell below threshold still get a
    boundary.
    """
    ns = nominal if nominal is not None else trace.samples_per_cycle
    x = trace.samples
    if len(x) < 3 * ns:
        raise AlignmentError("trace shorter than three nominal cycles")
    if template is None:
        start = template_start if template_start is not None \
            else _auto_template(x, ns, seed)
        template = x[start:start + ns].copy()
    template = np.asarray(template, dtype=np.float64)
    if np.std(template) < 1e-12:
        raise AlignmentError("degenerate (constant) alignment template")

    # Guard values below any real correlation so edge peaks are found.
    corr = _sliding_pearson(x, template)
    padded = np.concatenate([[-2.0], corr, [-2.0]])
    peaks, _ = find_peaks(padded, height=0.5,
                          distance=max(1, int(round(0.8 * ns))))
    matches = peaks - 1
    if len(matches) < 2:
        raise AlignmentError(
            f"found {len(matches)} alignment points, need at least 2")

    # Matches may skip quiet cycles entirely, leaving gaps of several
    # periods; divide each gap by its rounded cycle multiple first. The
    # clock period is nominally known, so estimates within jitter range
    # of the nominal snap to it exactly.
    gaps = np.diff(matches).astype(np.float64)
    mult = np.maximum(np.round(gaps / ns), 1.0)
    period_est = float(np.median(gaps / mult))
    if abs(period_est - ns) <= max(2.0, 0.02 * ns):
        period = ns
    else:
        period = int(round(period_est))
    if not 0.8 * ns <= period <= 1.2 * ns:
        raise AlignmentError(
            f"detected period {period} outside 20% of nominal {ns}")

    # Phase-snap: the mean cycle profile rises steepest right at the
    # pulse onset; make that sample the segment boundary.
    usable = matches[matches + period <= len(x)]
    if len(usable) == 0:
        raise AlignmentError("no full cycle available for phase snapping")
    profile = np.mean(np.stack([x[m:m + period] for m in usable]), axis=0)
    step = np.empty(period)
    step[:-1] = profile[1:] - profile[:-1]
    step[-1] = profile[0] - profile[-1]
    onset = int(np.argmax(step))
    phase = int(np.median((matches + onset) % period))
    indices = np.arange(phase, len(x), period, dtype=np.int64)
    if len(indices) < 2:
        raise AlignmentError("alignment collapsed to fewer than 2 points")
    return AlignmentPoints(indices=indices, template=template, nominal=period)


def _fit_decay(y: np.ndarray, ns: int) -> FitParams:
    """Gauss-Newton fit of y_i ~ V * exp(-t_i / tau), t_i = 0..len-1."""
    t = np.arange(len(y), dtype=np.float64)
    v = float(np.max(y))
    tau = 0.4 * ns
    tau_lo, tau_hi = 0.05 * ns, 5.0 * ns
    if len(y) < 3 or v <= 0:
        return FitParams(max(v, 0.0), tau, float("inf"), False)
    converged = False
    for _ in range(FIT_MAX_ITER):
        e = np.exp(-t / tau)
        r = v * e - y
        j_tau = (v / (tau * tau)) * (e * t)
        a11 = float(e @ e)
        a12 = float(e @ j_tau)
        a22 = float(j_tau @ j_tau)
        b1 = -float(e @ r)
        b2 = -float(j_tau @ r)
        det = a11 * a22 - a12 * a12
        if not np.isfinite(det) or abs(det) < 1e-300:
            return FitParams(v, tau, float(np.sqrt(np.mean(r * r))), False)
        dv = (a22 * b1 - a12 * b2) / det
        dtau = (a11 * b2 - a12 * b1) / det
        v_new = v + dv
        tau_new = min(max(tau + dtau, tau_lo), tau_hi)
        if not np.isfinite(v_new) or not np.isfinite(tau_new) or v_new < 0:
            return FitParams(v, tau, float(np.sqrt(np.mean(r * r))), False)
        rel = max(abs(dv) / max(abs(v_new), 1e-12),
                  abs(tau_new - tau) / tau_new)
        v, tau = v_new, tau_new
        if rel < FIT_TOL:
            converged = True
            break
    e = np.exp(-t / tau)
    resid = float(np.sqrt(np.mean((v * e - y) ** 2)))
    return FitParams(v, tau, resid, converged)


def extract_cycle_power(trace: RawTrace, points: AlignmentPoints,
                        return_fits: bool = False):
    """Per-cycle power via discharge fitting and trailing re-attribution.

    For each aligned cycle the post-peak samples are fit to
    V * exp(-t/tau); the fitted curve is extended past the segment (up
    to 5 cycles or until it falls below 1% of V) as the trailing power,
    which is credited to this cycle and subtracted from the samples of
    the following ones. A diverging fit falls back to the plain segment
    sum and is flagged low-confidence.
    """
    if len(points.indices) < 1:
        raise AlignmentError("no aligned cycles to extract")
    w = trace.samples.copy()
    ns = points.nominal
    starts, ends = points.segment_bounds(len(w))
    n = len(starts)
    values = np.zeros(n, dtype=np.float64)
    fits: list[FitParams] = []
    for j in range(n):
        s, e = int(starts[j]), int(ends[j])
        seg = w[s:e]
        if len(seg) == 0:
            fits.append(FitParams(0.0, 0.4 * ns, float("inf"), False))
            continue
        peak = int(np.argmax(seg))
        fit = _fit_decay(seg[peak:], ns)
        fits.append(fit)
        if fit.converged and fit.v_peak > 0:
            # Continue the fitted discharge past the segment end.
            t0 = (e - s) - peak
            max_len = min(TRAIL_MAX_CYCLES * ns, len(w) - e)
            if max_len > 0:
                t = t0 + np.arange(max_len, dtype=np.float64)
                tail = fit.v_peak * np.exp(-t / fit.tau)
                cut = np.argmax(tail < TRAIL_AMPLITUDE_CUTOFF * fit.v_peak) \
                    if np.any(tail < TRAIL_AMPLITUDE_CUTOFF * fit.v_peak) \
                    else max_len
                tail = tail[:cut]
            else:
                tail = np.empty(0)
            values[j] = seg.sum() + tail.sum()
            if len(tail):
                w[e:e + len(tail)] -= tail
        else:
            values[j] = seg.sum()
    powers = CyclePowers(np.maximum(values, 0.0))
    if return_fits:
        return powers, fits
    return powers


def run_extraction(trace: RawTrace, cfg: ExtractConfig,
                   return_fits: bool = False):
    """Full attack-side pipeline: low-pass, DC restore, align, extract."""
    t = trace
    if cfg.lowpass_cutoff is not None:
        t = lowpass(t, cfg.lowpass_cutoff)
    if cfg.restore_tau is not None:
        t = restore_dc(t, cfg.restore_tau)
    points = align(t, nominal=cfg.samples_per_cycle, seed=cfg.seed,
                   template_start=cfg.template_start)
    if return_fits:
        powers, fits = extract_cycle_power(t, points, return_fits=True)
        return powers, points, fits
    powers = extract_cycle_power(t, points)
    return powers, points


def write_cycle_powers(powers: CyclePowers, path) -> None:
    """Write the PCYC format: magic, cycle count u64, f32 LE values."""
    with open(path, "wb") as fh:
        fh.write(PCYC_MAGIC)
        fh.write(struct.pack("<Q", len(powers.values)))
        fh.write(powers.values.astype("<f4").tobytes())


def read_cycle_powers(path) -> CyclePowers:
    """Read a PCYC file written by :func:`write_cycle_powers`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PCYC_MAGIC:
            raise FormatError(f"{path}: bad cycle-power magic {magic!r}")
        (count,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(count * 4)
    if len(payload) < count * 4:
        raise DataLengthError(f"{path}: cycle-power payload truncated")
    return CyclePowers(np.frombuffer(payload, dtype="<f4").astype(np.float64))
