"""Measurement-chain model: ground-truth cycle powers to raw traces.

Three interference sources sit between the datapath and the recorded
waveform. The power delivery network smears each cycle's energy into a
charge/discharge pulse, the AC-coupled amplifier behaves as a high-pass
filter that bleeds off the DC component, and the scope adds white
noise. Each is modelled by one transform here; all are linear, so the
chain obeys superposition and the extraction stage can undo them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .errors import ConfigError, DataLengthError, FormatError
from .accel import CyclePowers

PTRC_MAGIC = b"PTRC"
PTRC_VERSION = 1


@dataclass
class ChainConfig:
    """Measurement-chain parameters.

    ``tau_rise`` and ``tau_decay`` are pulse time constants as fractions
    of one cycle. ``tau_highpass`` is in seconds; the default scales the
    hardware value down to 200 cycle periods so the baseline droop and
    its restoration are actually visible at simulation length.
    """

    samples_per_cycle: int = 64
    sample_interval: float = 0.4e-9
    tau_rise: float = 0.08
    tau_decay: float = 0.40
    tau_highpass: float | None = None
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_cycle < 8:
            raise ConfigError("samples_per_cycle must be >= 8")
        if not self.tau_rise < self.tau_decay:
            raise ConfigError("tau_rise must be smaller than tau_decay")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        cycle = self.samples_per_cycle * self.sample_interval
        if self.tau_highpass is None:
            self.tau_highpass = 200.0 * cycle
        if self.tau_highpass < 10.0 * cycle:
            raise ConfigError("tau_highpass must be >> one cycle period")


@dataclass
class RawTrace:
    """Sampled voltage-like waveform covering whole cycles."""

    samples: np.ndarray
    sample_interval: float
    cycles: int
    samples_per_cycle: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def copy_with(self, samples: np.ndarray) -> "RawTrace":
        return RawTrace(samples, self.sample_interval, self.cycles,
                        self.samples_per_cycle)


def pulse_shape(cfg: ChainConfig, length: int) -> np.ndarray:
    """Unit charge/discharge pulse sampled over ``length`` samples.

    Exponential rise toward 1 with constant ``tau_rise`` until 99% of
    the plateau, then exponential discharge with constant ``tau_decay``.
    """
    ns = cfg.samples_per_cycle
    tau_r = cfg.tau_rise * ns
    tau_d = cfg.tau_decay * ns
    t_peak = max(1, int(round(np.log(100.0) * tau_r)))
    t = np.arange(length, dtype=np.float64)
    rise = 1.0 - np.exp(-t / tau_r)
    decay = np.exp(-(t - t_peak) / tau_d)
    return np.where(t < t_peak, rise, decay)


def render_pdn(powers: CyclePowers, cfg: ChainConfig) -> RawTrace:
    """Render cycle powers as superposed charge/discharge pulses.

    Each cycle contributes one pulse scaled so that its sample sum over
    the rest of the trace equals the cycle's power; pulse tails run
    across cycle boundaries (the trailing power the extractor has to
    re-attribute). Sample sums therefore conserve total power exactly.

    The superposition is a convolution of a scaled impulse train with
    the pulse shape; the shape support is truncated where the discharge
    falls below 1e-12 of the plateau, and each pulse is normalized over
    exactly the truncated in-trace support, so conservation is exact.
    """
    values = powers.values
    if len(values) == 0:
        raise ConfigError("cannot render an empty power vector")
    ns = cfg.samples_per_cycle
    n_total = len(values) * ns
    support = min(n_total, int(np.ceil(
        (cfg.tau_decay * np.log(1e12) + 1.0) * ns)))
    shape = pulse_shape(cfg, support)
    shape_cum = np.cumsum(shape)
    starts = np.arange(len(values)) * ns
    remain = np.minimum(n_total - starts, support)
    amps = values / shape_cum[remain - 1]
    impulses = np.zeros(n_total, dtype=np.float64)
    impulses[starts] = amps
    out = fftconvolve(impulses, shape)[:n_total]
    return RawTrace(out, cfg.sample_interval, len(values), ns)


def highpass_kernel(cfg: ChainConfig, length: int) -> np.ndarray:
    """Discrete impulse response of the AC-coupled measurement circuit."""
    alpha = cfg.sample_interval / cfg.tau_highpass
    n = np.arange(length, dtype=np.float64)
    h = -alpha * np.exp(-n * cfg.sample_interval / cfg.tau_highpass)
    h[0] = 1.0
    return h


def apply_highpass(trace: RawTrace, cfg: ChainConfig) -> RawTrace:
    """Convolve the trace with the measurement circuit's response.

    Computed by the equivalent O(N) recursion: with d = exp(-T/tau) and
    S(n) = sum_{i<n} x(i) d^(n-i), the output is x(n) - (T/tau) S(n).
    """
    x = trace.samples
    alpha = trace.sample_interval / cfg.tau_highpass
    d = np.exp(-trace.sample_interval / cfg.tau_highpass)
    s = lfilter([0.0, d], [1.0, -d], x)
    return trace.copy_with(x - alpha * s)


def add_noise(trace: RawTrace, cfg: ChainConfig) -> RawTrace:
    """Add i.i.d. zero-mean Gaussian scope noise, deterministic in seed."""
    if cfg.noise_sigma == 0.0:
        return trace.copy_with(trace.samples.copy())
    rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, cfg.noise_sigma, size=trace.samples.shape)
    return trace.copy_with(trace.samples + noise)


def sigma_for_snr(trace: RawTrace, snr_db: float) -> float:
    """Noise sigma that puts the trace at the requested SNR in dB."""
    rms = float(np.sqrt(np.mean(trace.samples ** 2)))
    return rms / (10.0 ** (snr_db / 20.0))


def measure(powers: CyclePowers, cfg: ChainConfig) -> RawTrace:
    """Full chain: render pulses, AC-couple, add scope noise."""
    trace = render_pdn(powers, cfg)
    trace = apply_highpass(trace, cfg)
    return add_noise(trace, cfg)


def write_trace(trace: RawTrace, path) -> None:
    """Write the PTRC binary trace format (little-endian, f32 samples)."""
    with open(path, "wb") as fh:
        fh.write(PTRC_MAGIC)
        fh.write(struct.pack("<H", PTRC_VERSION))
        fh.write(struct.pack("<d", trace.sample_interval * 1e9))
        fh.write(struct.pack("<I", trace.samples_per_cycle))
        fh.write(struct.pack("<Q", trace.cycles))
        fh.write(struct.pack("<Q", len(trace.samples)))
        fh.write(trace.samples.astype("<f4").tobytes())


def read_trace(path) -> RawTrace:
    """Read a PTRC trace file written by :func:`write_trace`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PTRC_MAGIC:
            raise FormatError(f"{path}: bad trace magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != PTRC_VERSION:
            raise FormatError(f"{path}: unsupported trace version {version}")
        (interval_ns,) = struct.unpack("<d", fh.read(8))
        (ns,) = struct.unpack("<I", fh.read(4))
        (cycles,) = struct.unpack("<Q", fh.read(8))
        (count,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(count * 4)
    if len(payload) < count * 4:
        raise DataLengthError(f"{path}: trace payload truncated")
    samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return RawTrace(samples, interval_ns * 1e-9, cycles, ns)
