import numpy as np
import pytest

from convleak import (ChainConfig, CyclePowers, RawTrace, add_noise,
                      apply_highpass, read_trace, render_pdn, restore_dc,
                      sigma_for_snr, write_trace)
from convleak.chain import highpass_kernel, pulse_shape
from convleak.errors import ConfigError, DataLengthError, FormatError


def pulse_oracle(cfg, length):
    """Independent reimplementation of the rise/decay pulse."""
    ns = cfg.samples_per_cycle
    tau_r = cfg.tau_rise * ns
    tau_d = cfg.tau_decay * ns
    t_peak = max(1, int(round(np.log(100.0) * tau_r)))
    out = np.empty(length)
    for t in range(length):
        if t < t_peak:
            out[t] = 1.0 - np.exp(-t / tau_r)
        else:
            out[t] = np.exp(-(t - t_peak) / tau_d)
    return out


def test_render_zero_power(ccfg):
    trace = render_pdn(CyclePowers(np.zeros(3)), ccfg)
    assert np.all(trace.samples == 0.0)
    assert len(trace.samples) == 3 * ccfg.samples_per_cycle


def test_render_single_pulse_conservation(ccfg):
    trace = render_pdn(CyclePowers(np.array([4.0])), ccfg)
    assert abs(trace.samples.sum() - 4.0) <= 1e-9 * 4.0


def test_render_two_cycle_tail_split(ccfg):
    # Closed-form oracle: pulse shape recomputed independently, cycle-2
    # share is the normalized tail mass.
    trace = render_pdn(CyclePowers(np.array([4.0, 0.0])), ccfg)
    ns = ccfg.samples_per_cycle
    shape = pulse_oracle(ccfg, 2 * ns)
    expected_c2 = 4.0 * shape[ns:].sum() / shape.sum()
    assert np.all(trace.samples[ns:] > 0.0)
    assert abs(trace.samples[ns:].sum() - expected_c2) <= 1e-9 * expected_c2
    assert abs(trace.samples.sum() - 4.0) <= 1e-9 * 4.0


def test_render_conservation_random(ccfg, rng):
    values = rng.uniform(0.0, 50.0, size=200)
    trace = render_pdn(CyclePowers(values), ccfg)
    assert abs(trace.samples.sum() - values.sum()) <= 1e-6 * values.sum()


def test_pulse_shape_matches_oracle(ccfg):
    got = pulse_shape(ccfg, 128)
    assert np.allclose(got, pulse_oracle(ccfg, 128), atol=1e-12)


def test_highpass_impulse_response(ccfg):
    n = 8
    trace = RawTrace(np.zeros(64), ccfg.sample_interval, 1, 64)
    trace.samples[0] = 1.0
    out = apply_highpass(trace, ccfg)
    t_over_tau = ccfg.sample_interval / ccfg.tau_highpass
    assert out.samples[0] == pytest.approx(1.0, abs=1e-15)
    assert out.samples[1] == pytest.approx(
        -t_over_tau * np.exp(-t_over_tau), rel=1e-12)
    # matches the declared kernel at every lag
    h = highpass_kernel(ccfg, 64)
    assert np.allclose(out.samples, h, atol=1e-15)


def test_highpass_kills_dc(ccfg):
    # A constant settles to ~alpha/2 (the discrete kernel's residual DC
    # gain); the running mean of the output shrinks as the horizon grows.
    tau_samples = int(ccfg.tau_highpass / ccfg.sample_interval)
    n = 10 * tau_samples
    trace = RawTrace(np.ones(n), ccfg.sample_interval, n // 64, 64)
    out = apply_highpass(trace, ccfg)
    assert abs(out.samples[-1]) < 1e-3
    mean_10 = abs(out.samples.mean())
    mean_5 = abs(out.samples[:5 * tau_samples].mean())
    assert mean_10 < 0.15
    assert mean_10 < mean_5


def test_highpass_restore_roundtrip(ccfg, rng):
    samples = rng.normal(0, 1, size=5000)
    trace = RawTrace(samples, ccfg.sample_interval, 5000 // 64, 64)
    back = restore_dc(apply_highpass(trace, ccfg), ccfg.tau_highpass)
    assert np.max(np.abs(back.samples - samples)) <= 1e-9


def test_chain_linearity(ccfg, rng):
    p1 = CyclePowers(rng.uniform(0, 20, size=32))
    p2 = CyclePowers(rng.uniform(0, 20, size=32))
    a, b = 2.0, 0.5
    combo = CyclePowers(a * p1.values + b * p2.values)
    t_combo = apply_highpass(render_pdn(combo, ccfg), ccfg)
    t1 = apply_highpass(render_pdn(p1, ccfg), ccfg)
    t2 = apply_highpass(render_pdn(p2, ccfg), ccfg)
    assert np.allclose(t_combo.samples, a * t1.samples + b * t2.samples,
                       atol=1e-9)


def test_noise_zero_sigma_identity(ccfg, rng):
    trace = RawTrace(rng.normal(0, 1, 256), ccfg.sample_interval, 4, 64)
    out = add_noise(trace, ccfg)
    assert np.array_equal(out.samples, trace.samples)


def test_noise_statistics():
    cfg = ChainConfig(noise_sigma=1.0, seed=7)
    trace = RawTrace(np.zeros(10 ** 6), cfg.sample_interval, 10 ** 6 // 64, 64)
    out = add_noise(trace, cfg)
    assert abs(out.samples.mean()) < 0.01
    assert abs(out.samples.std() - 1.0) < 0.01


def test_noise_deterministic():
    cfg = ChainConfig(noise_sigma=0.5, seed=3)
    trace = RawTrace(np.zeros(512), cfg.sample_interval, 8, 64)
    a = add_noise(trace, cfg)
    b = add_noise(trace, cfg)
    assert np.array_equal(a.samples, b.samples)


def test_sigma_for_snr():
    trace = RawTrace(np.full(100, 2.0), 1e-9, 1, 100)
    assert sigma_for_snr(trace, 20.0) == pytest.approx(0.2)


def test_chain_config_validation():
    with pytest.raises(ConfigError):
        ChainConfig(samples_per_cycle=4)
    with pytest.raises(ConfigError):
        ChainConfig(tau_rise=0.5, tau_decay=0.4)
    with pytest.raises(ConfigError):
        ChainConfig(tau_highpass=1e-12)


def test_trace_file_roundtrip(tmp_path, ccfg, rng):
    samples = rng.normal(0, 1, size=640)
    trace = RawTrace(samples, ccfg.sample_interval, 10, 64)
    path = tmp_path / "t.ptrc"
    write_trace(trace, path)
    back = read_trace(path)
    assert back.cycles == 10
    assert back.samples_per_cycle == 64
    assert back.sample_interval == pytest.approx(ccfg.sample_interval)
    assert np.array_equal(back.samples, samples.astype(np.float32))


def test_trace_file_errors(tmp_path):
    bad = tmp_path / "bad.ptrc"
    bad.write_bytes(b"XXXX" + bytes(30))
    with pytest.raises(FormatError):
        read_trace(bad)
    short = tmp_path / "short.ptrc"
    import struct
    short.write_bytes(b"PTRC" + struct.pack("<H", 1) + struct.pack("<d", 0.4)
                      + struct.pack("<I", 64) + struct.pack("<Q", 1)
                      + struct.pack("<Q", 64) + bytes(8))
    with pytest.raises(DataLengthError):
        read_trace(short)
