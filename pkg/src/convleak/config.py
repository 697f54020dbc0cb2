"""Run configuration: flat key=value files with typed defaults.

Every experiment knob lives here so that any study is a config diff.
Unknown keys are rejected rather than ignored. The ``CONVLEAK_SEED``
environment variable overrides the global seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .accel import AccelConfig
from .chain import ChainConfig
from .extract import ExtractConfig


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _parse_opt_int(v: str):
    s = v.strip()
    return None if s in ("", "none", "auto") else int(s)


def _parse_opt_float(v: str):
    s = v.strip()
    return None if s in ("", "none", "auto") else float(s)


def _parse_opt_str(v: str):
    s = v.strip()
    return None if s in ("", "none") else s


@dataclass
class RunConfig:
    """All pipeline parameters with their defaults."""

    # data
    images: str | None = None          # IDX file; None = synthetic corpus
    labels: str | None = None          # IDX label file for the above
    n_images: int = 10
    first_image: int = 0
    # kernels
    kernel_file: str | None = None
    n_kernels: int = 9
    kernel_size: int = 3
    # output
    out: str = "convleak-out"
    seed: int = 0
    # accelerator / leakage model
    stride: int = 1
    c_w: float = 1.0
    c_p: float = 1.0
    c_a: float = 0.5
    static_power: float = 5.0
    activation: str = "identity"
    scheduling: str = "sequential"
    masking: bool = False
    # measurement chain
    samples_per_cycle: int = 64
    sample_interval_ns: float = 0.4
    tau_rise: float = 0.08
    tau_decay: float = 0.40
    tau_highpass_cycles: float = 200.0
    noise_sigma: float = 0.0
    snr_db: float | None = None        # overrides noise_sigma per trace
    # extraction
    lowpass_cutoff: float | None = 0.3
    template_start: int | None = None
    # background detection
    bin_size: float | None = None
    threshold: float | None = None     # None = Eq.-style histogram drop
    uncovered_foreground: bool = False
    # template attack
    group_size: int = 3
    delta: float = 1.0
    normalized: bool = True
    max_restarts: int = 64
    # evaluation
    knn_k: int = 3
    n_references: int = 2000

    @property
    def tau_highpass(self) -> float:
        cycle = self.samples_per_cycle * self.sample_interval_ns * 1e-9
        return self.tau_highpass_cycles * cycle

    def accel_config(self) -> AccelConfig:
        return AccelConfig(
            kernel_size=self.kernel_size,
            stride_x=self.stride, stride_y=self.stride,
            c_w=self.c_w, c_p=self.c_p, c_a=self.c_a,
            static_power=self.static_power,
            activation=self.activation,
            scheduling=self.scheduling,
            scheduling_seed=self.seed,
            masking=self.masking,
            masking_seed=self.seed,
        )

    def chain_config(self) -> ChainConfig:
        return ChainConfig(
            samples_per_cycle=self.samples_per_cycle,
            sample_interval=self.sample_interval_ns * 1e-9,
            tau_rise=self.tau_rise, tau_decay=self.tau_decay,
            tau_highpass=self.tau_highpass,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
        )

    def extract_config(self) -> ExtractConfig:
        return ExtractConfig(
            samples_per_cycle=self.samples_per_cycle,
            lowpass_cutoff=self.lowpass_cutoff,
            restore_tau=self.tau_highpass,
            template_start=self.template_start,
            seed=self.seed,
        )


_PARSERS = {
    "images": _parse_opt_str, "labels": _parse_opt_str,
    "n_images": int, "first_image": int,
    "kernel_file": _parse_opt_str, "n_kernels": int, "kernel_size": int,
    "out": str, "seed": int,
    "stride": int, "c_w": float, "c_p": float, "c_a": float,
    "static_power": float, "activation": str,
    "scheduling": str, "masking": _parse_bool,
    "samples_per_cycle": int, "sample_interval_ns": float,
    "tau_rise": float, "tau_decay": float, "tau_highpass_cycles": float,
    "noise_sigma": float, "snr_db": _parse_opt_float,
    "lowpass_cutoff": _parse_opt_float, "template_start": _parse_opt_int,
    "bin_size": _parse_opt_float, "threshold": _parse_opt_float,
    "uncovered_foreground": _parse_bool,
    "group_size": int, "delta": float, "normalized": _parse_bool,
    "max_restarts": int,
    "knn_k": int, "n_references": int,
}

assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from a key=value file plus CLI overrides.

    Override strings look like ``key=value`` and win over the file.
    ``CONVLEAK_SEED`` in the environment wins over both for ``seed``.
    """
    cfg = RunConfig()
    pairs: list[tuple[str, str, str]] = []
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value")
                key, val = (s.strip() for s in line.split("=", 1))
                pairs.append((key, val, f"{path}:{ln}"))
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r}: expected key=value")
        key, val = (s.strip() for s in ov.split("=", 1))
        pairs.append((key, val, "command line"))
    for key, val, where in pairs:
        if key not in _PARSERS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        try:
            setattr(cfg, key, _PARSERS[key](val))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
    env_seed = os.environ.get("CONVLEAK_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"CONVLEAK_SEED={env_seed!r} is not an integer") from None
    return cfg
