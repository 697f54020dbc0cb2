"""Passive background-detection attack.

Cycles whose related pixels carry no transitions consume only static
power, so the low end of the cycle-power histogram aggregates the
cycles that processed uniform (background) regions. The attack picks
the threshold at the sharpest histogram drop, classifies every cycle
below it as background, and paints the corresponding related pixels to
reveal the foreground silhouette.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NoDropError
from .accel import CyclePowers, CycleSchedule
from .imgio import Image, SilhouetteImage
from . import metrics as _metrics


@dataclass
class Histogram:
    """Cycle-count histogram over per-cycle power.

    Bins are half-open ``[lo + i*B, lo + (i+1)*B)`` with ``lo`` snapped
    to a multiple of the bin size, so bin edges land on round power
    values.
    """

    bin_size: float
    counts: np.ndarray
    lo: float
    power_range: tuple[float, float]

    @property
    def edges(self) -> np.ndarray:
        return self.lo + self.bin_size * np.arange(len(self.counts) + 1)


@dataclass
class Threshold:
    """Background/foreground power threshold (inclusive on background)."""

    value: float


def valid_powers(powers: CyclePowers, schedule: CycleSchedule) -> np.ndarray:
    """Powers of the schedule's valid cycles only."""
    return powers.values[schedule.valid_cycles]


def build_histogram(powers: CyclePowers, schedule: CycleSchedule,
                    bin_size: float | None = None) -> Histogram:
    """Histogram of valid-cycle powers.

    ``bin_size`` defaults to 1/100 of the observed power range.
    """
    vals = valid_powers(powers, schedule)
    if len(vals) == 0:
        raise ConfigError("no valid cycles to histogram")
    vmin, vmax = float(vals.min()), float(vals.max())
    if bin_size is None:
        bin_size = (vmax - vmin) / 100.0
        if bin_size == 0.0:
            bin_size = max(abs(vmax), 1.0) / 100.0
    if bin_size <= 0:
        raise ConfigError("bin_size must be positive")
    lo = np.floor(vmin / bin_size) * bin_size
    idx = np.floor((vals - lo) / bin_size).astype(np.int64)
    # Right-edge values of the top bin spill into one extra bin.
    counts = np.bincount(idx, minlength=int(idx.max()) + 1)
    return Histogram(bin_size=float(bin_size), counts=counts, lo=float(lo),
                     power_range=(vmin, vmax))


def select_threshold(hist: Histogram) -> Threshold:
    """Threshold at the maximal drop in cycle count between adjacent bins.

    Returns the shared edge of the bin pair with the largest count
    decrease; ties resolve toward the smaller power so the background
    set stays conservative. A histogram with no decrease anywhere means
    the attack's low-power peak assumption failed.
    """
    counts = hist.counts.astype(np.int64)
    if len(counts) < 2:
        raise NoDropError("histogram needs at least two bins")
    drops = counts[:-1] - counts[1:]
    best = int(np.argmax(drops))
    if drops[best] <= 0:
        raise NoDropError("cycle-count histogram never decreases")
    return Threshold(value=float(hist.lo + (best + 1) * hist.bin_size))


def recover_silhouette(powers: CyclePowers, schedule: CycleSchedule,
                       thr: Threshold,
                       uncovered_foreground: bool = False) -> SilhouetteImage:
    """Paint the background of every quiet cycle's related pixels.

    All pixels start as foreground; each valid cycle with power at or
    below the threshold marks its whole related region background.
    Pixels never covered by any valid window default to background
    (black image borders) unless ``uncovered_foreground`` is set.
    """
    height, width = schedule.image_shape
    fg = np.ones(height * width, dtype=bool)
    vals = valid_powers(powers, schedule)
    coords = schedule.related  # (n, m, 2)
    inside = coords[..., 0] >= 0
    flat = coords[..., 0] * width + coords[..., 1]

    quiet = vals <= thr.value
    quiet_px = flat[quiet][inside[quiet]]
    fg[np.unique(quiet_px)] = False

    if not uncovered_foreground:
        covered = np.zeros(height * width, dtype=bool)
        covered[np.unique(flat[inside])] = True
        fg[~covered] = False
    return SilhouetteImage(fg.reshape(height, width))


def attack(powers: CyclePowers, schedule: CycleSchedule,
           bin_size: float | None = None,
           uncovered_foreground: bool = False) -> tuple[SilhouetteImage, Threshold, Histogram]:
    """End-to-end background detection on one extracted power vector."""
    hist = build_histogram(powers, schedule, bin_size)
    thr = select_threshold(hist)
    sil = recover_silhouette(powers, schedule, thr, uncovered_foreground)
    return sil, thr, hist


def threshold_sweep(powers: CyclePowers, schedule: CycleSchedule,
                    golden: Image, thresholds,
                    reference_images: np.ndarray | None = None,
                    reference_labels: np.ndarray | None = None,
                    golden_label: int | None = None,
                    k: int = 3) -> list[dict]:
    """Accuracy-vs-threshold table for one image (evaluation mode).

    Each row holds the threshold, the marker accuracy against the
    golden image, and, when a labelled reference set is supplied, the
    recognition verdict of the k-NN proxy on the binarized silhouette.
    """
    if golden.pixels.shape != schedule.image_shape:
        raise DimensionError("golden image does not match the schedule")
    rows = []
    for t in thresholds:
        sil = recover_silhouette(powers, schedule, Threshold(float(t)))
        acc = _metrics.pixel_marker_accuracy(sil, golden)
        row = {"threshold": float(t), "pixel_accuracy": acc,
               "recognized": None, "predicted": None}
        if reference_images is not None and reference_labels is not None:
            from .imgio import binarize_markers
            pred = _metrics.knn_recognize(binarize_markers(sil),
                                          reference_images, reference_labels,
                                          k=k)
            row["predicted"] = int(pred)
            if golden_label is not None:
                row["recognized"] = bool(pred == golden_label)
        rows.append(row)
    return rows
