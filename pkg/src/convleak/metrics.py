"""Recovery-quality scoring: marker accuracy, pixel distance, and a
k-NN recognition proxy with its confusion map.

The k-NN proxy stands in for a trained golden classifier: it is
dependency-free, deterministic, and its clean-image accuracy is pinned
by a benchmark test so recognition numbers on recovered images stay
interpretable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .imgio import Image, SilhouetteImage


def pixel_marker_accuracy(recovered: SilhouetteImage, golden: Image) -> float:
    """Fraction of pixels whose background/foreground marker matches.

    Golden markers derive from the pure-black rule: value 0 is
    background, anything else foreground.
    """
    if recovered.markers.shape != golden.pixels.shape:
        raise DimensionError("silhouette and golden image sizes differ")
    golden_fg = golden.pixels != 0
    return float(np.mean(recovered.markers == golden_fg))


def pixel_value_distance(recovered: Image, golden: Image) -> float:
    """Mean per-pixel absolute intensity difference."""
    if recovered.pixels.shape != golden.pixels.shape:
        raise DimensionError("image sizes differ")
    a = recovered.pixels.astype(np.int64)
    b = golden.pixels.astype(np.int64)
    return float(np.mean(np.abs(a - b)))


def _as_matrix(images) -> np.ndarray:
    """Stack a list of Images (or an (n, h, w) array) into (n, h*w) int16."""
    if isinstance(images, np.ndarray):
        arr = images
    else:
        arr = np.stack([im.pixels for im in images])
    return arr.reshape(arr.shape[0], -1).astype(np.int16)


def knn_recognize(img: Image, reference_images, reference_labels,
                  k: int = 3) -> int:
    """Majority label of the k nearest references under mean-absolute
    pixel distance. Vote ties resolve to the smallest label."""
    return int(knn_recognize_batch([img], reference_images,
                                   reference_labels, k=k)[0])


def knn_recognize_batch(images, reference_images, reference_labels,
                        k: int = 3, chunk: int = 64) -> np.ndarray:
    """Vectorized k-NN over many query images.

    Distance ranking uses a stable sort so equidistant references
    resolve deterministically by their position in the reference set.
    """
    if k % 2 == 0:
        raise ConfigError("k must be odd")
    refs = _as_matrix(reference_images)
    labels = np.asarray(reference_labels, dtype=np.int64)
    if len(refs) == 0:
        raise ConfigError("reference set is empty")
    if len(refs) != len(labels):
        raise ConfigError("reference images and labels differ in length")
    queries = _as_matrix(images)
    out = np.empty(len(queries), dtype=np.int64)
    for lo in range(0, len(queries), chunk):
        q = queries[lo:lo + chunk]
        # (nq, nref) summed absolute differences
        d = np.abs(q[:, None, :] - refs[None, :, :]).sum(axis=2)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        for i, nn in enumerate(order):
            votes = np.bincount(labels[nn], minlength=10)
            out[lo + i] = int(np.argmax(votes))  # argmax takes smallest on ties
    return out


def classification_map(golden_labels, predicted_labels,
                       n_classes: int = 10) -> tuple[np.ndarray, list[int]]:
    """Column-normalized confusion map.

    Cell (i, j) is the fraction of images with golden class j predicted
    as class i. Classes absent from the golden labels keep a NaN column
    and are returned in the missing list rather than fabricated.
    """
    golden = np.asarray(golden_labels, dtype=np.int64)
    pred = np.asarray(predicted_labels, dtype=np.int64)
    if len(golden) != len(pred):
        raise DimensionError("label vectors differ in length")
    table = np.zeros((n_classes, n_classes), dtype=np.float64)
    missing = []
    for j in range(n_classes):
        sel = golden == j
        if not np.any(sel):
            table[:, j] = np.nan
            missing.append(j)
            continue
        counts = np.bincount(pred[sel], minlength=n_classes)[:n_classes]
        table[:, j] = counts / counts.sum()
    return table, missing


@dataclass
class EvalReport:
    """Scores for a batch of recovered images."""

    per_image: list[dict] = field(default_factory=list)
    mean_pixel_metric: float = float("nan")
    recognition_accuracy: float = float("nan")
    class_map: np.ndarray | None = None
    missing_classes: list[int] = field(default_factory=list)

    def diagonal_dominance(self) -> float:
        """Mean diagonal cell over columns that have data."""
        if self.class_map is None:
            return float("nan")
        diag = np.diag(self.class_map)
        return float(np.nanmean(diag))


def evaluate_recovered(recovered_images, golden_images, golden_labels,
                       reference_images, reference_labels,
                       k: int = 3) -> EvalReport:
    """Score recovered images: per-image pixel distance plus recognition."""
    preds = knn_recognize_batch(recovered_images, reference_images,
                                reference_labels, k=k)
    golden_labels = np.asarray(golden_labels, dtype=np.int64)
    rows = []
    dists = []
    for i, (rec, gold) in enumerate(zip(recovered_images, golden_images)):
        d = pixel_value_distance(rec, gold)
        dists.append(d)
        rows.append({"index": i, "golden_label": int(golden_labels[i]),
                     "predicted": int(preds[i]),
                     "correct": bool(preds[i] == golden_labels[i]),
                     "pixel_distance": d})
    table, missing = classification_map(golden_labels, preds)
    return EvalReport(
        per_image=rows,
        mean_pixel_metric=float(np.mean(dists)) if dists else float("nan"),
        recognition_accuracy=float(np.mean(preds == golden_labels)),
        class_map=table,
        missing_classes=missing,
    )
