"""Confusion matrix, OA/AA/Kappa, the label-ratio sweep, and map rendering.

AA is the mean per-class recall (classes with no test pixels are excluded
with a warning); Kappa is chance-corrected agreement.  Unlabeled pixels
(id 0) never enter any count.  Classification maps render to binary PPM
(P6) with a fixed documented palette, index 0 painted black.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from ._util import atomic_write_bytes
from .decomposition import FeatureCube
from .sar import PolSARImage
from .superpixel import SuperpixelMap
from .training import TrainConfig, finetune, predict_map, pretrain

__all__ = [
    "ConfusionMatrix",
    "metrics",
    "evaluate_predictions",
    "ratio_sweep",
    "sweep_rows_to_csv",
    "SWEEP_CSV_HEADER",
    "confusion_to_csv",
    "DEFAULT_PALETTE",
    "render_map",
    "write_map_ppm",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predictions; labeled test pixels only."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if not np.issubdtype(counts.dtype, np.integer):
            raise ValueError("confusion matrix must hold integer counts")
        if counts.min() < 0:
            raise ValueError("confusion matrix counts must be non-negative")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def evaluate_predictions(
    labels: np.ndarray,
    predicted: np.ndarray,
    exclude: np.ndarray | None = None,
    n_classes: int | None = None,
) -> ConfusionMatrix:
    """Count (true, predicted) pairs over labeled pixels.

    ``exclude`` is an optional label map whose positive entries (e.g. the
    fine-tuning pixels) are dropped from the evaluation.
    """
    labels = np.asarray(labels)
    predicted = np.asarray(predicted)
    if labels.shape != predicted.shape:
        raise ValueError("label and prediction shapes differ")
    mask = labels > 0
    if exclude is not None:
        mask &= np.asarray(exclude) <= 0
    true = labels[mask]
    pred = predicted[mask]
    if true.size == 0:
        raise ValueError("no labeled test pixels to evaluate")
    c = int(n_classes or max(true.max(), pred.max()))
    if pred.min() < 1 or pred.max() > c or true.max() > c:
        raise ValueError("class ids out of range for the confusion matrix")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (true - 1, pred - 1), 1)
    return ConfusionMatrix(counts)


def metrics(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(OA, AA, Kappa) of a confusion matrix.

    OA is trace/total; AA the mean per-class recall over classes that have
    test pixels; Kappa is (p_o - p_e) / (1 - p_e) with p_e from the
    marginals.  A matrix that concentrates all mass so that p_e = 1 gets
    Kappa 1 for perfect agreement and 0 otherwise.
    """
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)
    col = counts.sum(axis=0).astype(np.float64)
    oa = float(diag.sum() / total)

    present = row > 0
    if not np.all(present):
        missing = [i + 1 for i in np.flatnonzero(~present)]
        warnings.warn(f"classes without test pixels excluded from AA: {missing}",
                      stacklevel=2)
    aa = float((diag[present] / row[present]).mean())

    pe = float((row * col).sum() / (float(total) ** 2))
    if pe >= 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = float((oa - pe) / (1.0 - pe))
    return oa, aa, kappa


def confusion_to_csv(cm: ConfusionMatrix) -> str:
    lines = ["true_class," + ",".join(f"pred_{j + 1}" for j in range(cm.n_classes))]
    for i, row in enumerate(cm.counts):
        lines.append(f"{i + 1}," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


# -- ratio sweep -----------------------------------------------------------------

SWEEP_CSV_HEADER = "labeled_ratio,unlabeled_ratio,method,oa,aa,kappa,seed"


def ratio_sweep(
    img: PolSARImage,
    cube: FeatureCube,
    spmap: SuperpixelMap,
    base_config: TrainConfig,
    labeled_ratios,
    unlabeled_ratios,
) -> list[dict]:
    """Pretrain+finetune versus the supervised baseline over a ratio grid.

    Every (labeled, unlabeled) cell runs both methods with a per-cell seed
    derived from the master seed; the baseline reuses the identical label
    subset.  Returns one row per (cell, method) with OA/AA/Kappa.
    """
    if img.labels is None:
        raise ValueError("ratio sweep needs a labeled image")
    rows = []
    cell = 0
    for unlabeled in unlabeled_ratios:
        for labeled in labeled_ratios:
            if not 0.0 < labeled <= 1.0 or not 0.0 < unlabeled <= 1.0:
                raise ValueError("ratios must be in (0, 1]")
            seed = int(
                np.random.SeedSequence([base_config.seed, 100 + cell]).generate_state(1)[0]
            )
            config = dataclasses.replace(
                base_config,
                label_fraction=float(labeled),
                unlabeled_fraction=float(unlabeled),
                seed=seed,
            )
            pre = pretrain(img, cube, spmap, config)
            for method, ckpt in (("contrastive", pre.checkpoint), ("supervised", None)):
                result = finetune(ckpt, img, img.labels, config)
                predicted = predict_map(result.model, img)
                cm = evaluate_predictions(img.labels, predicted,
                                          exclude=result.train_labels)
                oa, aa, kappa = metrics(cm)
                rows.append(
                    dict(labeled_ratio=float(labeled), unlabeled_ratio=float(unlabeled),
                         method=method, oa=oa, aa=aa, kappa=kappa, seed=seed)
                )
            cell += 1
    return rows


def sweep_rows_to_csv(rows: list[dict]) -> str:
    lines = [SWEEP_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r['labeled_ratio']:g},{r['unlabeled_ratio']:g},{r['method']},"
            f"{r['oa']:.6f},{r['aa']:.6f},{r['kappa']:.6f},{r['seed']}"
        )
    return "\n".join(lines) + "\n"


# -- map rendering -----------------------------------------------------------------

# index 0 (unlabeled) is black; classes use a fixed high-contrast palette
DEFAULT_PALETTE = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (220, 190, 255),
    (170, 110, 40),
    (255, 250, 200),
    (128, 0, 0),
)


def render_map(labels: np.ndarray, palette=DEFAULT_PALETTE) -> bytes:
    """Binary PPM (P6) image of a label raster, one pixel per cell."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label raster must be 2-D")
    if labels.min() < 0 or labels.max() >= len(palette):
        raise ValueError(
            f"label {labels.max()} outside the {len(palette)}-entry palette"
        )
    lut = np.asarray(palette, dtype=np.uint8)
    rgb = lut[labels]
    h, w = labels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def write_map_ppm(path: str, labels: np.ndarray, palette=DEFAULT_PALETTE) -> None:
    atomic_write_bytes(path, render_map(labels, palette))
