"""Typicality heatmaps as weakly-supervised localizers, scored by AUC-PR."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import DenoiserBackend, ImageRecord, LabelSet, NoiseSchedule
from .mining import Box
from .typicality import TypicalityConfig, estimate_typicality, upsample_map

log = logging.getLogger(__name__)


@dataclass
class RoiAnnotation:
    image_id: str
    disease: str
    boxes: List[Box]

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape[:2], dtype=bool)
        for x0, y0, w, h in self.boxes:
            if x0 < 0 or y0 < 0 or x0 + w > shape[1] or y0 + h > shape[0] or w <= 0 or h <= 0:
                raise ValueError(f"{self.image_id}: ROI {(x0, y0, w, h)} outside image {shape[:2]}")
            m[y0:y0 + h, x0:x0 + w] = True
        return m


@dataclass
class LocalizationResult:
    heatmap: np.ndarray
    disease: str
    auc_pr: float


def read_roi_table(path) -> List[RoiAnnotation]:
    """Rows ``image_id,disease,x,y,w,h``; several rows for one (image, disease) merge."""
    grouped: Dict[tuple, RoiAnnotation] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["image_id"], row["disease"])
            box = tuple(int(round(float(row[c]))) for c in ("x", "y", "w", "h"))
            grouped.setdefault(key, RoiAnnotation(key[0], key[1], [])).boxes.append(box)
    return list(grouped.values())


def write_roi_table(path, rois: Sequence[RoiAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "disease", "x", "y", "w", "h"])
        for roi in rois:
            for box in roi.boxes:
                writer.writerow([roi.image_id, roi.disease, *box])


def blur(values: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.asarray(values, dtype=np.float64).copy()
    return gaussian_filter(np.asarray(values, dtype=np.float64), sigma, mode="reflect", truncate=4.0)


def disease_heatmap(x: ImageRecord, disease: str, labels: LabelSet, backend: DenoiserBackend,
                    sched: NoiseSchedule, cfg: TypicalityConfig,
                    blur_sigma: Optional[float] = None) -> np.ndarray:
    """Per-latent typicality for ``disease``, interpolated to pixels and blurred.

    ``blur_sigma`` defaults to two latent cells in pixels.
    """
    if disease not in labels:
        raise ValueError(f"unknown disease label {disease!r}")
    cond = backend.conditioning(labels, disease)
    null = backend.conditioning(labels, None)
    _, tmap = estimate_typicality(x, cond, null, backend, sched, cfg)
    sigma = 2.0 * backend.scale_factor if blur_sigma is None else blur_sigma
    return blur(tmap.values, sigma)


def heatmap_from_latent(latent_map: np.ndarray, scale_factor: int, blur_sigma: float) -> np.ndarray:
    return blur(upsample_map(latent_map, scale_factor), blur_sigma)


def auc_pr(heatmap: np.ndarray, roi) -> float:
    """Average precision of pixel scores against ROI-box positives.

    Thresholds run over distinct scores in descending order; tied pixels
    enter together. AP = sum over thresholds of (recall gain) * precision.
    ``roi`` is a :class:`RoiAnnotation` or a boolean mask.
    """
    scores = np.asarray(heatmap, dtype=np.float64)
    mask = roi.mask(scores.shape) if isinstance(roi, RoiAnnotation) else np.asarray(roi, dtype=bool)
    if mask.shape != scores.shape:
        raise ValueError(f"heatmap {scores.shape} and mask {mask.shape} differ")
    s = scores.ravel()
    y = mask.ravel()
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("AUC-PR undefined for all-positive or all-negative masks")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), y.size - 1]
    tp = np.cumsum(y)[last_of_group]
    seen = last_of_group + 1
    precision = tp / seen
    recall = tp / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return float(np.sum(gains * precision))


@dataclass
class LocalizationTable:
    diseases: List[str]
    columns: Dict[str, Dict[str, float]]  # backend name -> disease -> mean AUC-PR
    counts: Dict[str, int]
    skipped: int = 0

    def overall(self, column: str) -> float:
        vals = [self.columns[column][d] for d in self.diseases if d in self.columns[column]]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> List[List[str]]:
        names = list(self.columns)
        header = ["disease", "n"] + names
        out = [header]
        for d in self.diseases:
            out.append([d, str(self.counts.get(d, 0))] +
                       [f"{self.columns[n].get(d, float('nan')):.4f}" for n in names])
        out.append(["overall", str(sum(self.counts.values()))] + [f"{self.overall(n):.4f}" for n in names])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.rows())


def evaluate_localization(test_set: Sequence[ImageRecord], annotations: Sequence[RoiAnnotation],
                          labels: LabelSet, backends: Mapping[str, DenoiserBackend],
                          sched: NoiseSchedule, cfg: TypicalityConfig,
                          blur_sigma: Optional[float] = None,
                          diseases: Optional[Sequence[str]] = None,
                          heatmap_sink=None) -> LocalizationTable:
    """Mean AUC-PR per disease for each backend (e.g. pretrained vs finetuned).

    Overall is the mean of the per-disease means. Images without an
    annotation are skipped and counted.
    """
    by_image: Dict[str, List[RoiAnnotation]] = {}
    for roi in annotations:
        by_image.setdefault(roi.image_id, []).append(roi)
    diseases = list(diseases) if diseases else sorted({roi.disease for roi in annotations})
    per: Dict[str, Dict[str, List[float]]] = {name: {d: [] for d in diseases} for name in backends}
    skipped = 0
    for rec in test_set:
        rois = by_image.get(rec.id)
        if not rois:
            skipped += 1
            continue
        for roi in rois:
            if roi.disease not in diseases:
                continue
            for name, backend in backends.items():
                hm = disease_heatmap(rec, roi.disease, labels, backend, sched, cfg, blur_sigma)
                per[name][roi.disease].append(auc_pr(hm, roi))
                if heatmap_sink is not None:
                    heatmap_sink(name, rec, roi, hm)
    columns = {name: {d: float(np.mean(v)) for d, v in per[name].items() if v} for name in backends}
    first = next(iter(per.values())) if per else {}
    counts = {d: len(v) for d, v in first.items()}
    if skipped:
        log.warning("skipped %d images without annotations", skipped)
    return LocalizationTable(diseases, columns, counts, skipped)


# published integration targets (pretrained -> finetuned); not reproducible at toy scale
REFERENCE_AUC_PR = {
    "Mass": (0.02, 0.166),
    "Cardiomegaly": (0.06, 0.162),
    "Nodule": (0.0, 0.082),
    "Effusion": (0.033, 0.075),
    "Atelectasis": (0.013, 0.063),
    "Pneumonia": (0.04, 0.075),
    "Pneumothorax": (0.03, 0.065),
    "overall": (0.032, 0.096),
}
