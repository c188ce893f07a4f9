"""Patch-level aggregation of typicality and selection of visual elements."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

Box = Tuple[int, int, int, int]  # (x0, y0, width, height) in pixels


@dataclass(frozen=True)
class PatchRef:
    image_id: str
    box: Box
    score: float
    label: str

    def __post_init__(self):
        x0, y0, w, h = self.box
        if w <= 0 or h <= 0 or x0 < 0 or y0 < 0:
            raise ValueError(f"invalid box {self.box}")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "box": list(self.box), "score": self.score,
                "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchRef":
        return cls(d["image_id"], tuple(int(v) for v in d["box"]), float(d["score"]), d["label"])


@dataclass(frozen=True)
class MinerConfig:
    patch_size: Tuple[int, int] = (64, 64)
    stride: Optional[int] = None  # defaults to patch width // 4
    per_image_k: int = 5
    global_k: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        if self.stride is None:
            object.__setattr__(self, "stride", max(1, self.patch_size[0] // 4))
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.per_image_k < 1:
            raise ValueError("per_image_k must be >= 1")
        if self.global_k < self.per_image_k:
            raise ValueError("global_k must be >= per_image_k")

    def to_dict(self) -> dict:
        return {"patch_size": list(self.patch_size), "stride": self.stride,
                "per_image_k": self.per_image_k, "global_k": self.global_k}


def box_means(values: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
    """Mean of ``values`` inside each box, via a summed-area table."""
    values = np.asarray(values, dtype=np.float64)
    sat = np.zeros((values.shape[0] + 1, values.shape[1] + 1))
    sat[1:, 1:] = values.cumsum(0).cumsum(1)
    out = np.empty(len(boxes))
    for i, (x0, y0, w, h) in enumerate(boxes):
        total = sat[y0 + h, x0 + w] - sat[y0, x0 + w] - sat[y0 + h, x0] + sat[y0, x0]
        out[i] = total / (w * h)
    return out


def candidate_boxes(height: int, width: int, cfg: MinerConfig) -> List[Box]:
    pw, ph = cfg.patch_size
    if pw > width or ph > height:
        raise ValueError(f"patch {cfg.patch_size} larger than image {width}x{height}")
    return [(x0, y0, pw, ph)
            for y0 in range(0, height - ph + 1, cfg.stride)
            for x0 in range(0, width - pw + 1, cfg.stride)]


def patch_scores(values: np.ndarray, cfg: MinerConfig) -> List[Tuple[Box, float]]:
    """Score every stride-grid patch position in row-major (y0, x0) order."""
    values = getattr(values, "values", values)
    boxes = candidate_boxes(values.shape[0], values.shape[1], cfg)
    return list(zip(boxes, box_means(values, boxes).tolist()))


def boxes_overlap(a: Box, b: Box) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def select_top_patches(scores: Sequence[Tuple[Box, float]], k: int, *, image_id: str = "",
                       label: str = "") -> List[PatchRef]:
    """Greedy non-overlapping selection by descending score.

    Ties are broken by scan order (y0, then x0). "Non-overlapping" means no
    shared pixel.
    """
    if not scores:
        raise ValueError("no candidate patches")
    order = sorted(scores, key=lambda bs: (-bs[1], bs[0][1], bs[0][0]))
    chosen: List[PatchRef] = []
    for box, score in order:
        if len(chosen) == k:
            break
        if any(boxes_overlap(box, p.box) for p in chosen):
            continue
        chosen.append(PatchRef(image_id, tuple(box), float(score), label))
    return chosen


def global_top(patches: Iterable[Iterable[PatchRef]], global_k: int) -> List[PatchRef]:
    pool = [p for per_image in patches for p in per_image]
    pool.sort(key=lambda p: (-p.score, p.image_id, p.box[1], p.box[0]))
    return pool[:global_k]


def mine_image(tmap, cfg: MinerConfig) -> List[PatchRef]:
    return select_top_patches(patch_scores(tmap.values, cfg), cfg.per_image_k,
                              image_id=tmap.image_id, label=tmap.label)


def mine_label(maps: Iterable, cfg: MinerConfig) -> List[PatchRef]:
    """Per-image top patches, then the dataset-wide most typical ``global_k``."""
    return global_top((mine_image(m, cfg) for m in maps), cfg.global_k)


# -- manifests and crops ------------------------------------------------------

def write_patch_manifest(path, patches: Sequence[PatchRef]) -> None:
    lines = [json.dumps(p.to_dict(), sort_keys=True) for p in patches]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_patch_manifest(path) -> List[PatchRef]:
    text = Path(path).read_text()
    return [PatchRef.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def crop(pixels: np.ndarray, box: Box) -> np.ndarray:
    x0, y0, w, h = box
    if y0 + h > pixels.shape[0] or x0 + w > pixels.shape[1]:
        raise ValueError(f"box {box} outside image {pixels.shape[:2]}")
    return pixels[y0:y0 + h, x0:x0 + w]


def crop_filename(rank: int, patch: PatchRef) -> str:
    return f"{rank}_{patch.image_id}_{patch.box[0]}_{patch.box[1]}.png"
