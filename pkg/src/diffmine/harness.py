"""Desk-scale datasets and finetuning of the toy denoiser.

The toy mining dataset draws a class-specific marker inside a fixed region
over shared random clutter, so the marker region is exactly where a label
should help denoising. The disease dataset adds a soft blob at a known box
for one class.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backends.toy import ToyBackend
from .core import ImageRecord, LabelSet, NoiseSchedule
from .images import quantize, save_png
from .medical import RoiAnnotation

log = logging.getLogger(__name__)

MARKER_LEVEL = 0.9


def marker_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Binary ``(h, w)`` stencil of a named marker shape."""
    m = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = max(1, min(w, h) // 4)
    if shape == "square":
        m[:t, :] = m[-t:, :] = m[:, :t] = m[:, -t:] = True
    elif shape == "cross":
        m[np.abs(np.arange(h) - cy) < t, :] = True
        m[:, np.abs(np.arange(w) - cx) < t] = True
    elif shape == "circle":
        r = np.hypot((yy - cy) / (h / 2.0), (xx - cx) / (w / 2.0))
        m[(r > 0.45) & (r <= 1.0)] = True
    elif shape == "diagonal":
        m[np.abs((yy - cy) * w - (xx - cx) * h) < t * max(w, h) * 0.75] = True
        m[np.abs((yy - cy) * w + (xx - cx) * h) < t * max(w, h) * 0.75] = True
    elif shape == "bar":
        m[:, np.abs(np.arange(w) - cx) < t] = True
    else:
        raise ValueError(f"unknown marker shape {shape!r}")
    return m


@dataclass
class ToyDatasetSpec:
    n_images: int = 1000
    image_size: int = 32
    classes: Tuple[str, ...] = ("square", "cross")
    marker_region: Tuple[int, int, int, int] = (20, 4, 8, 8)  # x0, y0, w, h
    noise_level: float = 0.03
    clutter: int = 12

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.marker_region = tuple(self.marker_region)
        x0, y0, w, h = self.marker_region
        s = self.image_size
        if x0 < 0 or y0 < 0 or x0 + w > s or y0 + h > s:
            raise ValueError("marker region outside canvas")
        if w * h > 0.5 * s * s:
            raise ValueError("marker region must leave at least half the canvas as background")


def _clutter(rng: np.random.Generator, canvas: np.ndarray, avoid, count: int, stencils) -> None:
    """Random rectangles and marker look-alikes outside ``avoid``.

    Look-alikes use every class stencil with equal probability, so clutter
    carries no label information.
    """
    s = canvas.shape[0]
    ax, ay, aw, ah = avoid
    shapes = list(stencils.values())
    placed = 0
    attempts = 0
    while placed < count and attempts < 50 * count:
        attempts += 1
        if rng.random() < 0.5:
            stencil = shapes[rng.integers(len(shapes))]
            h, w = stencil.shape
        else:
            w, h = rng.integers(2, 7, size=2)
            stencil = None
        x0, y0 = rng.integers(0, s - w + 1), rng.integers(0, s - h + 1)
        if x0 < ax + aw and ax < x0 + w and y0 < ay + ah and ay < y0 + h:
            continue
        if stencil is None:
            canvas[y0:y0 + h, x0:x0 + w] = rng.uniform(0.5, 1.0)
        else:
            canvas[y0:y0 + h, x0:x0 + w][stencil] = MARKER_LEVEL
        placed += 1


def generate_toy_dataset(spec: ToyDatasetSpec, seed: int = 0, split: str = "train") -> List[ImageRecord]:
    """Class ``i % n_classes`` for image ``i``; pixels quantized to 8 bits."""
    rng = np.random.default_rng(seed)
    x0, y0, w, h = spec.marker_region
    stencils = {c: marker_mask(c, w, h) for c in spec.classes}
    records = []
    for i in range(spec.n_images):
        label = spec.classes[i % len(spec.classes)]
        canvas = np.full((spec.image_size, spec.image_size), rng.uniform(0.1, 0.3))
        _clutter(rng, canvas, spec.marker_region, spec.clutter, stencils)
        region = canvas[y0:y0 + h, x0:x0 + w]
        region[stencils[label]] = MARKER_LEVEL
        canvas += spec.noise_level * rng.standard_normal(canvas.shape)
        records.append(ImageRecord(f"toy{i:05d}", quantize(canvas)[:, :, None], label, split))
    return records


@dataclass
class DiseaseDatasetSpec:
    n_images: int = 600
    image_size: int = 32
    disease: str = "mass"
    healthy: str = "nofinding"
    box_size: int = 8
    box_region: Tuple[int, int, int, int] = (4, 4, 24, 24)  # where the ROI box may sit
    amplitude: float = 0.45
    noise_level: float = 0.03


def _chest_background(rng: np.random.Generator, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
    img = 0.55 + 0.1 * (yy - 0.5) + rng.uniform(-0.05, 0.05)
    for cx in (0.3, 0.7):
        cx = cx + rng.uniform(-0.03, 0.03)
        lung = ((xx - cx) / 0.17) ** 2 + ((yy - 0.5) / 0.36) ** 2
        img -= 0.3 * np.exp(-lung ** 2)
    return img


def generate_disease_dataset(spec: DiseaseDatasetSpec, seed: int = 0, split: str = "train"):
    """Alternate healthy/diseased images; returns ``(records, rois)``.

    Diseased images carry a Gaussian blob centred in a random ``box_size``
    box inside ``box_region``; that box is the ROI.
    """
    rng = np.random.default_rng(seed)
    s, b = spec.image_size, spec.box_size
    rx, ry, rw, rh = spec.box_region
    yy, xx = np.mgrid[0:s, 0:s]
    records, rois = [], []
    for i in range(spec.n_images):
        img = _chest_background(rng, s)
        diseased = i % 2 == 1
        label = spec.disease if diseased else spec.healthy
        rid = f"cxr{i:05d}"
        if diseased:
            bx = int(rng.integers(rx, rx + rw - b + 1))
            by = int(rng.integers(ry, ry + rh - b + 1))
            cx, cy = bx + (b - 1) / 2.0, by + (b - 1) / 2.0
            img += spec.amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (b / 4.0) ** 2))
            rois.append(RoiAnnotation(rid, spec.disease, [(bx, by, b, b)]))
        img += spec.noise_level * rng.standard_normal(img.shape)
        records.append(ImageRecord(rid, quantize(img)[:, :, None], label, split))
    return records, rois


def write_image_folder(records: Sequence[ImageRecord], root, label_column: str = "label") -> Path:
    """PNG files plus a ``labels.csv`` (filename, label, split) for ingestion."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", label_column, "split"])
        for rec in records:
            name = f"{rec.id}.png"
            save_png(root / "images" / name, rec.pixels)
            writer.writerow([name, rec.label, rec.split])
    return root


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    checkpoint_every: int = 500
    null_prob: float = 0.2

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("steps, batch_size and checkpoint_every must be positive")
        if self.learning_rate < 0 or not 0 <= self.null_prob < 1:
            raise ValueError("invalid learning rate or null_prob")


class TrainingDiverged(RuntimeError):
    pass


def denoising_loss(model, x: torch.Tensor, eps: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """Mean per-element squared noise-prediction error over a batch."""
    signal, noise = sched.coefficients(t.detach().cpu().numpy().astype(np.float64))
    signal = torch.as_tensor(np.asarray(signal), dtype=x.dtype).view(-1, 1, 1, 1)
    noise = torch.as_tensor(np.asarray(noise), dtype=x.dtype).view(-1, 1, 1, 1)
    pred = model(signal * x + noise * eps, t, cond)
    return ((pred - eps) ** 2).mean()


@dataclass
class TrainResult:
    backend: ToyBackend
    losses: List[float] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)


def finetune(backend: ToyBackend, dataset: Sequence[ImageRecord], labels: LabelSet, cfg: TrainConfig,
             sched: Optional[NoiseSchedule] = None, out_dir=None, divergence_window: int = 100) -> TrainResult:
    """Minimize the conditional denoising loss with Adam.

    Each step draws a batch, ``t ~ U[0, 1]``, Gaussian noise and, with
    probability ``null_prob`` per sample, swaps the label prompt for the null
    prompt so the null conditioning stays calibrated.
    """
    sched = sched or NoiseSchedule()
    model = backend.model
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("backend has no trainable parameters")
    if not dataset:
        raise ValueError("empty training set")
    data = torch.from_numpy(np.stack([backend.encode(r.pixels) for r in dataset])
                            .astype(np.float32).transpose(0, 3, 1, 2))
    label_index = {lab: i for i, lab in enumerate(labels.labels)}
    prompts = [backend.conditioning(labels, lab) for lab in labels.labels]
    prompts.append(backend.conditioning(labels, None))
    table = torch.as_tensor(np.stack([c.embedding for c in prompts]), dtype=torch.float32)
    y = torch.as_tensor([label_index[r.label] for r in dataset])
    null_idx = len(labels.labels)

    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(backend)
    model.train()
    initial = None
    bad_run = 0
    for step in range(1, cfg.steps + 1):
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        x = data[idx]
        t = torch.rand(cfg.batch_size, generator=gen)
        eps = torch.randn(x.shape, generator=gen)
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.null_prob
        cond = table[torch.where(drop, torch.full_like(y[idx], null_idx), y[idx])]
        loss = denoising_loss(model, x, eps, t, cond, sched)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float(loss.detach())
        result.losses.append(value)
        if initial is None:
            initial = value
        bad_run = bad_run + 1 if (not np.isfinite(value) or value > 10 * initial) else 0
        if bad_run >= divergence_window:
            model.eval()
            raise TrainingDiverged(
                f"loss above 10x initial ({initial:.4g}) for {divergence_window} steps; "
                f"step {step}, last loss {value:.4g}, lr {cfg.learning_rate}")
        if out_dir is not None and step % cfg.checkpoint_every == 0:
            model.eval()
            backend.refresh_identifier()
            path = out_dir / f"checkpoint_{step:06d}.pt"
            backend.save(path)
            result.checkpoints.append(str(path))
            model.train()
    model.eval()
    backend.refresh_identifier()
    if out_dir is not None:
        write_loss_curve(out_dir / "loss_curve.csv", result.losses)
        (out_dir / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    log.info("finetune: %d steps, loss %.4f -> %.4f", cfg.steps, result.losses[0], result.losses[-1])
    return result


def write_loss_curve(path, losses: Sequence[float]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            writer.writerow([i, repr(float(v))])


def read_loss_curve(path) -> List[float]:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]
