"""PNG/JPEG IO, 8-bit quantization and simple grid rendering."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap [0, 1] floats to the 8-bit grid so PNG round-trips are exact."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    return np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, pixels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG")


def load_image(path, channels: Optional[int] = None) -> np.ndarray:
    """Decode to ``(H, W, C)`` float64 in [0, 1]."""
    with Image.open(path) as im:
        if channels == 1 or (channels is None and im.mode in ("L", "I", "I;16", "1")):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def resize(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    channels = pixels.shape[2]
    im = Image.fromarray(to_uint8(pixels))
    im = im.resize((width, height), Image.BICUBIC)
    arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[:, :, None] if channels == 1 else arr


def pixel_hash(path) -> str:
    """Hash of decoded pixels, independent of codec bytes."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    h = hashlib.sha256(str(arr.shape).encode() + str(arr.dtype).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def to_rgb(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    return np.repeat(px, 3, axis=2) if px.shape[2] == 1 else px


def grid_sheet(rows: Sequence[Sequence[Optional[np.ndarray]]], cell: int = 64, pad: int = 4,
               highlight: Optional[Sequence[Sequence[bool]]] = None,
               background: int = 255) -> Image.Image:
    """Lay out crops in a rows x columns grid; ``None`` leaves a blank cell.

    Crops are resized to ``cell`` px (nearest). Highlighted cells get a red
    frame.
    """
    n_rows = len(rows)
    n_cols = max((len(r) for r in rows), default=0)
    sheet = Image.new("RGB", (pad + n_cols * (cell + pad), pad + n_rows * (cell + pad)),
                      (background,) * 3)
    draw = ImageDraw.Draw(sheet)
    for i, row in enumerate(rows):
        for j, crop in enumerate(row):
            if crop is None:
                continue
            x, y = pad + j * (cell + pad), pad + i * (cell + pad)
            im = Image.fromarray(to_uint8(to_rgb(crop))).resize((cell, cell), Image.NEAREST)
            sheet.paste(im, (x, y))
            if highlight is not None and highlight[i][j]:
                draw.rectangle([x - 2, y - 2, x + cell + 1, y + cell + 1], outline=(255, 0, 0), width=2)
    return sheet


def heatmap_overlay(pixels: np.ndarray, heatmap: np.ndarray, boxes=(), alpha: float = 0.5) -> Image.Image:
    """Blend a normalized heatmap (red channel) over the image and draw boxes."""
    base = to_rgb(pixels)
    hm = np.asarray(heatmap, dtype=np.float64)
    span = hm.max() - hm.min()
    hm = (hm - hm.min()) / span if span > 0 else np.zeros_like(hm)
    color = np.stack([hm, np.zeros_like(hm), 1.0 - hm], axis=2)
    im = Image.fromarray(to_uint8((1 - alpha) * base + alpha * color))
    draw = ImageDraw.Draw(im)
    for x0, y0, w, h in boxes:
        draw.rectangle([x0, y0, x0 + w - 1, y0 + h - 1], outline=(255, 0, 0))
    return im
