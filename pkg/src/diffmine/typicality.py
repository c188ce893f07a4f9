"""Monte-Carlo typicality: how much the label conditioning helps denoising.

For an image ``x`` and label ``c`` the per-location estimate is the mean over
draws ``(eps, t)`` of ``loss(x, eps, t, null) - loss(x, eps, t, c)`` with
``t ~ U[t_min, t_max]``. With ``paired=True`` both conditionings see the same
draw (common random numbers).

Noise draws are keyed by ``(seed, image_id)`` only, so an image scored under
different labels, or a translated copy that keeps its source id, sees the
same noise.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (BackendError, Conditioning, DenoiserBackend, ImageRecord, LabelSet,
                   NoiseSchedule, loss_map, stable_hash)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TypicalityConfig:
    t_min: float = 0.1
    t_max: float = 0.7
    n_samples: int = 32
    seed: int = 0
    paired: bool = True
    chunk_size: int = 16

    def __post_init__(self):
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ValueError(f"need 0 <= t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if self.n_samples < 1 or self.chunk_size < 1:
            raise ValueError("n_samples and chunk_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TypicalityMap:
    values: np.ndarray
    image_id: str
    label: str
    n_samples: int
    config_hash: str = ""

    @property
    def scalar(self) -> float:
        return float(np.mean(self.values))


def config_hash(cfg: TypicalityConfig, sched: NoiseSchedule, backend: DenoiserBackend,
                labels: Optional[LabelSet] = None) -> str:
    payload = {"typicality": cfg.to_dict(), "schedule": sched.to_dict(),
               "backend": backend.identifier,
               "labels": labels.to_dict() if labels is not None else None}
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _interp_matrix(n_in: int, n_out: int, align_corners: bool) -> np.ndarray:
    if align_corners:
        pos = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * (n_in - 1) / (n_out - 1)
    else:
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def upsample_map(m: np.ndarray, scale_factor: int, *, align_corners: bool = False) -> np.ndarray:
    """Bilinear upsampling of a 2-D map by an integer factor per axis.

    The default half-pixel alignment with edge clamping gives every input
    cell total weight ``scale_factor`` per axis, so the map mean is preserved.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {m.shape}")
    if scale_factor < 1 or int(scale_factor) != scale_factor:
        raise ValueError(f"scale_factor must be a positive integer, got {scale_factor}")
    if scale_factor == 1:
        return m.copy()
    h, w = m.shape
    rows = _interp_matrix(h, h * scale_factor, align_corners)
    cols = _interp_matrix(w, w * scale_factor, align_corners)
    return rows @ m @ cols.T


def _draws(rng: np.random.Generator, cfg: TypicalityConfig, shape: tuple):
    t = rng.uniform(cfg.t_min, cfg.t_max, size=cfg.n_samples)
    eps = rng.standard_normal((cfg.n_samples,) + shape)
    return t, eps


def sample_losses(x: np.ndarray, cond: Conditioning, backend: DenoiserBackend, sched: NoiseSchedule,
                  t: np.ndarray, eps: np.ndarray, chunk_size: int, image_id: str) -> np.ndarray:
    """Loss maps for each draw, shape ``(n, h, w)``, computed in fixed chunks."""
    out = np.empty((len(t),) + x.shape[:2])
    xs = np.broadcast_to(x, (chunk_size,) + x.shape)
    for start in range(0, len(t), chunk_size):
        stop = min(start + chunk_size, len(t))
        try:
            out[start:stop] = loss_map(xs[: stop - start], eps[start:stop], t[start:stop], cond,
                                       backend, sched, image_id=image_id)
        except BackendError as exc:
            raise BackendError(str(exc), image_id=image_id, sample_index=start) from exc
    return out


def estimate_typicality(x: ImageRecord, cond: Conditioning, null_cond: Conditioning,
                        backend: DenoiserBackend, sched: NoiseSchedule, cfg: TypicalityConfig,
                        *, noise_key: Optional[str] = None, chash: str = ""):
    """Return ``(scalar, TypicalityMap)`` for one image under one label.

    ``noise_key`` overrides the image id used to key the noise stream.
    """
    if cond.is_null:
        raise ValueError("cond must be a non-null conditioning")
    if not null_cond.is_null:
        raise ValueError("null_cond must be the null conditioning")
    latent = backend.encode(x.pixels)
    key = x.id if noise_key is None else noise_key
    seq = np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, stable_hash(key)])
    if cfg.paired:
        t_c, eps_c = _draws(np.random.default_rng(seq), cfg, latent.shape)
        t_n, eps_n = t_c, eps_c
    else:
        seq_c, seq_n = seq.spawn(2)
        t_c, eps_c = _draws(np.random.default_rng(seq_c), cfg, latent.shape)
        t_n, eps_n = _draws(np.random.default_rng(seq_n), cfg, latent.shape)
    loss_c = sample_losses(latent, cond, backend, sched, t_c, eps_c, cfg.chunk_size, x.id)
    loss_n = sample_losses(latent, null_cond, backend, sched, t_n, eps_n, cfg.chunk_size, x.id)
    latent_map = np.mean(loss_n - loss_c, axis=0)
    values = upsample_map(latent_map, backend.scale_factor)
    tmap = TypicalityMap(values, x.id, x.label, cfg.n_samples, chash)
    return tmap.scalar, tmap


def typicality_for_label(x: ImageRecord, label: str, labels: LabelSet, backend: DenoiserBackend,
                         sched: NoiseSchedule, cfg: TypicalityConfig, *,
                         noise_key: Optional[str] = None) -> TypicalityMap:
    cond = backend.conditioning(labels, label)
    null = backend.conditioning(labels, None)
    _, tmap = estimate_typicality(x, cond, null, backend, sched, cfg, noise_key=noise_key,
                                  chash=config_hash(cfg, sched, backend, labels))
    tmap.label = label
    return tmap


# -- score cache --------------------------------------------------------------

GRID_MAGIC = b"DMGRID01"


def write_grid(path: Path, values: np.ndarray) -> None:
    """Little-endian float32 grid: magic, uint32 ndim, uint32 dims, data."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    header = GRID_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    _atomic_write(Path(path), header + arr.tobytes())


def read_grid(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid file")
    (ndim,) = struct.unpack_from("<I", blob, 8)
    shape = struct.unpack_from(f"<{ndim}I", blob, 12)
    offset = 12 + 4 * ndim
    count = int(np.prod(shape)) if shape else 1
    if len(blob) - offset != 4 * count:
        raise ValueError(f"{path}: truncated grid")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


class ScoreCache:
    """One directory per run.

    Layout::

        <root>/maps/<image_id>__<label>.grid   float32 grid (see write_grid)
        <root>/maps/<image_id>__<label>.json   {"id", "label", "config_hash", "scalar", "shape"}
        <root>/index.jsonl                     one entry line per scored (id, label)

    Stored scalars are the mean of the stored float32 map.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _stem(self, image_id: str, label: str) -> Path:
        return self.root / "maps" / f"{_safe(image_id)}__{_safe(label)}"

    def get(self, image_id: str, label: str, chash: str) -> Optional[TypicalityMap]:
        stem = self._stem(image_id, label)
        try:
            meta = json.loads(stem.with_suffix(".json").read_text())
            if meta.get("config_hash") != chash or meta.get("id") != image_id:
                return None
            values = read_grid(stem.with_suffix(".grid"))
            if list(values.shape) != meta["shape"]:
                return None
        except (OSError, ValueError, KeyError):
            return None
        return TypicalityMap(values.astype(np.float64), image_id, label, meta["n_samples"], chash)

    def put(self, tmap: TypicalityMap) -> TypicalityMap:
        stem = self._stem(tmap.image_id, tmap.label)
        stored = np.asarray(tmap.values, dtype="<f4")
        write_grid(stem.with_suffix(".grid"), stored)
        meta = {"id": tmap.image_id, "label": tmap.label, "config_hash": tmap.config_hash,
                "scalar": float(np.mean(stored.astype(np.float64))), "shape": list(stored.shape),
                "n_samples": tmap.n_samples}
        _atomic_write(stem.with_suffix(".json"), json.dumps(meta, sort_keys=True).encode())
        return TypicalityMap(stored.astype(np.float64), tmap.image_id, tmap.label,
                             tmap.n_samples, tmap.config_hash)

    def write_index(self, maps: Iterable[TypicalityMap]) -> None:
        lines = [json.dumps({"id": m.image_id, "label": m.label, "config_hash": m.config_hash,
                             "scalar": m.scalar}, sort_keys=True) for m in maps]
        _atomic_write(self.root / "index.jsonl", ("\n".join(lines) + "\n" if lines else "").encode())


@dataclass
class ScoreStore:
    maps: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, key) -> TypicalityMap:
        return self.maps[key]

    def scalar(self, image_id: str, label: str) -> float:
        return self.maps[(image_id, label)].scalar

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return 1.0 if total == 0 else self.hits / total


def batch_typicality(dataset: Sequence[ImageRecord], labels: LabelSet, backend: DenoiserBackend,
                     sched: NoiseSchedule, cfg: TypicalityConfig, *, cache: Optional[ScoreCache] = None,
                     workers: int = 1, score_labels: Optional[Sequence[str]] = None) -> ScoreStore:
    """Score every record under its own label (or each of ``score_labels``)."""
    for rec in dataset:
        if rec.label not in labels:
            raise ValueError(f"{rec.id}: label {rec.label!r} not in label set")
    chash = config_hash(cfg, sched, backend, labels)
    cond_by_label = {lab: backend.conditioning(labels, lab) for lab in labels.labels}
    null = backend.conditioning(labels, None)
    jobs = [(rec, lab) for rec in dataset for lab in (score_labels or [rec.label])]

    def run(job):
        rec, lab = job
        if cache is not None:
            hit = cache.get(rec.id, lab, chash)
            if hit is not None:
                return hit, True
        _, tmap = estimate_typicality(rec, cond_by_label[lab], null, backend, sched, cfg, chash=chash)
        tmap.label = lab
        if cache is not None:
            tmap = cache.put(tmap)
        return tmap, False

    if workers > 1 and backend.concurrent_safe:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    store = ScoreStore()
    for (rec, lab), (tmap, hit) in zip(jobs, results):
        store.maps[(rec.id, lab)] = tmap
        if hit:
            store.hits += 1
        else:
            store.misses += 1
    if cache is not None:
        cache.write_index(store.maps.values())
    log.info("typicality: %d entries, %d cache hits", len(store), store.hits)
    return store
