"""Parallel dataset by label-to-label translation, and co-typicality mining.

Every mining image is translated to every label (itself included). A mined
source patch keeps its box in each translated variant; the sequence of
variants is scored by the median, over labels, of each variant's typicality
under its target label.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence

import numpy as np

from .clustering import DIFT_T, FeatureEmbedder, median, rank_clusters, kmeans, reduce_dim, l2_normalize
from .core import DenoiserBackend, ImageRecord, LabelSet, NoiseSchedule
from .images import load_image, save_png
from .mining import MinerConfig, PatchRef, box_means, crop, mine_image
from .typicality import TypicalityConfig, typicality_for_label, _safe

log = logging.getLogger(__name__)


class TranslationBackend(Protocol):
    identifier: str

    def translate(self, pixels: np.ndarray, source_label: str, target_label: str) -> np.ndarray:
        """Return the image re-rendered as ``target_label``, same shape."""


class IdentityTranslator:
    identifier = "identity"

    def translate(self, pixels, source_label, target_label):
        return np.array(pixels, copy=True)


class StripeTintTranslator:
    """Synthetic translator: paints a horizontal stripe with a per-label level.

    The level for label ``i`` of ``labels`` is ``(i + 1) / (len(labels) + 1)``.
    """

    identifier = "stripe-tint"

    def __init__(self, labels: Sequence[str], rows: tuple = (0, 4)):
        self.levels = {lab: (i + 1) / (len(labels) + 1) for i, lab in enumerate(labels)}
        self.rows = rows

    def translate(self, pixels, source_label, target_label):
        out = np.array(pixels, dtype=np.float64, copy=True)
        out[self.rows[0]:self.rows[1]] = self.levels[target_label]
        return out


@dataclass
class ParallelStore:
    """Directory ``<root>/<image_id>/<source>__<target>.png`` plus ``manifest.jsonl``."""

    root: Path
    entries: Dict[tuple, Path] = field(default_factory=dict)
    failures: List[dict] = field(default_factory=list)
    channels: Optional[int] = None

    def path_for(self, image_id: str, source: str, target: str) -> Path:
        return self.root / _safe(image_id) / f"{_safe(source)}__{_safe(target)}.png"

    def load(self, image_id: str, target: str) -> np.ndarray:
        return load_image(self.entries[(image_id, target)], channels=self.channels)

    def write_manifest(self) -> None:
        lines = [json.dumps({"image_id": i, "target": t, "path": str(p.relative_to(self.root))},
                            sort_keys=True) for (i, t), p in self.entries.items()]
        report = {"entries": len(self.entries), "failures": self.failures}
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifest.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
        (self.root / "completeness.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    @classmethod
    def open(cls, root, channels: Optional[int] = None) -> "ParallelStore":
        root = Path(root)
        store = cls(root, channels=channels)
        for line in (root / "manifest.jsonl").read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                store.entries[(d["image_id"], d["target"])] = root / d["path"]
        report = root / "completeness.json"
        if report.exists():
            store.failures = json.loads(report.read_text())["failures"]
        return store


def build_parallel_dataset(images: Sequence[ImageRecord], labels: LabelSet, backend: TranslationBackend,
                           root) -> ParallelStore:
    store = ParallelStore(Path(root), channels=images[0].shape[2] if images else None)
    for rec in images:
        if rec.label not in labels:
            raise ValueError(f"{rec.id}: label {rec.label!r} not in label set")
        for target in labels.labels:
            try:
                out = np.asarray(backend.translate(rec.pixels, rec.label, target), dtype=np.float64)
                if out.shape != rec.pixels.shape:
                    raise ValueError(f"translator returned {out.shape}, expected {rec.pixels.shape}")
            except Exception as exc:
                log.warning("translation %s -> %s failed: %s", rec.id, target, exc)
                store.failures.append({"image_id": rec.id, "target": target, "error": str(exc)})
                continue
            path = store.path_for(rec.id, rec.label, target)
            save_png(path, out)
            store.entries[(rec.id, target)] = path
    store.write_manifest()
    return store


def co_typicality(values: Mapping[str, float], labels: Optional[Sequence[str]] = None) -> float:
    """Median over labels of per-label typicality."""
    if not values:
        raise ValueError("no typicality values")
    if labels is not None:
        missing = [lab for lab in labels if lab not in values]
        if missing:
            raise ValueError(f"missing typicality for label {missing[0]!r}")
        return median([values[lab] for lab in labels])
    return median(list(values.values()))


@dataclass
class TranslationSequence:
    source: PatchRef
    source_label: str
    variants: Dict[str, tuple]  # label -> (crop pixels, typicality)
    co_typicality: float
    features: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {"source": self.source.to_dict(), "source_label": self.source_label,
                "co_typicality": self.co_typicality,
                "variants": {lab: v[1] for lab, v in self.variants.items()}}


@dataclass
class SequenceMiningResult:
    ranked: List[TranslationSequence]
    clusters: list
    excluded: int = 0


def score_sequences(images: Sequence[ImageRecord], store: ParallelStore, labels: LabelSet,
                    backend: DenoiserBackend, sched: NoiseSchedule, cfg: TypicalityConfig,
                    miner: MinerConfig, source_maps: Optional[Mapping[str, object]] = None):
    """Build a scored sequence for every mined source patch.

    Source boxes come from each image's own typicality map (``source_maps``
    keyed by image id, computed here if absent). Variant typicality uses the
    source image id as noise key, so translation is the only thing that
    differs between variants.
    """
    sequences: List[TranslationSequence] = []
    excluded = 0
    for rec in images:
        tmap = source_maps[rec.id] if source_maps and rec.id in source_maps else \
            typicality_for_label(rec, rec.label, labels, backend, sched, cfg)
        boxes = [p.box for p in mine_image(tmap, miner)]
        if any((rec.id, lab) not in store.entries for lab in labels.labels):
            excluded += len(boxes)
            continue
        variant_px = {lab: store.load(rec.id, lab) for lab in labels.labels}
        variant_scores = {}
        for lab in labels.labels:
            vrec = ImageRecord(rec.id, variant_px[lab], lab, rec.split)
            vmap = typicality_for_label(vrec, lab, labels, backend, sched, cfg, noise_key=rec.id)
            variant_scores[lab] = box_means(vmap.values, boxes)
        for bi, box in enumerate(boxes):
            values = {lab: float(variant_scores[lab][bi]) for lab in labels.labels}
            src = PatchRef(rec.id, box, values[rec.label], rec.label)
            variants = {lab: (crop(variant_px[lab], box), values[lab]) for lab in labels.labels}
            sequences.append(TranslationSequence(src, rec.label, variants,
                                                 co_typicality(values, labels.labels)))
    return sequences, excluded


def sequence_features(sequences: Sequence[TranslationSequence], labels: LabelSet, embedder: FeatureEmbedder,
                      store: ParallelStore, *, target_dim: int = 32, seed: int = 0,
                      reduce: bool = True, t: float = DIFT_T) -> np.ndarray:
    """Per-variant features, reduced with one shared projection, concatenated in label order."""
    n, m = len(sequences), len(labels)
    raw = np.empty((n * m, embedder.dim))
    for i, seq in enumerate(sequences):
        for j, lab in enumerate(labels.labels):
            raw[i * m + j] = embedder.embed(store.load(seq.source.image_id, lab), seq.source.box, t)
    if reduce:
        reduced = reduce_dim(raw, target_dim, seed)
    else:
        reduced = raw
    return reduced.reshape(n, m * reduced.shape[1])


def mine_sequences(sequences: Sequence[TranslationSequence], labels: LabelSet, embedder: FeatureEmbedder,
                   store: ParallelStore, *, top_n: int = 10000, k: int = 32, seed: int = 0,
                   reduce: bool = True, target_dim: int = 32, normalize: bool = True) -> SequenceMiningResult:
    """Keep the ``top_n`` most co-typical sequences and cluster them."""
    ranked = sorted(sequences, key=lambda s: (-s.co_typicality, s.source.image_id,
                                              s.source.box[1], s.source.box[0]))[:top_n]
    if not ranked:
        return SequenceMiningResult([], [])
    feats = sequence_features(ranked, labels, embedder, store, target_dim=target_dim, seed=seed,
                              reduce=reduce)
    for seq, f in zip(ranked, feats):
        seq.features = f
    x = l2_normalize(feats) if normalize else feats
    result = kmeans(x, min(k, len(ranked)), seed)
    clusters = rank_clusters(result.assignments, result.centroids, [s.source for s in ranked], x,
                             scores=[s.co_typicality for s in ranked])
    return SequenceMiningResult(ranked, clusters)
