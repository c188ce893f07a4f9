"""Embedding, k-means clustering and ranking of mined patches."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Mapping, Optional, Protocol, Sequence

import numpy as np

from .mining import Box, PatchRef, crop

DIFT_T = 0.161


class FeatureEmbedder(Protocol):
    dim: int

    def embed(self, pixels: np.ndarray, box: Box, t: float) -> np.ndarray:
        """Feature vector for ``box`` of the full image ``pixels``."""


class FlattenEmbedder:
    """Test embedder: the flattened crop pixels."""

    def __init__(self, patch_size=(8, 8), channels: int = 1):
        self.dim = patch_size[0] * patch_size[1] * channels

    def embed(self, pixels, box, t):
        return np.asarray(crop(pixels, box), dtype=np.float64).ravel()


class EmbeddingError(RuntimeError):
    pass


def embed_patches(patches: Sequence[PatchRef], embedder: FeatureEmbedder,
                  images: Mapping[str, np.ndarray] | Callable[[str], np.ndarray],
                  t: float = DIFT_T) -> np.ndarray:
    """Stack ``embedder.embed`` over patches; rows follow ``patches`` order."""
    lookup = images if callable(images) else images.__getitem__
    out = np.empty((len(patches), embedder.dim))
    for i, p in enumerate(patches):
        try:
            out[i] = embedder.embed(lookup(p.image_id), p.box, t)
        except Exception as exc:
            raise EmbeddingError(f"embedding failed for {p.image_id} {p.box}: {exc}") from exc
    return out


def l2_normalize(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return features / np.where(norms > 0, norms, 1.0)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: List[float] = field(default_factory=list)
    n_iter: int = 0

    def __iter__(self):
        yield self.assignments
        yield self.centroids


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total)))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans(features: np.ndarray, k: int = 32, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from a seeded k-means++ start.

    Stops when assignments no longer change or after ``max_iter`` rounds.
    An empty cluster is re-seeded at the point farthest from its centroid.
    ``objective`` records the within-cluster sum of squares after each
    assignment step.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < k:
        raise ValueError(f"need at least k={k} rows, got {x.shape[0] if x.ndim == 2 else x.shape}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new_assign = d.argmin(1)
        history.append(float(d[np.arange(len(x)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        point_d = d[np.arange(len(x)), assign]
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(0)
            else:
                far = int(point_d.argmax())
                centroids[j] = x[far]
                assign[far] = j
                point_d[far] = 0.0
    return KMeansResult(assign, centroids, history, it)


def median(values: Sequence[float]) -> float:
    """Median with the mean-of-middle-two convention for even counts."""
    v = sorted(values)
    if not v:
        raise ValueError("median of empty sequence")
    mid = len(v) // 2
    return float(v[mid]) if len(v) % 2 else (v[mid - 1] + v[mid]) / 2.0


@dataclass
class ClusterSummary:
    cluster_id: int
    members: List[PatchRef]
    centroid: np.ndarray
    median_typicality: float
    distances: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"cluster_id": self.cluster_id, "median_typicality": self.median_typicality,
                "members": [dict(m.to_dict(), distance=d) for m, d in zip(self.members, self.distances)]}


def rank_clusters(assignments: np.ndarray, centroids: np.ndarray, patches: Sequence[PatchRef],
                  features: np.ndarray, scores: Optional[Sequence[float]] = None) -> List[ClusterSummary]:
    """Order clusters by descending median score, members by centroid distance.

    ``scores`` overrides the patch scores used for the median (e.g.
    co-typicality of a sequence). Ties fall back to manifest order.
    """
    assignments = np.asarray(assignments)
    if len(assignments) != len(patches):
        raise ValueError("assignments must cover all patches")
    scores = [p.score for p in patches] if scores is None else list(scores)
    summaries = []
    for cid in range(len(centroids)):
        idx = np.flatnonzero(assignments == cid)
        if len(idx) == 0:
            continue
        dist = np.linalg.norm(features[idx] - centroids[cid], axis=1)
        order = sorted(range(len(idx)), key=lambda i: (dist[i], idx[i]))
        summaries.append(ClusterSummary(
            cid, [patches[idx[i]] for i in order], centroids[cid],
            median([scores[i] for i in idx]), [float(dist[i]) for i in order]))
    summaries.sort(key=lambda s: (-s.median_typicality, s.cluster_id))
    return summaries


def cluster_patches(patches: Sequence[PatchRef], features: np.ndarray, k: int = 32, seed: int = 0,
                    normalize: bool = True, scores: Optional[Sequence[float]] = None):
    """k-means on (optionally L2-normalized) features, then rank."""
    x = l2_normalize(features) if normalize else np.asarray(features, dtype=np.float64)
    k = min(k, len(patches))
    result = kmeans(x, k, seed)
    return rank_clusters(result.assignments, result.centroids, patches, x, scores), result


def write_cluster_manifest(path, summaries: Sequence[ClusterSummary]) -> None:
    lines = []
    for rank, s in enumerate(summaries):
        lines.append(json.dumps(dict(s.to_dict(), rank=rank), sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_cluster_manifest(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def reduce_dim(features: np.ndarray, target_dim: int = 32, seed: int = 0, *, enabled: bool = True,
               n_neighbors: int = 15) -> np.ndarray:
    """UMAP projection to ``target_dim``; deterministic for a fixed seed."""
    x = np.asarray(features, dtype=np.float64)
    if not enabled:
        if x.shape[1] != target_dim:
            raise ValueError("reduction disabled but input dim != target dim")
        return x.copy()
    if len(x) == 0:
        return np.zeros((0, target_dim))
    if np.all(x == x[0]):
        return np.zeros((len(x), target_dim))
    # umap pulls in tensorflow when present
    os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
    os.environ.setdefault("TF_ENABLE_ONEDNN_OPTS", "0")
    import umap  # heavy import, kept local

    n_neighbors = max(2, min(n_neighbors, len(x) - 1))
    init = "spectral" if len(x) > target_dim + 1 else "random"
    reducer = umap.UMAP(n_components=target_dim, n_neighbors=n_neighbors, random_state=seed,
                        init=init, n_jobs=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return np.asarray(reducer.fit_transform(x), dtype=np.float64)
