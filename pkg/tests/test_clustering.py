import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffmine.clustering import (DIFT_T, FlattenEmbedder, cluster_patches, embed_patches, kmeans, median,
                                 rank_clusters, read_cluster_manifest, reduce_dim, write_cluster_manifest)
from diffmine.mining import PatchRef


def _blobs(n_per, centers, spread, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([c + spread * rng.normal(size=(n_per, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return x, y


def _patches(n, scores=None):
    scores = np.linspace(0, 1, n) if scores is None else scores
    return [PatchRef(f"im{i}", (0, 0, 2, 2), float(s), "x") for i, s in enumerate(scores)]


def test_embed_patches_examples():
    emb = FlattenEmbedder((2, 2), 1)
    assert embed_patches([], emb, {}).shape == (0, 4)
    px = np.zeros((4, 4, 1))
    other = px.copy()
    other[1, 1, 0] = 1.0
    feats = embed_patches([PatchRef("a", (0, 0, 2, 2), 0, "x"), PatchRef("a", (0, 0, 2, 2), 0, "x"),
                           PatchRef("b", (0, 0, 2, 2), 0, "x")], emb, {"a": px, "b": other})
    assert np.array_equal(feats[0], feats[1])
    assert np.linalg.norm(feats[0] - feats[2]) == 1.0


def test_embedder_receives_dift_time():
    seen = []

    class Spy(FlattenEmbedder):
        def embed(self, pixels, box, t):
            seen.append(t)
            return super().embed(pixels, box, t)

    embed_patches([PatchRef("a", (0, 0, 2, 2), 0, "x")], Spy((2, 2)), {"a": np.zeros((4, 4, 1))})
    assert seen == [DIFT_T]


def test_kmeans_single_cluster_is_mean():
    x = np.random.default_rng(0).normal(size=(20, 3))
    res = kmeans(x, 1)
    assert np.allclose(res.centroids[0], x.mean(0))
    assert not res.assignments.any()


def test_kmeans_two_blobs_pure():
    x, y = _blobs(30, [np.zeros(5), np.full(5, 20.0)], 0.5)
    assign, _ = kmeans(x, 2, seed=3)
    assert len(set(zip(assign, y))) == 2


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6), k=st.integers(1, 6))
def test_kmeans_objective_monotone_and_deterministic(seed, k):
    x = np.random.default_rng(seed).normal(size=(40, 4))
    a, b = kmeans(x, k, seed=seed), kmeans(x, k, seed=seed)
    assert np.array_equal(a.assignments, b.assignments) and np.array_equal(a.centroids, b.centroids)
    assert np.all(np.diff(a.objective) <= 1e-9)
    assert set(a.assignments) == set(range(k))


def test_kmeans_needs_enough_rows():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)


def test_kmeans_duplicate_points_fill_all_clusters():
    x = np.zeros((10, 2))
    x[9] = 1.0
    res = kmeans(x, 3, seed=0)
    assert len(res.centroids) == 3 and np.all(np.isfinite(res.centroids))


def test_median_convention():
    assert median([0.9, 0.1, 0.7, 0.3]) == 0.5
    assert median([3.0]) == 3.0
    with pytest.raises(ValueError):
        median([])


def test_rank_clusters_by_median():
    patches = _patches(6, [0.5, 0.5, 0.9, 0.9, 0.1, 0.1])
    feats = np.arange(6, dtype=float)[:, None]
    assign = np.array([0, 0, 1, 1, 2, 2])
    cents = np.array([[0.5], [2.5], [4.5]])
    ranked = rank_clusters(assign, cents, patches, feats)
    assert [s.cluster_id for s in ranked] == [1, 0, 2]
    assert [s.median_typicality for s in ranked] == [0.9, 0.5, 0.1]


def test_single_cluster_members_by_distance():
    patches = _patches(4)
    feats = np.array([[3.0], [0.5], [2.0], [0.0]])
    ranked = rank_clusters(np.zeros(4, int), np.array([[0.0]]), patches, feats)
    assert [p.image_id for p in ranked[0].members] == ["im3", "im1", "im2", "im0"]
    assert ranked[0].distances == sorted(ranked[0].distances)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_rank_is_permutation_and_transform_invariant(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(30, 3))
    patches = _patches(30, rng.uniform(-1, 1, 30))
    summaries, _ = cluster_patches(patches, feats, k=4, seed=seed)
    members = [p for s in summaries for p in s.members]
    assert sorted(members, key=lambda p: p.image_id) == sorted(patches, key=lambda p: p.image_id)
    for s in summaries:
        assert s.median_typicality == pytest.approx(median([p.score for p in s.members]))
    shifted = [PatchRef(p.image_id, p.box, 2 * p.score + 1, p.label) for p in patches]
    again, _ = cluster_patches(shifted, feats, k=4, seed=seed)
    assert [s.cluster_id for s in again] == [s.cluster_id for s in summaries]


def test_cluster_manifest_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(25, 6))
    patches = _patches(25, rng.uniform(size=25))
    for name in ("a.jsonl", "b.jsonl"):
        summaries, _ = cluster_patches(patches, feats, k=5, seed=2)
        write_cluster_manifest(tmp_path / name, summaries)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rows = read_cluster_manifest(tmp_path / "a.jsonl")
    assert [r["rank"] for r in rows] == list(range(5))


def test_reduce_dim_disabled_identity():
    x = np.random.default_rng(0).normal(size=(10, 4))
    assert np.array_equal(reduce_dim(x, 4, enabled=False), x)
    with pytest.raises(ValueError):
        reduce_dim(x, 3, enabled=False)


def test_reduce_dim_degenerate_inputs():
    assert reduce_dim(np.zeros((0, 5)), 3).shape == (0, 3)
    assert np.array_equal(reduce_dim(np.ones((6, 5)), 3), np.zeros((6, 3)))


def test_reduce_dim_blob_purity_and_determinism():
    centers = [np.zeros(20), np.full(20, 6.0), np.r_[np.full(10, 6.0), np.zeros(10)]]
    x, y = _blobs(40, centers, 0.5, seed=4)
    a = reduce_dim(x, 8, seed=0)
    b = reduce_dim(x, 8, seed=0)
    assert a.shape == (120, 8)
    assert np.array_equal(a, b)
    d = ((a[:, None] - a[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    purity = np.mean(y[d.argmin(1)] == y)
    assert purity >= 0.95
