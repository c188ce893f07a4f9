"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line.

Criteria 7 and 9 train toy denoisers on one CPU and take several minutes.
"""
import itertools
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from diffmine.backends.analytic import BlindBackend, OffsetBackend
from diffmine.backends.toy import ToyBackend
from diffmine.cli import main
from diffmine.clustering import kmeans, median
from diffmine.core import ImageRecord, LabelSet, NoiseSchedule, stable_hash
from diffmine.harness import (DiseaseDatasetSpec, ToyDatasetSpec, TrainConfig, finetune,
                              generate_disease_dataset, generate_toy_dataset, write_image_folder)
from diffmine.images import pixel_hash
from diffmine.medical import auc_pr, evaluate_localization
from diffmine.mining import (MinerConfig, boxes_overlap, box_means, mine_label, patch_scores,
                             select_top_patches)
from diffmine.parallel import IdentityTranslator, build_parallel_dataset, score_sequences
from diffmine.typicality import (TypicalityConfig, TypicalityMap, batch_typicality, estimate_typicality,
                                 typicality_for_label)

from conftest import report
from test_medical import brute_force_ap

SCHED = NoiseSchedule()
LABELS = LabelSet(("a", "b"), "an image of {}", "an image")


def _offset(rec, d_null, d_c, **kw):
    backend = OffsetBackend(rec.pixels, SCHED, {"an image": d_null, "an image of a": d_c}, **kw)
    return backend, backend.conditioning(LABELS, "a"), backend.conditioning(LABELS, None)


def test_criterion_1_null_cancellation():
    rng = np.random.default_rng(0)
    backend = BlindBackend()
    cond, null = backend.conditioning(LABELS, "a"), backend.conditioning(LABELS, None)
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rec = ImageRecord(f"r{i}", rng.uniform(size=(32, 32, 3)), "a")
        scalar, tmap = estimate_typicality(rec, cond, null, backend, SCHED, TypicalityConfig())
        worst = max(worst, abs(scalar), float(np.abs(tmap.values).max()))
    elapsed = time.perf_counter() - start
    ok = report(1, worst == 0.0 and elapsed < 10, f"max |typicality| = {worst} over 100 images, {elapsed:.2f}s (< 10s)")
    assert ok


def test_criterion_2_closed_form():
    rec = ImageRecord("cf", np.random.default_rng(1).uniform(size=(16, 16, 1)), "a")
    backend, cond, null = _offset(rec, 0.2, 0.1)
    _, tmap = estimate_typicality(rec, cond, null, backend, SCHED, TypicalityConfig())
    const_err = float(np.abs(tmap.values - 0.03).max())

    backend, cond, null = _offset(rec, 0.2, 0.1, t_scaled=True)
    cfg = TypicalityConfig(n_samples=512, seed=3)
    scalar, _ = estimate_typicality(rec, cond, null, backend, SCHED, cfg)
    t = np.random.default_rng(np.random.SeedSequence([3, stable_hash(rec.id)])).uniform(0.1, 0.7, 512)
    se = float(np.std(0.03 * t ** 2, ddof=1) / np.sqrt(512))
    exact = 0.03 * (0.7 ** 3 - 0.1 ** 3) / (3 * 0.6)
    ok = report(2, const_err <= 1e-9 and abs(scalar - exact) < 3 * se,
                f"offset map max error {const_err:.2e} (<= 1e-9); t-scaled estimate {scalar:.6f} vs "
                f"integral {exact:.6f}, |diff| = {abs(scalar - exact) / se:.2f} SE (< 3)")
    assert ok


def test_criterion_3_variance_reduction():
    rec = ImageRecord("vr", np.random.default_rng(2).uniform(size=(8, 8, 1)), "a")
    backend, cond, null = _offset(rec, 0.2, 0.1, noise_scale=0.5)
    est = {}
    for paired in (True, False):
        est[paired] = np.array([estimate_typicality(rec, cond, null, backend, SCHED,
                                                    TypicalityConfig(n_samples=8, seed=s, paired=paired))[0]
                                for s in range(100)])
    rng = np.random.default_rng(0)
    diffs = []
    for _ in range(2000):
        idx = rng.integers(0, 100, 100)
        diffs.append(est[True][idx].var(ddof=1) - est[False][idx].var(ddof=1))
    upper = float(np.quantile(diffs, 0.99))
    ok = report(3, upper < 0, f"var paired {est[True].var(ddof=1):.3e} vs unpaired {est[False].var(ddof=1):.3e}; "
                              f"99% bootstrap upper bound of difference {upper:.3e} (< 0)")
    assert ok


def _brute_best(cands, k):
    best = 0.0
    for r in range(1, k + 1):
        for combo in itertools.combinations(cands, r):
            if all(not boxes_overlap(a[0], b[0]) for a, b in itertools.combinations(combo, 2)):
                best = max(best, sum(s for _, s in combo))
    return best


def test_criterion_4_miner():
    rng = np.random.default_rng(4)
    cfg = MinerConfig((4, 4), stride=2, per_image_k=3, global_k=3)
    slots = [(x, y) for y in range(0, 28, 8) for x in range(0, 28, 8)]
    recovered, overlaps = 0, 0
    for i in range(50):
        m = rng.uniform(0, 0.05, (32, 32))
        planted = {slots[j] for j in rng.choice(len(slots), 3, replace=False)}
        for x, y in planted:
            m[y:y + 4, x:x + 4] += rng.uniform(0.5, 1.0)
        chosen = mine_label([TypicalityMap(m, f"m{i}", "a", 1)], cfg)
        recovered += {p.box[:2] for p in chosen} == planted
        full = select_top_patches(patch_scores(m, MinerConfig((5, 3), stride=1)), 8)
        overlaps += sum(boxes_overlap(a.box, b.box) for a, b in itertools.combinations(full, 2))
    mismatches, instances = 0, 0
    for n in range(1, 13):
        for _ in range(10):
            slots4 = [(4 * s, 0, 4, 4) for s in range(rng.integers(1, 7))]
            cands = [(slots4[rng.integers(len(slots4))], float(rng.uniform(0.01, 1))) for _ in range(n)]
            for k in (1, 3, 5):
                greedy = sum(p.score for p in select_top_patches(cands, k))
                mismatches += abs(greedy - _brute_best(cands, k)) > 1e-12
                instances += 1
    ok = report(4, recovered == 50 and overlaps == 0 and mismatches == 0,
                f"planted recovery {recovered}/50; overlapping pairs {overlaps}; "
                f"greedy != exhaustive on {mismatches}/{instances} instances")
    assert ok


def test_criterion_5_clustering():
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.normal(0, 0.5, (40, 8)), rng.normal(12, 0.5, (40, 8))])
    y = np.repeat([0, 1], 40)
    a, b = kmeans(x, 2, seed=7), kmeans(x, 2, seed=7)
    identical = a.assignments.tobytes() == b.assignments.tobytes() and a.centroids.tobytes() == b.centroids.tobytes()
    purity = max(np.mean(a.assignments == y), np.mean(a.assignments != y))
    monotone = True
    for seed in range(30):
        res = kmeans(rng.normal(size=(60, 5)), 1 + seed % 8, seed=seed)
        monotone &= bool(np.all(np.diff(res.objective) <= 1e-9))
    ok = report(5, identical and purity == 1.0 and monotone,
                f"byte-identical rerun {identical}; two-blob purity {purity:.2f}; objective monotone on all runs {monotone}")
    assert ok


def test_criterion_6_auc_pr():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(4, 16, 2))
        scores = np.round(rng.normal(size=shape), int(rng.integers(0, 3)))
        while True:
            mask = rng.random(shape) < rng.uniform(0.05, 0.5)
            if 0 < mask.sum() < mask.size:
                break
        worst = max(worst, abs(auc_pr(scores, mask) - brute_force_ap(scores, mask)))
    mask = np.zeros((10, 10), bool)
    mask[2:5, 3:7] = True
    indicator = auc_pr(mask.astype(float), mask)
    constant_err = abs(auc_pr(np.zeros((10, 10)), mask) - mask.mean())
    ok = report(6, worst <= 1e-9 and indicator == 1.0 and constant_err <= 1e-9,
                f"max |AP - brute force| = {worst:.1e} over 100 pairs; indicator {indicator}; "
                f"constant vs prevalence error {constant_err:.1e}")
    assert ok


# -- toy end-to-end mining ---------------------------------------------------------

TOY_SPEC = ToyDatasetSpec(n_images=1000)
TOY_LABELS = LabelSet(TOY_SPEC.classes, "An image with a {}.", "An image.")
TOY_CFG = TypicalityConfig(n_samples=32, seed=1, chunk_size=32)
TOY_MINER = MinerConfig((8, 8), stride=2, per_image_k=5, global_k=100)


@pytest.fixture(scope="session")
def toy_mining():
    data = generate_toy_dataset(TOY_SPEC, seed=0)
    base = ToyBackend.random(0)
    trained = ToyBackend.random(0)
    start = time.perf_counter()
    finetune(trained, data, TOY_LABELS, TrainConfig(steps=3000), SCHED)
    train_seconds = time.perf_counter() - start
    stores = {name: batch_typicality(data, TOY_LABELS, b, SCHED, TOY_CFG)
              for name, b in (("random", base), ("finetuned", trained))}
    return data, stores, train_seconds


def _marker_hit_fraction(data, store):
    x0, y0, w, h = TOY_SPEC.marker_region
    region = (x0, y0, w, h)
    hits, total = 0, 0
    for label in TOY_LABELS.labels:
        maps = [store[(r.id, label)] for r in data if r.label == label]
        top = mine_label(maps, TOY_MINER)
        hits += sum(boxes_overlap(p.box, region) for p in top)
        total += len(top)
    return hits / total


@pytest.mark.slow
def test_criterion_7_toy_mining(toy_mining):
    data, stores, train_seconds = toy_mining
    x0, y0, w, h = TOY_SPEC.marker_region
    inside = np.zeros((32, 32), bool)
    inside[y0:y0 + h, x0:x0 + w] = True
    ratios = {}
    for label in TOY_LABELS.labels:
        maps = [stores["finetuned"][(r.id, label)].values for r in data if r.label == label]
        marker = float(np.mean([m[inside].mean() for m in maps]))
        background = float(np.mean([m[~inside].mean() for m in maps]))
        ratios[label] = (marker, background)
    part_a = all(m > 2 * b and m > 0 for m, b in ratios.values())
    trained_frac = _marker_hit_fraction(data, stores["finetuned"])
    random_frac = _marker_hit_fraction(data, stores["random"])
    detail_a = "; ".join(f"{lab} marker {m:.4f} vs background {b:.4f}" for lab, (m, b) in ratios.items())
    ok = report(7, part_a and trained_frac >= 0.7 and random_frac < 0.3 and train_seconds < 900,
                f"(a) {detail_a}; (b) top-100 patches hitting marker: finetuned {trained_frac:.0%} (>= 70%), "
                f"random weights {random_frac:.0%} (< 30%); finetune took {train_seconds:.0f}s (< 900s)")
    assert ok


def test_criterion_8_identity_cotypicality(tmp_path):
    spec = ToyDatasetSpec(n_images=20, classes=("square", "cross", "circle"))
    labels = LabelSet(spec.classes, "An image with a {}.", "An image.")
    data = generate_toy_dataset(spec, seed=8)
    backend = ToyBackend.random(3)
    cfg = TypicalityConfig(n_samples=4)
    store = build_parallel_dataset(data, labels, IdentityTranslator(), tmp_path)
    seqs, _ = score_sequences(data, store, labels, backend, SCHED, cfg, MinerConfig((8, 8), stride=2))
    per_image = {r.id: {lab: typicality_for_label(r, lab, labels, backend, SCHED, cfg).values
                        for lab in labels.labels} for r in data}
    worst = 0.0
    for seq in seqs:
        vals = [box_means(per_image[seq.source.image_id][lab], [seq.source.box])[0] for lab in labels.labels]
        worst = max(worst, abs(seq.co_typicality - median(vals)))
    ok = report(8, len(seqs) == 100 and worst <= 1e-9,
                f"{len(seqs)} sequences; max |co-typicality - median of untranslated| = {worst:.1e} (<= 1e-9)")
    assert ok


@pytest.mark.slow
def test_criterion_9_toy_localization():
    train, _ = generate_disease_dataset(DiseaseDatasetSpec(n_images=600), seed=0)
    test, rois = generate_disease_dataset(DiseaseDatasetSpec(n_images=100), seed=99, split="eval")
    labels = LabelSet(("mass", "nofinding"), "{}", "")
    pretrained = ToyBackend.random(0)
    trained = ToyBackend.random(0)
    finetune(trained, train, labels, TrainConfig(steps=1500), SCHED)
    table = evaluate_localization(test, rois, labels, {"pretrained": pretrained, "finetuned": trained}, SCHED,
                                  TypicalityConfig(n_samples=32))
    before, after = table.overall("pretrained"), table.overall("finetuned")
    prevalence = np.mean([r.mask((32, 32)).mean() for r in rois])
    ok = report(9, after >= 0.5 and after > before,
                f"mean AUC-PR finetuned {after:.3f} (>= 0.5) vs pretrained {before:.3f} "
                f"(ROI prevalence {prevalence:.3f}) over {table.counts['mass']} images")
    assert ok


def _pipeline(runner, run_dir, data_dir):
    outputs = {}
    steps = [["ingest", run_dir, data_dir, "--preset", "toy", "--channels", "1"],
             ["finetune", run_dir, "--steps", "200", "--checkpoint-every", "100"],
             ["score", run_dir, "--samples", "8"],
             ["mine", run_dir, "--patch-size", "8", "--stride", "2"],
             ["cluster", run_dir, "-k", "32"],
             ["render", run_dir]]
    for args in steps:
        res = runner.invoke(main, args)
        assert res.exit_code == 0, res.output
        outputs[args[0]] = res.output
    return outputs


def test_criterion_10_rerun_caching(tmp_path):
    write_image_folder(generate_toy_dataset(ToyDatasetSpec(n_images=160), seed=10), tmp_path / "data")
    runner = CliRunner()
    run_dir = str(tmp_path / "run")
    first = _pipeline(runner, run_dir, str(tmp_path / "data"))
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    sheets = sorted(manifest["stages"]["render:finetuned"]["outputs"])
    before = {p: pixel_hash(tmp_path / "run" / p) for p in sheets}
    second = _pipeline(runner, run_dir, str(tmp_path / "data"))
    after = {p: pixel_hash(tmp_path / "run" / p) for p in sheets}
    score_hits = "(100%)" in second["score"]
    stage_hits = all(json.loads(second[s])["cache_hit"] for s in ("finetune", "mine", "cluster", "render"))
    clusters = json.loads(first["cluster"])["clusters"]
    size = Image.open(tmp_path / "run" / sheets[0]).size
    layout = size == (4 + 6 * 68, 4 + 6 * 68) and set(clusters.values()) == {32}
    ok = report(10, score_hits and stage_hits and before == after and layout,
                f"score cache hits 100% {score_hits}; every other stage cached {stage_hits}; "
                f"{len(sheets)} sheet pixel hashes identical {before == after}; 32 clusters in 6x6 sheets {layout}")
    assert ok
