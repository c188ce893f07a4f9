"""Stage orchestration over a run directory.

A run directory holds ``manifest.json`` (schema ``diffmine.run/1``) and one
subdirectory per stage. Every stage records its parameters, the hashes of
the inputs it read and the hashes of what it wrote; a stage whose record
still matches is skipped and reported as a cache hit.

Layout::

    manifest.json
    dataset/images/<id>.png, dataset/records.jsonl, dataset/report.json
    finetune/model.pt, finetune/loss_curve.csv, finetune/checkpoint_*.pt
    scores/<tag>/...            score cache (root overridable with $DIFFMINE_CACHE)
    mine/<tag>/<label>.jsonl, mine/<tag>/crops/<label>/<rank>_<id>_<x0>_<y0>.png
    cluster/<tag>/<label>.jsonl
    render/<tag>/<label>.png
    parallel/<id>/<source>__<target>.png, parallel/manifest.jsonl
    cotypical/sequences.jsonl, cotypical/clusters.jsonl, cotypical/sheet.png
    medical/auc_pr.csv, medical/overlays/
    compare/<label>.png
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .backends import feature_embedder, load_backend
from .clustering import DIFT_T, cluster_patches, embed_patches, read_cluster_manifest, write_cluster_manifest
from .core import ImageRecord, LabelSet, NoiseSchedule, TEMPLATE_PRESETS
from .images import grid_sheet, heatmap_overlay, load_image, pixel_hash, resize, save_png
from .mining import (MinerConfig, PatchRef, crop, crop_filename, mine_label, read_patch_manifest,
                     write_patch_manifest)
from .typicality import ScoreCache, TypicalityConfig, batch_typicality

log = logging.getLogger(__name__)

SCHEMA = "diffmine.run/1"
SHEET_CLUSTERS = 6
SHEET_MEMBERS = 6
SHEET_CELL = 64
SHEET_PAD = 4


class PipelineError(RuntimeError):
    """A stage cannot run; the message names what to do."""


class MissingStage(PipelineError):
    def __init__(self, needed: str, stage: str):
        super().__init__(f"`{stage}` needs the output of `{needed}`; run `diffmine {needed}` first")
        self.needed = needed


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def bin_label(value: str, rule: str = "none") -> str:
    """Map a raw tag to a label: ``decade`` turns 1927 into "1920"."""
    value = str(value).strip()
    if rule == "none":
        return value
    if rule == "decade":
        year = int(float(value))
        return str(year - year % 10)
    raise ValueError(f"unknown binning rule {rule!r}")


def apply_resize(pixels: np.ndarray, policy: str) -> np.ndarray:
    """``none``, ``fixed-height:<H>`` (aspect preserved) or ``square:<S>``."""
    if policy == "none":
        return pixels
    kind, _, size = policy.partition(":")
    size = int(size)
    h, w = pixels.shape[:2]
    if kind == "fixed-height":
        return resize(pixels, max(1, int(round(w * size / h))), size)
    if kind == "square":
        return resize(pixels, size, size)
    raise ValueError(f"unknown resize policy {policy!r}")


class Run:
    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        if self.path.exists():
            self.manifest = json.loads(self.path.read_text())
        else:
            self.manifest = {"schema": SCHEMA, "stages": {}, "seeds": {}}
        self.cache_hits: Dict[str, bool] = {}

    # -- manifest bookkeeping --------------------------------------------------

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        os.replace(tmp, self.path)

    @property
    def stages(self) -> dict:
        return self.manifest.setdefault("stages", {})

    def require(self, needed: str, stage: str) -> dict:
        rec = self.stages.get(needed)
        if rec is None:
            raise MissingStage(needed, stage)
        return rec

    def _outputs_intact(self, outputs: dict) -> bool:
        for rel, digest in outputs.items():
            p = self.root / rel
            if not p.exists():
                return False
            actual = pixel_hash(p) if rel.endswith(".png") else sha256_file(p)
            if actual != digest:
                return False
        return True

    def fresh(self, name: str, params: dict, inputs: dict) -> bool:
        rec = self.stages.get(name)
        hit = (rec is not None and rec.get("params") == params and rec.get("inputs") == inputs
               and self._outputs_intact(rec.get("outputs", {})))
        self.cache_hits[name] = hit
        return hit

    def record(self, name: str, params: dict, inputs: dict, outputs: Sequence[Path], **extra) -> None:
        outs = {}
        for p in outputs:
            rel = str(Path(p).relative_to(self.root))
            outs[rel] = pixel_hash(p) if rel.endswith(".png") else sha256_file(p)
        self.stages[name] = dict(params=params, inputs=inputs, outputs=outs, **extra)
        self.save()

    def output_digest(self, name: str) -> str:
        return sha256_json(self.stages[name].get("outputs", {}))

    # -- shared state -----------------------------------------------------------

    @property
    def labels(self) -> LabelSet:
        if "labels" not in self.manifest:
            raise MissingStage("ingest", "this stage")
        return LabelSet.from_dict(self.manifest["labels"])

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(**self.manifest.get("schedule", {}))

    def records(self, split: Optional[str] = None) -> List[ImageRecord]:
        path = self.root / "dataset" / "records.jsonl"
        out = []
        channels = self.manifest.get("dataset", {}).get("channels")
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if split is not None and d["split"] != split:
                continue
            px = load_image(self.root / d["path"], channels=channels)
            out.append(ImageRecord(d["id"], px, d["label"], d["split"]))
        return out

    def mining_records(self) -> List[ImageRecord]:
        recs = self.records()
        mine = [r for r in recs if r.split == "mine"]
        return mine or recs

    def backend_spec(self, tag: str) -> str:
        if tag == "finetuned":
            rec = self.require("finetune", "finetuned scoring")
            return f"toy:{self.root / rec['checkpoint']}"
        if tag == "base":
            return self.manifest.get("backend", {}).get("base", "toy-random:0")
        return tag

    def backend(self, tag: str):
        return load_backend(self.backend_spec(tag))

    def default_tag(self) -> str:
        return "finetuned" if "finetune" in self.stages else "base"

    def score_root(self, tag: str) -> Path:
        env = os.environ.get("DIFFMINE_CACHE")
        if env:
            return Path(env) / _run_key(self.root) / "scores" / tag
        return self.root / "scores" / tag


def _run_key(root: Path) -> str:
    return hashlib.sha256(str(root.resolve()).encode()).hexdigest()[:12]


def _slug(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", s)


# -- stages ---------------------------------------------------------------------

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def ingest(run: Run, source, label_table=None, *, label_column: str = "label", binning: str = "none",
           resize_policy: str = "none", preset: Optional[str] = None, template: Optional[str] = None,
           null_template: Optional[str] = None, channels: Optional[int] = None,
           labels: Optional[Sequence[str]] = None, schedule: Optional[dict] = None,
           base_backend: str = "toy-random:0", seed: int = 0) -> dict:
    """Normalize a labeled image folder into the run's dataset.

    The label table is a CSV with ``filename`` and ``label_column`` columns
    and an optional ``split`` column. Unlabeled or undecodable images are
    listed in the report and excluded.
    """
    source = Path(source)
    label_table = Path(label_table) if label_table else source / "labels.csv"
    rows = {}
    if label_table.exists():
        with open(label_table, newline="") as fh:
            for row in csv.DictReader(fh):
                rows[row["filename"]] = row
    files = sorted(p for p in source.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    out_dir = run.root / "dataset"
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records, unlabeled, undecodable = [], [], []
    for p in files:
        rel = str(p.relative_to(source))
        row = rows.get(rel) or rows.get(p.name)
        if row is None or not str(row.get(label_column, "")).strip():
            unlabeled.append(rel)
            continue
        try:
            px = load_image(p, channels=channels)
        except Exception:
            undecodable.append(rel)
            continue
        px = apply_resize(px, resize_policy)
        rid = _slug(p.stem)
        dst = out_dir / "images" / f"{rid}.png"
        save_png(dst, px)
        records.append({"id": rid, "path": str(dst.relative_to(run.root)),
                        "label": bin_label(row[label_column], binning),
                        "split": (row.get("split") or "train").strip(), "source": rel,
                        "pixel_hash": pixel_hash(dst)})
    if not records:
        log.warning("no labeled images ingested from %s", source)
    label_list = list(labels) if labels else sorted({r["label"] for r in records})
    if template is None:
        template, default_null = TEMPLATE_PRESETS[preset or "places"]
        null_template = default_null if null_template is None else null_template
    label_set = LabelSet(tuple(label_list), template, null_template or "") if label_list else None
    (out_dir / "records.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    report = {"ingested": len(records), "unlabeled": unlabeled, "undecodable": undecodable}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    if records:
        first = load_image(run.root / records[0]["path"], channels=channels)
        channels = first.shape[2]
    run.manifest["dataset"] = {"source": str(source), "label_table": str(label_table),
                               "label_column": label_column, "binning": binning,
                               "resize": resize_policy, "channels": channels}
    if label_set is not None:
        run.manifest["labels"] = label_set.to_dict()
    run.manifest["schedule"] = schedule or NoiseSchedule().to_dict()
    run.manifest.setdefault("backend", {})["base"] = base_backend
    run.manifest.setdefault("seeds", {})["base"] = seed
    run.record("ingest", {"source": str(source), "binning": binning, "resize": resize_policy},
               {}, [out_dir / "records.jsonl", out_dir / "report.json"])
    return report


def finetune_stage(run: Run, train_cfg, *, split: Optional[str] = None, force: bool = False) -> dict:
    from .harness import finetune, write_loss_curve

    run.require("ingest", "finetune")
    params = {"train": asdict(train_cfg), "base": run.backend_spec("base"), "split": split,
              "schedule": run.manifest["schedule"]}
    inputs = {"ingest": run.output_digest("ingest")}
    if not force and run.fresh("finetune", params, inputs):
        return {"cache_hit": True, **run.stages["finetune"].get("summary", {})}
    backend = run.backend("base")
    records = run.records(split) if split else [r for r in run.records() if r.split != "eval"]
    out_dir = run.root / "finetune"
    result = finetune(backend, records, run.labels, train_cfg, run.schedule(), out_dir=out_dir)
    model_path = out_dir / "model.pt"
    backend.save(model_path)
    write_loss_curve(out_dir / "loss_curve.csv", result.losses)
    summary = {"initial_loss": result.losses[0], "final_loss": float(np.mean(result.losses[-50:])),
               "identifier": backend.identifier, "steps": train_cfg.steps}
    run.record("finetune", params, inputs, [model_path, out_dir / "loss_curve.csv"],
               checkpoint=str(model_path.relative_to(run.root)), summary=summary)
    return {"cache_hit": False, **summary}


def score_stage(run: Run, cfg: TypicalityConfig, tag: Optional[str] = None, *,
                force: bool = False, workers: int = 1) -> dict:
    run.require("ingest", "score")
    tag = tag or run.default_tag()
    spec = run.backend_spec(tag)
    name = f"score:{tag}"
    params = {"typicality": cfg.to_dict(), "backend": spec, "schedule": run.manifest["schedule"]}
    inputs = {"ingest": run.output_digest("ingest")}
    if tag == "finetuned":
        inputs["finetune"] = run.output_digest("finetune")
    cache = ScoreCache(run.score_root(tag))
    records = run.mining_records()
    store = batch_typicality(records, run.labels, run.backend(tag), run.schedule(), cfg,
                             cache=cache, workers=workers)
    index = cache.root / "index.jsonl"
    summary = {"entries": len(store), "hits": store.hits, "misses": store.misses,
               "hit_rate": store.hit_rate, "index": str(index), "index_sha256": sha256_file(index)}
    run.fresh(name, params, inputs)
    run.cache_hits[name] = store.misses == 0
    run.stages[name] = {"params": params, "inputs": inputs, "outputs": {}, "summary": summary}
    run.save()
    return summary


def _score_maps(run: Run, tag: str, stage: str):
    rec = run.require(f"score:{tag}", stage)
    chash_root = ScoreCache(run.score_root(tag))
    index = Path(rec["summary"]["index"])
    if not index.exists() or sha256_file(index) != rec["summary"]["index_sha256"]:
        raise PipelineError(f"score cache for `{tag}` is missing or changed; rerun `diffmine score`")
    maps = []
    for line in index.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            m = chash_root.get(d["id"], d["label"], d["config_hash"])
            if m is None:
                raise PipelineError(f"score cache entry {d['id']}/{d['label']} unreadable; rerun `diffmine score`")
            maps.append(m)
    return maps


def mine_stage(run: Run, miner: Optional[MinerConfig] = None, tag: Optional[str] = None, *,
               export_crops: bool = True, force: bool = False) -> dict:
    tag = tag or run.default_tag()
    name = f"mine:{tag}"
    if f"score:{tag}" not in run.stages:
        raise MissingStage("score", "mine")
    maps = _score_maps(run, tag, "mine")
    if miner is None:
        short = min(maps[0].values.shape) if maps else 256
        miner = MinerConfig(patch_size=(short // 4, short // 4))
    params = {"miner": miner.to_dict(), "export_crops": export_crops}
    inputs = {"score": run.stages[f"score:{tag}"]["summary"]["index_sha256"]}
    if not force and run.fresh(name, params, inputs):
        return {"cache_hit": True}
    out_dir = run.root / "mine" / tag
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = {r.id: r.pixels for r in run.mining_records()} if export_crops else {}
    outputs, counts = [], {}
    for label in run.labels.labels:
        patches = mine_label([m for m in maps if m.label == label], miner)
        path = out_dir / f"{_slug(label)}.jsonl"
        write_patch_manifest(path, patches)
        outputs.append(path)
        counts[label] = len(patches)
        if export_crops:
            crop_dir = out_dir / "crops" / _slug(label)
            crop_dir.mkdir(parents=True, exist_ok=True)
            for rank, p in enumerate(patches):
                save_png(crop_dir / crop_filename(rank, p), crop(pixels[p.image_id], p.box))
    run.record(name, params, inputs, outputs, summary={"patches": counts})
    return {"cache_hit": False, "patches": counts}


def cluster_stage(run: Run, tag: Optional[str] = None, *, k: int = 32, seed: int = 0,
                  normalize: bool = True, dift_t: float = DIFT_T, force: bool = False) -> dict:
    tag = tag or run.default_tag()
    name = f"cluster:{tag}"
    if f"mine:{tag}" not in run.stages:
        raise MissingStage("mine", "cluster")
    params = {"k": k, "seed": seed, "normalize": normalize, "dift_t": dift_t,
              "backend": run.backend_spec(tag)}
    inputs = {"mine": run.output_digest(f"mine:{tag}")}
    if not force and run.fresh(name, params, inputs):
        return {"cache_hit": True}
    backend = run.backend(tag)
    pixels = {r.id: r.pixels for r in run.mining_records()}
    miner = run.stages[f"mine:{tag}"]["params"]["miner"]
    channels = next(iter(pixels.values())).shape[2] if pixels else 1
    embedder = feature_embedder(backend, run.labels.null_template, seed, miner["patch_size"], channels)
    out_dir = run.root / "cluster" / tag
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, counts = [], {}
    for label in run.labels.labels:
        patches = read_patch_manifest(run.root / "mine" / tag / f"{_slug(label)}.jsonl")
        path = out_dir / f"{_slug(label)}.jsonl"
        if patches:
            feats = embed_patches(patches, embedder, pixels, t=dift_t)
            summaries, _ = cluster_patches(patches, feats, k=k, seed=seed, normalize=normalize)
        else:
            summaries = []
        write_cluster_manifest(path, summaries)
        outputs.append(path)
        counts[label] = len(summaries)
    run.record(name, params, inputs, outputs, summary={"clusters": counts})
    return {"cache_hit": False, "clusters": counts}


def contact_sheet(clusters: Sequence[dict], pixels: Dict[str, np.ndarray],
                  n_clusters: int = SHEET_CLUSTERS, n_members: int = SHEET_MEMBERS) -> Image.Image:
    """Rows are the top clusters, columns their members nearest the centroid."""
    rows = []
    for c in clusters[:n_clusters]:
        rows.append([crop(pixels[m["image_id"]], tuple(m["box"])) for m in c["members"][:n_members]])
    return grid_sheet(rows, cell=SHEET_CELL, pad=SHEET_PAD)


def render_stage(run: Run, tag: Optional[str] = None, *, force: bool = False) -> dict:
    tag = tag or run.default_tag()
    name = f"render:{tag}"
    if f"cluster:{tag}" not in run.stages:
        raise MissingStage("cluster", "render")
    params = {"clusters": SHEET_CLUSTERS, "members": SHEET_MEMBERS, "cell": SHEET_CELL, "pad": SHEET_PAD}
    inputs = {"cluster": run.output_digest(f"cluster:{tag}")}
    if not force and run.fresh(name, params, inputs):
        return {"cache_hit": True, "sheets": run.stages[name]["outputs"]}
    pixels = {r.id: r.pixels for r in run.mining_records()}
    out_dir = run.root / "render" / tag
    outputs = []
    for label in run.labels.labels:
        clusters = read_cluster_manifest(run.root / "cluster" / tag / f"{_slug(label)}.jsonl")
        path = out_dir / f"{_slug(label)}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        contact_sheet(clusters, pixels).save(path, format="PNG")
        outputs.append(path)
    run.record(name, params, inputs, outputs)
    return {"cache_hit": False, "sheets": run.stages[name]["outputs"]}


def compare_stage(run: Run, cfg: TypicalityConfig, miner: Optional[MinerConfig] = None, *,
                  tags=("base", "finetuned"), k: int = 32, seed: int = 0, force: bool = False) -> dict:
    """Score, mine, cluster and render under two backends, then pair the sheets."""
    for tag in tags:
        score_stage(run, cfg, tag, force=force)
        mine_stage(run, miner, tag, force=force)
        cluster_stage(run, tag, k=k, seed=seed, force=force)
        render_stage(run, tag, force=force)
    out_dir = run.root / "compare"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for label in run.labels.labels:
        sheets = [Image.open(run.root / "render" / tag / f"{_slug(label)}.png").convert("RGB") for tag in tags]
        gap = 16
        width = sum(s.width for s in sheets) + gap * (len(sheets) - 1)
        combo = Image.new("RGB", (width, max(s.height for s in sheets)), (255, 255, 255))
        x = 0
        for s in sheets:
            combo.paste(s, (x, 0))
            x += s.width + gap
        path = out_dir / f"{_slug(label)}.png"
        combo.save(path, format="PNG")
        outputs.append(path)
    inputs = {f"render:{t}": run.output_digest(f"render:{t}") for t in tags}
    run.record("compare", {"tags": list(tags)}, inputs, outputs)
    return {"sheets": [str(p) for p in outputs]}


# -- parallel dataset and co-typicality ---------------------------------------------

def translate_stage(run: Run, translator: str = "identity", *, force: bool = False) -> dict:
    from .parallel import IdentityTranslator, StripeTintTranslator, build_parallel_dataset

    run.require("ingest", "translate")
    params = {"translator": translator}
    inputs = {"ingest": run.output_digest("ingest")}
    root = run.root / "parallel"
    if not force and run.fresh("translate", params, inputs):
        return {"cache_hit": True}
    if translator == "identity":
        backend = IdentityTranslator()
    elif translator == "stripe-tint":
        backend = StripeTintTranslator(run.labels.labels)
    else:
        raise PipelineError(f"unknown translator {translator!r}; the CLI ships identity and stripe-tint")
    store = build_parallel_dataset(run.mining_records(), run.labels, backend, root)
    run.record("translate", params, inputs, [root / "manifest.jsonl", root / "completeness.json"],
               summary={"entries": len(store.entries), "failures": len(store.failures)})
    return {"cache_hit": False, "entries": len(store.entries), "failures": len(store.failures)}


def cotypical_stage(run: Run, cfg: TypicalityConfig, miner: Optional[MinerConfig] = None,
                    tag: Optional[str] = None, *, top_n: int = 10000, k: int = 32, seed: int = 0,
                    target_dim: int = 32, reduce: bool = True, force: bool = False) -> dict:
    from .parallel import ParallelStore, mine_sequences, score_sequences

    run.require("translate", "cotypical")
    tag = tag or run.default_tag()
    records = run.mining_records()
    if miner is None:
        short = min(records[0].shape[:2]) if records else 256
        miner = MinerConfig(patch_size=(short // 4, short // 4))
    params = {"typicality": cfg.to_dict(), "miner": miner.to_dict(), "backend": run.backend_spec(tag),
              "top_n": top_n, "k": k, "seed": seed, "target_dim": target_dim, "reduce": reduce}
    inputs = {"translate": run.output_digest("translate")}
    if not force and run.fresh("cotypical", params, inputs):
        return {"cache_hit": True, **run.stages["cotypical"].get("summary", {})}
    backend = run.backend(tag)
    labels = run.labels
    store = ParallelStore.open(run.root / "parallel", channels=run.manifest["dataset"].get("channels"))
    sequences, excluded = score_sequences(records, store, labels, backend, run.schedule(), cfg, miner)
    embedder = feature_embedder(backend, labels.null_template, seed, miner.patch_size,
                                records[0].shape[2] if records else 1)
    result = mine_sequences(sequences, labels, embedder, store, top_n=top_n, k=k, seed=seed,
                            reduce=reduce, target_dim=target_dim)
    out_dir = run.root / "cotypical"
    out_dir.mkdir(parents=True, exist_ok=True)
    seq_path = out_dir / "sequences.jsonl"
    seq_path.write_text("".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in result.ranked))
    cl_path = out_dir / "clusters.jsonl"
    write_cluster_manifest(cl_path, result.clusters)
    sheet_path = out_dir / "sheet.png"
    sequence_sheet(result, labels).save(sheet_path, format="PNG")
    summary = {"sequences": len(sequences), "mined": len(result.ranked), "excluded": excluded,
               "clusters": len(result.clusters)}
    run.record("cotypical", params, inputs, [seq_path, cl_path, sheet_path], summary=summary)
    return {"cache_hit": False, **summary}


def sequence_sheet(result, labels: LabelSet, n_clusters: int = SHEET_CLUSTERS, per_cluster: int = 2) -> Image.Image:
    """One row per sequence (label order across columns), source cell framed in red."""
    by_source = {(s.source.image_id, s.source.box): s for s in result.ranked}
    rows, marks = [], []
    for c in result.clusters[:n_clusters]:
        for m in c.members[:per_cluster]:
            seq = by_source[(m.image_id, m.box)]
            rows.append([seq.variants[lab][0] for lab in labels.labels])
            marks.append([lab == seq.source_label for lab in labels.labels])
    return grid_sheet(rows, cell=SHEET_CELL, pad=SHEET_PAD, highlight=marks)


# -- medical localization -------------------------------------------------------------

def eval_medical_stage(run: Run, roi_table, cfg: TypicalityConfig, *, tags=("base", "finetuned"),
                       blur_sigma: Optional[float] = None, split: Optional[str] = "eval",
                       overlays: int = 8, force: bool = False) -> dict:
    from .medical import evaluate_localization, read_roi_table

    run.require("ingest", "eval-medical")
    tags = [t for t in tags if t != "finetuned" or "finetune" in run.stages]
    roi_table = Path(roi_table)
    params = {"typicality": cfg.to_dict(), "backends": [run.backend_spec(t) for t in tags],
              "blur_sigma": blur_sigma, "split": split}
    inputs = {"ingest": run.output_digest("ingest"), "roi_table": sha256_file(roi_table)}
    if not force and run.fresh("eval-medical", params, inputs):
        return {"cache_hit": True, **run.stages["eval-medical"]["summary"]}
    records = run.records(split) if split else run.records()
    rois = read_roi_table(roi_table)
    out_dir = run.root / "medical"
    (out_dir / "overlays").mkdir(parents=True, exist_ok=True)
    written = []

    def sink(name, rec, roi, hm):
        if len(written) < overlays * len(tags):
            path = out_dir / "overlays" / f"{name}_{_slug(rec.id)}_{_slug(roi.disease)}.png"
            heatmap_overlay(rec.pixels, hm, roi.boxes).save(path, format="PNG")
            written.append(path)

    backends = {t: run.backend(t) for t in tags}
    table = evaluate_localization(records, rois, run.labels, backends, run.schedule(), cfg,
                                  blur_sigma=blur_sigma, heatmap_sink=sink)
    table_path = out_dir / "auc_pr.csv"
    table.write_csv(table_path)
    summary = {"overall": {t: table.overall(t) for t in tags}, "skipped": table.skipped,
               "counts": table.counts}
    run.record("eval-medical", params, inputs, [table_path], summary=summary)
    return {"cache_hit": False, **summary}
