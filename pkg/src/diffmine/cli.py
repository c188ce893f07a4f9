"""``diffmine`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import json
import logging

import click

from . import pipeline
from .mining import MinerConfig
from .typicality import TypicalityConfig


def _typicality_options(f):
    f = click.option("--t-min", type=float, default=0.1, show_default=True)(f)
    f = click.option("--t-max", type=float, default=0.7, show_default=True)(f)
    f = click.option("--samples", "n_samples", type=int, default=32, show_default=True)(f)
    f = click.option("--seed", type=int, default=0, show_default=True)(f)
    f = click.option("--unpaired", is_flag=True, help="Independent draws for label and null.")(f)
    return f


def _typicality_cfg(kw) -> TypicalityConfig:
    return TypicalityConfig(t_min=kw.pop("t_min"), t_max=kw.pop("t_max"), n_samples=kw.pop("n_samples"),
                            seed=kw.pop("seed"), paired=not kw.pop("unpaired"))


def _miner_options(f):
    f = click.option("--patch-size", type=int, default=None,
                     help="Square patch side in pixels [default: quarter of the short image side].")(f)
    f = click.option("--stride", type=int, default=None, help="[default: patch size / 4]")(f)
    f = click.option("--per-image-k", type=int, default=5, show_default=True)(f)
    f = click.option("--global-k", type=int, default=1000, show_default=True)(f)
    return f


def _miner_cfg(kw):
    size = kw.pop("patch_size")
    stride, per_image_k, global_k = kw.pop("stride"), kw.pop("per_image_k"), kw.pop("global_k")
    if size is None:
        return None
    return MinerConfig((size, size), stride, per_image_k, global_k)


def _emit(result: dict) -> None:
    click.echo(json.dumps(result, indent=2, sort_keys=True, default=str))


class StageError(click.ClickException):
    exit_code = 2


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except pipeline.PipelineError as exc:
            raise StageError(str(exc)) from exc


@click.group(cls=_Group)
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Mine typical visual elements of labeled image sets with a conditional denoiser."""
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.argument("source", type=click.Path(exists=True, file_okay=False))
@click.option("--labels-csv", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Label table [default: SOURCE/labels.csv].")
@click.option("--label-column", default="label", show_default=True)
@click.option("--binning", type=click.Choice(["none", "decade"]), default="none", show_default=True)
@click.option("--resize", "resize_policy", default="none", show_default=True,
              help="none | fixed-height:<H> | square:<S>")
@click.option("--preset", type=click.Choice(sorted(pipeline.TEMPLATE_PRESETS)), default=None)
@click.option("--template", default=None, help="Prompt template with one {} placeholder.")
@click.option("--null-template", default=None)
@click.option("--channels", type=click.Choice(["1", "3"]), default=None)
@click.option("--base-backend", default="toy-random:0", show_default=True)
def ingest(run_dir, source, labels_csv, label_column, binning, resize_policy, preset, template,
           null_template, channels, base_backend):
    """Normalize a labeled image folder into RUN_DIR."""
    run = pipeline.Run(run_dir)
    report = pipeline.ingest(run, source, labels_csv, label_column=label_column, binning=binning,
                             resize_policy=resize_policy, preset=preset, template=template,
                             null_template=null_template, channels=int(channels) if channels else None,
                             base_backend=base_backend)
    if report["ingested"] == 0:
        click.echo("warning: no labeled images found", err=True)
    _emit(report)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--steps", type=int, default=3000, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=2e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--checkpoint-every", type=int, default=1000, show_default=True)
@click.option("--null-prob", type=float, default=0.2, show_default=True)
@click.option("--force", is_flag=True)
def finetune(run_dir, steps, batch_size, lr, seed, checkpoint_every, null_prob, force):
    """Finetune the base toy denoiser on the ingested dataset."""
    from .harness import TrainConfig

    cfg = TrainConfig(steps, batch_size, lr, seed, checkpoint_every, null_prob)
    _emit(pipeline.finetune_stage(pipeline.Run(run_dir), cfg, force=force))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", "tag", default=None, help="base | finetuned | <backend spec>")
@click.option("--workers", type=int, default=1, show_default=True)
@_typicality_options
def score(run_dir, tag, workers, **kw):
    """Typicality maps for every mining image under its own label."""
    summary = pipeline.score_stage(pipeline.Run(run_dir), _typicality_cfg(kw), tag, workers=workers)
    click.echo(f"cache hits: {summary['hits']}/{summary['entries']} ({100 * summary['hit_rate']:.0f}%)")
    _emit(summary)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", "tag", default=None)
@click.option("--no-crops", is_flag=True)
@click.option("--force", is_flag=True)
@_miner_options
def mine(run_dir, tag, no_crops, force, **kw):
    """Per-image top patches and the most typical patches per label."""
    _emit(pipeline.mine_stage(pipeline.Run(run_dir), _miner_cfg(kw), tag, export_crops=not no_crops,
                              force=force))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", "tag", default=None)
@click.option("-k", "--clusters", "k", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-normalize", is_flag=True)
@click.option("--force", is_flag=True)
def cluster(run_dir, tag, k, seed, no_normalize, force):
    """Embed mined patches and cluster them with k-means."""
    _emit(pipeline.cluster_stage(pipeline.Run(run_dir), tag, k=k, seed=seed, normalize=not no_normalize,
                                 force=force))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", "tag", default=None)
@click.option("--force", is_flag=True)
def render(run_dir, tag, force):
    """Contact sheets: top-6 members of the top-6 clusters per label."""
    _emit(pipeline.render_stage(pipeline.Run(run_dir), tag, force=force))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--translator", default="identity", show_default=True, help="identity | stripe-tint")
@click.option("--force", is_flag=True)
def translate(run_dir, translator, force):
    """Translate every mining image to every label."""
    _emit(pipeline.translate_stage(pipeline.Run(run_dir), translator, force=force))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", "tag", default=None)
@click.option("--top-n", type=int, default=10000, show_default=True)
@click.option("-k", "--clusters", "k", type=int, default=32, show_default=True)
@click.option("--target-dim", type=int, default=32, show_default=True)
@click.option("--no-reduce", is_flag=True)
@click.option("--force", is_flag=True)
@_typicality_options
@_miner_options
def cotypical(run_dir, tag, top_n, k, target_dim, no_reduce, force, **kw):
    """Mine and cluster translation sequences by co-typicality."""
    miner = _miner_cfg(kw)
    cfg = _typicality_cfg(kw)
    _emit(pipeline.cotypical_stage(pipeline.Run(run_dir), cfg, miner, tag, top_n=top_n, k=k,
                                   seed=cfg.seed, target_dim=target_dim, reduce=not no_reduce, force=force))


@main.command("eval-medical")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("roi_table", type=click.Path(exists=True, dir_okay=False))
@click.option("--blur-sigma", type=float, default=None, help="[default: 2 latent cells]")
@click.option("--split", default="eval", show_default=True, help="Records to evaluate; 'all' for every split.")
@click.option("--force", is_flag=True)
@_typicality_options
def eval_medical(run_dir, roi_table, blur_sigma, split, force, **kw):
    """AUC-PR of disease typicality heatmaps against ROI boxes."""
    result = pipeline.eval_medical_stage(pipeline.Run(run_dir), roi_table, _typicality_cfg(kw),
                                         blur_sigma=blur_sigma, split=None if split == "all" else split,
                                         force=force)
    click.echo((pipeline.Path(run_dir) / "medical" / "auc_pr.csv").read_text())
    _emit(result)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("-k", "--clusters", "k", type=int, default=32, show_default=True)
@click.option("--force", is_flag=True)
@_typicality_options
@_miner_options
def compare(run_dir, k, force, **kw):
    """Side-by-side summaries before (base) and after (finetuned) finetuning."""
    miner = _miner_cfg(kw)
    cfg = _typicality_cfg(kw)
    _emit(pipeline.compare_stage(pipeline.Run(run_dir), cfg, miner, k=k, seed=cfg.seed, force=force))


@main.command("make-toy")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--kind", type=click.Choice(["mining", "disease"]), default="mining", show_default=True)
@click.option("--images", "n_images", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def make_toy(out_dir, kind, n_images, seed):
    """Write a synthetic labeled image folder (and ROI table for ``disease``)."""
    from .harness import (DiseaseDatasetSpec, ToyDatasetSpec, generate_disease_dataset,
                          generate_toy_dataset, write_image_folder)
    from .medical import write_roi_table

    if kind == "mining":
        write_image_folder(generate_toy_dataset(ToyDatasetSpec(n_images=n_images), seed), out_dir)
    else:
        train, _ = generate_disease_dataset(DiseaseDatasetSpec(n_images=n_images), seed)
        test, rois = generate_disease_dataset(DiseaseDatasetSpec(n_images=max(2, n_images // 6)),
                                              seed + 1000, split="eval")
        for rec in test:
            rec.id = "eval_" + rec.id
        for roi in rois:
            roi.image_id = "eval_" + roi.image_id
        write_image_folder(train + test, out_dir)
        write_roi_table(pipeline.Path(out_dir) / "rois.csv", rois)
    click.echo(out_dir)


@main.command()
@click.argument("backend_spec")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8765, show_default=True)
def serve(backend_spec, host, port):
    """Serve a backend over the HTTP denoiser contract."""
    import uvicorn

    from .backends import load_backend
    from .backends.remote import create_app

    uvicorn.run(create_app(load_backend(backend_spec)), host=host, port=port)


if __name__ == "__main__":
    main()
