import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from diffmine import pipeline
from diffmine.cli import main
from diffmine.harness import ToyDatasetSpec, generate_toy_dataset, write_image_folder
from diffmine.images import pixel_hash, save_png


def test_bin_label():
    assert pipeline.bin_label("1927", "decade") == "1920"
    assert pipeline.bin_label("1930", "decade") == "1930"
    assert pipeline.bin_label(" Paris ") == "Paris"
    with pytest.raises(ValueError):
        pipeline.bin_label("1927", "century")


def test_apply_resize_policies():
    px = np.random.default_rng(0).uniform(size=(100, 150, 3))
    assert pipeline.apply_resize(px, "fixed-height:256").shape == (256, 384, 3)
    assert pipeline.apply_resize(px, "square:64").shape == (64, 64, 3)
    assert pipeline.apply_resize(px, "none") is px
    with pytest.raises(ValueError):
        pipeline.apply_resize(px, "fit:12")


def _write_folder(root, entries):
    (root / "imgs").mkdir(parents=True)
    rng = np.random.default_rng(0)
    lines = ["filename,year"]
    for name, (h, w), year in entries:
        save_png(root / "imgs" / name, rng.uniform(size=(h, w, 3)))
        if year is not None:
            lines.append(f"{name},{year}")
    (root / "table.csv").write_text("\n".join(lines) + "\n")


def test_ingest_decades_and_fixed_height(tmp_path):
    _write_folder(tmp_path, [("a.png", (40, 60), 1927), ("b.png", (80, 40), 1935), ("c.png", (30, 30), None)])
    run = pipeline.Run(tmp_path / "run")
    report = pipeline.ingest(run, tmp_path / "imgs", tmp_path / "table.csv", label_column="year",
                             binning="decade", resize_policy="fixed-height:256", preset="cars")
    assert report["ingested"] == 2 and report["unlabeled"] == ["c.png"]
    recs = {r.id: r for r in run.records()}
    assert recs["a"].label == "1920" and recs["b"].label == "1930"
    assert recs["a"].shape[:2] == (256, 384) and recs["b"].shape[:2] == (256, 128)
    assert run.labels.domain_template == "A car from the {}s."


def test_ingest_empty_directory_warns(tmp_path, caplog):
    (tmp_path / "empty").mkdir()
    run = pipeline.Run(tmp_path / "run")
    assert pipeline.ingest(run, tmp_path / "empty")["ingested"] == 0
    assert (tmp_path / "run" / "dataset" / "records.jsonl").read_text() == ""
    assert "no labeled images" in caplog.text
    result = CliRunner().invoke(main, ["ingest", str(tmp_path / "run2"), str(tmp_path / "empty")])
    assert result.exit_code == 0 and "warning" in result.output


def test_undecodable_file_reported(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "bad.png").write_bytes(b"not a png")
    (src / "labels.csv").write_text("filename,label\nbad.png,x\n")
    report = pipeline.ingest(pipeline.Run(tmp_path / "run"), src)
    assert report["undecodable"] == ["bad.png"]


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_image_folder(generate_toy_dataset(ToyDatasetSpec(n_images=24), seed=0), root / "data")
    runner = CliRunner()
    run_dir = str(root / "run")
    res = runner.invoke(main, ["ingest", run_dir, str(root / "data"), "--preset", "toy", "--channels", "1"])
    assert res.exit_code == 0, res.output
    return runner, run_dir


def test_stage_order_errors_name_missing_stage(toy_run, tmp_path):
    runner, _ = toy_run
    fresh = str(tmp_path / "fresh")
    CliRunner().invoke(main, ["ingest", fresh, str(tmp_path)])
    for cmd, needed in [("mine", "score"), ("cluster", "mine"), ("render", "cluster"), ("cotypical", "translate")]:
        res = runner.invoke(main, [cmd, fresh])
        assert res.exit_code != 0
        assert f"`{needed}`" in res.output


def test_cli_pipeline_and_caching(toy_run):
    runner, run_dir = toy_run
    args = ["--samples", "4"]
    first = runner.invoke(main, ["score", run_dir, *args])
    assert first.exit_code == 0, first.output
    second = runner.invoke(main, ["score", run_dir, *args])
    assert "cache hits: 24/24 (100%)" in second.output
    for cmd in (["mine", run_dir, "--patch-size", "8", "--stride", "4"], ["cluster", run_dir, "-k", "3"],
                ["render", run_dir]):
        res = runner.invoke(main, cmd)
        assert res.exit_code == 0, res.output
        assert json.loads(res.output)["cache_hit"] is False
    sheet = Image.open(f"{run_dir}/render/base/square.png")
    assert sheet.size == (4 + 6 * 68, 4 + 3 * 68)
    manifest = json.loads(open(f"{run_dir}/manifest.json").read())
    assert {"ingest", "score:base", "mine:base", "cluster:base", "render:base"} <= set(manifest["stages"])
    hashes = {p: pixel_hash(f"{run_dir}/{p}") for p in manifest["stages"]["render:base"]["outputs"]}
    for cmd in (["mine", run_dir, "--patch-size", "8", "--stride", "4"], ["cluster", run_dir, "-k", "3"],
                ["render", run_dir]):
        assert json.loads(runner.invoke(main, cmd).output)["cache_hit"] is True
    assert hashes == {p: pixel_hash(f"{run_dir}/{p}") for p in hashes}
    crops = list((pipeline.Path(run_dir) / "mine" / "base" / "crops" / "square").glob("*.png"))
    assert len(crops) == 12 * 5


def test_changed_parameters_invalidate(toy_run):
    runner, run_dir = toy_run
    runner.invoke(main, ["score", run_dir, "--samples", "4"])
    runner.invoke(main, ["mine", run_dir, "--patch-size", "8", "--stride", "4"])
    res = runner.invoke(main, ["mine", run_dir, "--patch-size", "8", "--stride", "2"])
    assert json.loads(res.output)["cache_hit"] is False


def test_tampered_output_is_recomputed(toy_run):
    runner, run_dir = toy_run
    runner.invoke(main, ["score", run_dir, "--samples", "4"])
    runner.invoke(main, ["mine", run_dir, "--patch-size", "8", "--stride", "4"])
    path = pipeline.Path(run_dir) / "mine" / "base" / "cross.jsonl"
    path.write_text("")
    res = runner.invoke(main, ["mine", run_dir, "--patch-size", "8", "--stride", "4"])
    assert json.loads(res.output)["cache_hit"] is False and path.read_text()


def test_translate_and_cotypical_cli(toy_run):
    runner, run_dir = toy_run
    res = runner.invoke(main, ["translate", run_dir, "--translator", "stripe-tint"])
    assert json.loads(res.output)["entries"] == 48
    res = runner.invoke(main, ["cotypical", run_dir, "--samples", "2", "--patch-size", "8", "-k", "3",
                               "--no-reduce", "--top-n", "20"])
    assert res.exit_code == 0, res.output
    out = json.loads(res.output)
    assert out["mined"] == 20 and out["clusters"] == 3 and out["excluded"] == 0
    assert runner.invoke(main, ["translate", run_dir, "--translator", "sepia"]).exit_code != 0


def test_score_cache_env_override(toy_run, tmp_path, monkeypatch):
    runner, run_dir = toy_run
    monkeypatch.setenv("DIFFMINE_CACHE", str(tmp_path / "cache"))
    res = runner.invoke(main, ["score", run_dir, "--samples", "3"])
    assert res.exit_code == 0
    assert list((tmp_path / "cache").rglob("index.jsonl"))
