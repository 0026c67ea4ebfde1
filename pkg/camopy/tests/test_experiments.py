"""
Integration tests for training, evaluation, inference and reports
"""
import json
import math

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from camopy.checkpoint import load_checkpoint, model_from_checkpoint
from camopy.config import load_config
from camopy.custom_exceptions import DataException, NonFiniteException
from camopy.data import DatasetManifest, ManifestEntry, synth_generate
from camopy.experiments import (
    EvaluationExperiment,
    ReportExperiment,
    TrainingExperiment,
    infer_image,
)
from camopy.metrics import METRIC_NAMES
from camopy.models import CamouflageSegmenter, Prediction, TEXT_PREFIXES

LOG_FIELDS = {"step", "epoch", "lr", "mask", "fix", "attr", "consist", "total"}


def _short_config():
    return load_config("toy").replace(max_steps=4, batch_size=4, progressbar=False)


@pytest.fixture(scope="module")
def trained(synth_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return TrainingExperiment(synth_manifest, _short_config(), out)


@pytest.fixture(scope="module")
def evaluated(trained, synth_manifest, tmp_path_factory):
    model = model_from_checkpoint(trained.checkpoint_path)
    out = tmp_path_factory.mktemp("eval")
    return EvaluationExperiment(synth_manifest, model, out_dir=out, batch_size=3)


class OracleModel:
    """Predicts the ground-truth mask of every image it is asked about"""

    def __init__(self, manifest, config):
        self.config = config
        self.masks = {
            manifest[i].name: manifest.sample(i, config.image_size).gt_mask
            for i in range(len(manifest))
        }

    def predict(self, images, names=None):
        assert images.shape[0] == len(names)
        return Prediction(mask=np.stack([self.masks[n] for n in names]).astype(np.float64))


@pytest.mark.integration
def test_training_writes_run_directory(trained):
    out = trained.out_dir
    assert (out / "config.yaml").exists()
    assert trained.checkpoint_path == out / "checkpoint.pt"
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    records = [json.loads(line) for line in lines]
    assert all(set(r) == LOG_FIELDS for r in records)
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert [r["epoch"] for r in records] == [1, 1, 2, 2]
    for r in records:
        assert r["total"] == r["mask"] + r["fix"] + r["attr"] + r["consist"]
        assert all(math.isfinite(r[k]) for k in LOG_FIELDS)

    payload = load_checkpoint(trained.checkpoint_path)
    assert payload["step"] == 4 and payload["epoch"] == 2
    assert payload["metrics"] == pytest.approx(trained.final_metrics)
    assert isinstance(trained.history, pd.DataFrame)


@pytest.mark.integration
def test_training_summary_and_plot(trained, capsys):
    trained.summary()
    printed = capsys.readouterr().out
    assert "Training" in printed
    assert "Steps: 4" in printed
    fig, ax = trained.plot()
    assert len(ax) == 2
    plt.close(fig)


@pytest.mark.integration
def test_training_is_deterministic(trained, synth_manifest, tmp_path):
    again = TrainingExperiment(synth_manifest, _short_config(), tmp_path / "again")
    columns = ["mask", "fix", "attr", "consist", "total"]
    np.testing.assert_allclose(
        again.history[columns].to_numpy(), trained.history[columns].to_numpy(), atol=1e-6
    )
    image = synth_manifest.sample(0, 64).image
    a = model_from_checkpoint(trained.checkpoint_path).predict(image)
    b = model_from_checkpoint(again.checkpoint_path).predict(image)
    np.testing.assert_allclose(a.mask, b.mask, atol=1e-6)


@pytest.mark.integration
def test_zero_gamma_leaves_text_branch_untouched(synth_manifest, tmp_path):
    config = _short_config().replace(**{"loss.gamma": 0.0})
    torch.manual_seed(0)
    model = CamouflageSegmenter(config)
    assert model.text_encoder is not None
    before = {k: v.clone() for k, v in model.state_dict().items()}
    TrainingExperiment(synth_manifest, config, tmp_path, model=model)
    after = model.state_dict()
    for key, value in before.items():
        if key.startswith(TEXT_PREFIXES):
            assert torch.equal(after[key], value), key
    assert not torch.equal(after["mask_decoder.out.weight"], before["mask_decoder.out.weight"])


@pytest.mark.integration
def test_checkpoints_every_epoch(synth_manifest, tmp_path):
    config = _short_config().replace(checkpoint_every=1)
    result = TrainingExperiment(synth_manifest, config, tmp_path)
    written = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert written == ["epoch_0001.pt", "epoch_0002.pt"]
    assert result.last_checkpoint == tmp_path / "checkpoints" / "epoch_0002.pt"
    assert load_checkpoint(result.last_checkpoint)["step"] == 2 * 2


@pytest.mark.integration
def test_non_finite_loss_keeps_last_checkpoint(synth_manifest, tmp_path, monkeypatch):
    original = CamouflageSegmenter.loss
    calls = {"n": 0}

    def failing_loss(self, out, batch):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NonFiniteException("Loss term 'mask' is not finite: nan.")
        return original(self, out, batch)

    monkeypatch.setattr(CamouflageSegmenter, "loss", failing_loss)
    config = _short_config().replace(checkpoint_every=1)
    with pytest.raises(NonFiniteException, match="'mask'"):
        TrainingExperiment(synth_manifest, config, tmp_path)
    assert load_checkpoint(tmp_path / "checkpoints" / "epoch_0001.pt")["step"] == 2
    assert not (tmp_path / "checkpoint.pt").exists()
    assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == 2


def test_empty_manifest_is_rejected(tmp_path):
    empty = DatasetManifest([])
    with pytest.raises(DataException, match="empty manifest"):
        TrainingExperiment(empty, _short_config(), tmp_path)
    with pytest.raises(DataException, match="empty manifest"):
        EvaluationExperiment(empty, OracleModel(empty, load_config("toy")))
    with pytest.raises(DataException):
        ReportExperiment()


def test_model_is_required(synth_manifest):
    with pytest.raises(ValueError, match="model not set"):
        EvaluationExperiment(synth_manifest)


def test_oracle_evaluation(synth_manifest, tmp_path):
    oracle = OracleModel(synth_manifest, load_config("toy"))
    result = EvaluationExperiment(synth_manifest, oracle, out_dir=tmp_path, batch_size=3)
    means = result.report.means
    assert means["MAE"] == 0.0
    assert means["S_alpha"] == pytest.approx(1.0, abs=1e-6)
    assert means["E_phi"] == pytest.approx(1.0, abs=1e-6)
    assert means["F_beta_w"] == pytest.approx(1.0, abs=1e-6)
    assert len(result.scores) == len(synth_manifest)
    assert (tmp_path / "scores.jsonl").exists()
    assert (tmp_path / "summary.json").exists()
    mask = np.asarray(Image.open(tmp_path / "masks" / "00000.png"))
    np.testing.assert_array_equal(mask, oracle.masks["00000"] * 255)


def test_missing_masks_are_skipped(synth_manifest):
    entries = list(synth_manifest.entries)
    first = entries[0]
    entries[0] = ManifestEntry(
        first.image_path, "masks/missing.png", first.description, first.attributes
    )
    manifest = DatasetManifest(entries, root=synth_manifest.root, taxonomy=synth_manifest.taxonomy)
    oracle = OracleModel(synth_manifest, load_config("toy"))
    with pytest.warns(UserWarning, match="Skipping 00000"):
        result = EvaluationExperiment(manifest, oracle)
    assert result.report.skipped == 1
    assert "00000" not in result.scores.index
    assert len(result.scores) == len(synth_manifest) - 1


@pytest.mark.integration
def test_evaluation_outputs(evaluated, synth_manifest):
    out = evaluated.out_dir
    assert list(evaluated.scores.index) == [e.name for e in synth_manifest]
    for metric in METRIC_NAMES:
        assert evaluated.scores[metric].between(0, 1).all()
    for entry in synth_manifest:
        assert (out / "masks" / f"{entry.name}.png").exists()
        heat = np.asarray(Image.open(out / "fixations" / f"{entry.name}.png"))
        assert heat.shape == (64, 64)
    records = [json.loads(line) for line in (out / "attributes.jsonl").read_text().splitlines()]
    assert len(records) == len(synth_manifest)
    for record in records:
        assert math.fsum(record["attributes"].values()) == pytest.approx(1.0, abs=1e-9)
        assert set(record["categories"]) == {"SF", "COF", "IQF"}


@pytest.mark.integration
def test_evaluation_summary_and_plot(evaluated, capsys):
    evaluated.summary()
    printed = capsys.readouterr().out
    assert "Evaluation" in printed and "S_alpha" in printed
    fig, _ = evaluated.plot()
    plt.close(fig)


@pytest.mark.integration
def test_inference_is_reproducible(trained, synth_manifest, tmp_path):
    model = model_from_checkpoint(trained.checkpoint_path)
    assert model.text_encoder is None
    image = synth_manifest.resolve(synth_manifest[1].image_path)
    first = infer_image(model, image, tmp_path / "a")
    second = infer_image(model, image, tmp_path / "b")
    for attr in ("mask_path", "fixation_path", "overlay_path", "attributes_path"):
        a, b = getattr(first, attr), getattr(second, attr)
        assert a.name == b.name
        assert a.read_bytes() == b.read_bytes(), attr

    mask = np.asarray(Image.open(first.mask_path))
    assert mask.shape == (64, 64)
    assert math.fsum(first.attributes["attributes"].values()) == pytest.approx(1.0, abs=1e-9)
    assert first.attributes["name"] == "00001"


@pytest.mark.integration
def test_inference_restores_original_size(trained, tmp_path):
    model = model_from_checkpoint(trained.checkpoint_path)
    image = np.random.default_rng(0).integers(0, 256, (50, 80, 3), dtype=np.uint8)
    Image.fromarray(image).save(tmp_path / "wide.png")
    result = infer_image(model, tmp_path / "wide.png", tmp_path / "out")
    assert np.asarray(Image.open(result.mask_path)).shape == (50, 80)
    assert np.asarray(Image.open(result.fixation_path)).shape == (50, 80)


@pytest.mark.integration
def test_inference_without_optional_heads(synth_manifest, tmp_path):
    config = _short_config().replace(use_fixation=False, use_attributes=False)
    run = TrainingExperiment(synth_manifest, config, tmp_path / "run")
    model = model_from_checkpoint(run.checkpoint_path)
    result = infer_image(model, synth_manifest.resolve(synth_manifest[0].image_path), tmp_path)
    assert result.mask_path.exists()
    assert result.fixation_path is None and result.attributes_path is None


@pytest.mark.integration
def test_report(evaluated, synth_manifest, tmp_path, capsys):
    report = ReportExperiment(
        {"synth": synth_manifest}, scores_dir=evaluated.out_dir, out_dir=tmp_path, max_images=2
    )
    for name in (
        "attribute_stats.csv",
        "category_stats.csv",
        "description_stats.csv",
        "summary.json",
        "attribute_comparison.png",
        "attribute_rose_synth.png",
        "score_distributions.png",
        "attributes_00000.png",
        "fixation_00000.png",
        "fixation_00001.png",
    ):
        assert (tmp_path / name).exists(), name
    assert not (tmp_path / "fixation_00002.png").exists()
    stats = pd.read_csv(tmp_path / "attribute_stats.csv")
    assert len(stats) == 17
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["count"] == len(synth_manifest)
    report.summary()
    assert "Report" in capsys.readouterr().out


def test_report_without_scores(synth_manifest, tmp_path):
    other = synth_generate(3, seed=9, out_dir=tmp_path / "other", canvas=32)
    report = ReportExperiment({"a": synth_manifest, "b": other}, out_dir=tmp_path / "report")
    assert set(report.attribute_stats) == {"a", "b"}
    assert (tmp_path / "report" / "attribute_rose_b.png").exists()
    assert not (tmp_path / "report" / "score_distributions.png").exists()


@pytest.mark.slow
def test_overfits_a_small_synthetic_set(tmp_path):
    manifest = synth_generate(16, seed=0, out_dir=tmp_path / "data", canvas=64)
    config = load_config("toy").replace(progressbar=False, **{"attributes.dropout": 0.0})
    run = TrainingExperiment(manifest, config, tmp_path / "run")
    assert len(run.history) <= 2000
    result = EvaluationExperiment(manifest, model_from_checkpoint(run.checkpoint_path))
    assert result.report.means["MAE"] < 0.05
    assert run.final_metrics["attr"] < 1e-3
