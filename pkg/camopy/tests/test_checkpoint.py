"""
Tests for writing, reading and restoring checkpoints
"""
import pytest
import torch

from camopy.checkpoint import (
    REQUIRED_KEYS,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    write_payload,
)
from camopy.config import load_config
from camopy.custom_exceptions import CheckpointException
from camopy.models import CamouflageSegmenter, strip_text_branch


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return CamouflageSegmenter(load_config("toy")).eval()


@pytest.fixture
def saved(tmp_path, model):
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=1e-3)
    return save_checkpoint(
        tmp_path / "ckpt.pt", model, optimizer, epoch=3, step=12, metrics={"total": 0.5}
    )


def test_payload_contents(saved, model):
    payload = load_checkpoint(saved)
    for key in REQUIRED_KEYS:
        assert key in payload
    assert payload["epoch"] == 3 and payload["step"] == 12
    assert payload["metrics"] == {"total": 0.5}
    assert payload["config_hash"] == model.config.hash()
    assert payload["optimizer_state"] is not None


def test_save_load_save_is_byte_identical(saved, tmp_path):
    again = write_payload(load_checkpoint(saved), tmp_path / "again.pt")
    assert again.read_bytes() == saved.read_bytes()


def test_failed_write_keeps_previous_file(saved, model, monkeypatch):
    before = saved.read_bytes()

    def broken_save(obj, f, *args, **kwargs):
        f.write(b"partial")
        raise OSError("disk full")

    monkeypatch.setattr(torch, "save", broken_save)
    with pytest.raises(CheckpointException, match="disk full"):
        save_checkpoint(saved, model)
    assert saved.read_bytes() == before
    assert sorted(p.name for p in saved.parent.iterdir()) == ["ckpt.pt"]


def test_missing_and_corrupt_files(tmp_path):
    with pytest.raises(CheckpointException, match="not found"):
        load_checkpoint(tmp_path / "nothing.pt")
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"this is not a checkpoint")
    with pytest.raises(CheckpointException, match="corrupt"):
        load_checkpoint(bad)


def test_incomplete_payload(tmp_path):
    path = write_payload({"model_state": {}}, tmp_path / "partial.pt")
    with pytest.raises(CheckpointException, match="lacks required entries"):
        load_checkpoint(path)


def test_tampered_config(saved, tmp_path):
    payload = load_checkpoint(saved)
    payload["config"]["lr"] = 1.0
    path = write_payload(payload, tmp_path / "tampered.pt")
    with pytest.raises(CheckpointException, match="does not match its hash"):
        load_checkpoint(path)


def test_backbone_mismatch(saved):
    with pytest.raises(CheckpointException, match="does not match the requested"):
        model_from_checkpoint(saved, expected=load_config("default"))
    restored = model_from_checkpoint(saved, expected=load_config("toy"))
    assert restored.config == load_config("toy")


def test_inference_model_has_no_text_branch(saved, model):
    restored = model_from_checkpoint(saved)
    assert restored.text_encoder is None and restored.visual_projector is None
    assert not restored.training
    expected = strip_text_branch(model.state_dict())
    state = restored.state_dict()
    assert set(state) == set(expected)
    for key, value in expected.items():
        assert torch.equal(state[key], value)


def test_restoring_the_text_branch(saved, model):
    restored = model_from_checkpoint(saved, text_branch=True)
    assert restored.text_encoder is not None
    assert torch.equal(
        restored.text_encoder.embedding.weight, model.text_encoder.embedding.weight
    )


def test_restored_model_predicts_identically(saved, model):
    images = torch.zeros(1, 64, 64, 3, dtype=torch.uint8)
    a = model.predict(images.numpy())
    b = model_from_checkpoint(saved).predict(images.numpy())
    assert (a.mask == b.mask).all()
    assert (a.attributes == b.attributes).all()
