""" Basic functionality tests for self-distillation pretraining """

import numpy as np
import pandas as pd
import pytest
import torch

from ctpretrain import ConfigValueError, NumericalException
from ctpretrain.checkpoint import load_checkpoint
from ctpretrain.models import Volume3D
from ctpretrain.network import preset
from ctpretrain.pretrain import PretrainConfig, case_seed, run_pretraining, warmup_cosine


@pytest.fixture(name="model_config")
def fixture_model_config():
    """Small ViT on 32^3 crops"""
    return preset(
        "vit",
        "desk",
        input_shape=(32, 32, 32),
        embed_dim=24,
        depths=(3,),
        num_heads=(2,),
        decoder_channels=(8, 8, 4, 4),
        proto_dim=16,
        head_hidden_dim=16,
        head_bottleneck_dim=8,
        contrast_dim=8,
    )


@pytest.fixture(name="volumes")
def fixture_volumes():
    """Three windowed random volumes a little larger than the crop"""
    rng = np.random.default_rng(5)
    return [
        Volume3D(rng.uniform(0, 1, size=(36, 36, 34)), (1.5, 1.5, 2.0), intensity="unit")
        for _ in range(3)
    ]


def small_config(**overrides):
    values = {"epochs": 2, "warmup_epochs": 0, "batch_size": 2, "augment": {"enabled": False}}
    values.update(overrides)
    return PretrainConfig.from_dict(values)


@pytest.mark.parametrize(
    "overrides, field",
    [
        ({"preset": "dino"}, "preset"),
        ({"tasks": {"jigsaw": 1.0}}, "tasks"),
        ({"tasks": {"mip": 0.0}}, "tasks"),
        ({"tasks": {"mip": 1.0}, "mask_ratio": 0.0}, "mask_ratio"),
        ({"mask_ratio": 1.5}, "mask_ratio"),
        ({"epochs": 3, "warmup_epochs": 3}, "warmup_epochs"),
        ({"regime": "supervised"}, "regime"),
        ({"ema_momentum": (1.0, 0.99)}, "ema_momentum"),
        ({"base_lr": 0}, "base_lr"),
        ({"preset": "contrastive", "batch_size": 1}, "batch_size"),
    ],
)
def test_config_invalid(overrides, field):
    """Inconsistent pretraining settings are rejected"""
    with pytest.raises(ConfigValueError) as excinfo:
        PretrainConfig.from_dict(overrides)
    assert excinfo.value.field == field


def test_config_weights():
    """Presets and explicit task weights"""
    config = PretrainConfig(preset="itd_mpd")
    assert config.weights == {"mip": 0.0, "mpd": 1.0, "itd": 1.0, "contrastive": 0.0}
    assert config.pretext_name == "itd_mpd"
    assert PretrainConfig().pretext_name == "smit"
    custom = PretrainConfig(tasks={"mip": 1.0, "contrastive": 0.5})
    assert custom.weights["contrastive"] == 0.5
    assert custom.pretext_name == "contrastive+mip"


def test_config_mask_free_tasks():
    """Tasks without masking accept a zero mask ratio"""
    assert PretrainConfig(preset="itd", mask_ratio=0.0).mask_ratio == 0.0


def test_warmup_cosine():
    """Linear warmup then cosine decay to zero"""
    assert warmup_cosine(0, 2, 10) == pytest.approx(1 / 3)
    assert warmup_cosine(1, 2, 10) == pytest.approx(2 / 3)
    assert warmup_cosine(2, 2, 10) == pytest.approx(1.0)
    assert warmup_cosine(9, 2, 10) == pytest.approx(0.0)
    assert warmup_cosine(0, 0, 1) == pytest.approx(1.0)


def test_case_seed():
    """Seeds are stable and depend on every key"""
    assert case_seed(1, 2, 3) == case_seed(1, 2, 3)
    assert case_seed(1, 2, 3) != case_seed(1, 2, 4)
    assert 0 <= case_seed(7) < 2**32


def test_run_pretraining(tmp_path, model_config, volumes):
    """A short run writes its checkpoint and loss curve"""
    checkpoint = run_pretraining(small_config(), volumes, model_config, seed=1, out_dir=tmp_path)
    assert checkpoint.epoch == 2
    assert checkpoint.lineage == "self"
    assert checkpoint.pretext == "smit"
    assert checkpoint.parent_id is None
    assert set(checkpoint.teacher_state) == {"model", "momentum", "center_patch", "center_global"}
    curve = pd.read_csv(tmp_path / "loss_curve.csv")
    assert list(curve["epoch"]) == [1, 2]
    assert {"mip", "mpd", "itd", "contrastive", "total", "lr", "momentum"} <= set(curve.columns)
    assert (curve["contrastive"] == 0).all()
    assert np.isfinite(curve["total"]).all()
    assert load_checkpoint(tmp_path / "checkpoint.pt").checkpoint_id == checkpoint.checkpoint_id


def test_run_pretraining_deterministic(model_config, volumes):
    """The same seed gives the same weights"""
    config = small_config(epochs=1, augment={"enabled": True})
    first = run_pretraining(config, volumes, model_config, seed=3)
    second = run_pretraining(config, volumes, model_config, seed=3)
    for key, value in first.model_state.items():
        assert torch.allclose(value, second.model_state[key])


def test_run_pretraining_contrastive(model_config, volumes):
    """Contrastive pretraining skips batches of one"""
    config = small_config(preset="contrastive", epochs=1)
    checkpoint = run_pretraining(config, volumes, model_config, seed=0)
    row = checkpoint.metadata["loss_curve"][0]
    assert row["contrastive"] > 0
    assert row["mip"] == 0


def test_run_pretraining_cnn(volumes):
    """The convolutional network pretrains without token masking"""
    config = preset(
        "cnn",
        "desk",
        input_shape=(32, 32, 32),
        embed_dim=2,
        decoder_channels=(8, 4, 4),
        proto_dim=16,
        head_hidden_dim=16,
        head_bottleneck_dim=8,
    )
    checkpoint = run_pretraining(small_config(epochs=1), volumes, config, seed=0)
    assert checkpoint.model_config.arch == "cnn"


def test_run_pretraining_two_stage(model_config, volumes):
    """The second stage starts from the first and records it as parent"""
    with pytest.raises(ConfigValueError) as excinfo:
        run_pretraining(small_config(regime="wild_then_self"), volumes, model_config)
    assert excinfo.value.field == "init"
    wild = run_pretraining(small_config(epochs=1, regime="wild"), volumes, model_config)
    second = run_pretraining(
        small_config(epochs=1, regime="wild_then_self"), volumes, model_config, init=wild
    )
    assert second.parent_id == wild.checkpoint_id
    assert second.lineage == "wild_then_self"


def test_run_pretraining_empty(model_config):
    """Empty cohorts are config errors"""
    with pytest.raises(ConfigValueError):
        run_pretraining(small_config(), [], model_config)


def test_run_pretraining_non_finite(tmp_path, model_config, volumes):
    """Non-finite losses stop the run after a diagnostic checkpoint"""
    broken = [vol.replace(data=np.full(vol.shape, np.nan)) for vol in volumes]
    with pytest.raises(NumericalException):
        run_pretraining(small_config(preset="mip"), broken, model_config, out_dir=tmp_path)
    assert "diagnostic" in load_checkpoint(tmp_path / "diagnostic.pt").metadata
