""" Basic functionality tests for the segmentation networks """

import numpy as np
import pytest
import torch

from ctpretrain import ConfigValueError, InputException, NumericalException, UnknownTapError
from ctpretrain.models import Volume3D
from ctpretrain.network import (
    as_batch,
    build_model,
    count_parameters,
    forward_features,
    forward_segment,
    freeze_layers,
    preset,
)

SMALL = {
    "vit": {
        "input_shape": (32, 32, 32),
        "embed_dim": 48,
        "depths": (3,),
        "num_heads": (2,),
        "decoder_channels": (16, 8, 8, 4),
    },
    "swin": {
        "input_shape": (32, 32, 32),
        "embed_dim": 12,
        "depths": (2, 2, 2, 2),
        "num_heads": (1, 1, 2, 2),
        "decoder_channels": (48, 24, 12, 8, 4),
    },
    "cnn": {"input_shape": (32, 32, 32), "embed_dim": 4, "decoder_channels": (16, 8, 4)},
}
HEAD_SIZES = {"proto_dim": 32, "head_hidden_dim": 32, "head_bottleneck_dim": 16, "contrast_dim": 8}

# Reference sizes of the full-scale networks, segmentation path only
REFERENCE_PARAMETERS = {"vit": 46_405_874, "swin": 64_698_114, "cnn": 17_111_499}


def small_config(arch):
    return preset(arch, "desk", **SMALL[arch], **HEAD_SIZES)


@pytest.fixture(name="small_models", scope="module")
def fixture_small_models():
    """One small model per architecture"""
    return {arch: build_model(small_config(arch), seed=0) for arch in SMALL}


@pytest.fixture(name="volume")
def fixture_volume():
    """Random unit volume on the small input grid"""
    data = np.random.default_rng(1).uniform(0, 1, size=(32, 32, 32)).astype(np.float32)
    return Volume3D(data, (1.5, 1.5, 2.0), intensity="unit")


def test_preset_unknown():
    """Unknown architectures and scales are config errors"""
    with pytest.raises(ConfigValueError) as excinfo:
        preset("unet", "desk")
    assert excinfo.value.field == "model"
    with pytest.raises(ConfigValueError):
        preset("vit", "huge")


@pytest.mark.parametrize(
    "arch, overrides, field",
    [
        ("vit", {"input_shape": (60, 64, 64)}, "input_shape"),
        ("swin", {"input_shape": (72, 64, 64)}, "input_shape"),
        ("vit", {"num_heads": (5,)}, "num_heads"),
        ("swin", {"num_heads": (2, 2, 4)}, "num_heads"),
        ("cnn", {"decoder_channels": (64, 32)}, "decoder_channels"),
        ("vit", {"patch_size": (8, 8)}, "patch_size"),
        ("vit", {"drop_path_rate": 1.0}, "drop_path_rate"),
    ],
)
def test_config_inconsistent(arch, overrides, field):
    """Inconsistent hyperparameters are rejected when the config is built"""
    with pytest.raises(ConfigValueError) as excinfo:
        preset(arch, "desk", **overrides)
    assert excinfo.value.field == field


def test_config_derived():
    """Downsampling and token grids follow the architecture"""
    assert preset("vit", "paper").downsampling == (8, 8, 8)
    assert preset("swin", "paper").downsampling == (16, 16, 16)
    assert preset("cnn", "paper").downsampling == (8, 8, 8)
    assert preset("swin", "paper").stage_dims == (48, 96, 192, 384)
    assert preset("swin", "desk").decoder_levels == 5


def test_build_seeded():
    """The same seed builds identical weights, a different one doesn't"""
    config = small_config("vit")
    first = build_model(config, seed=4).state_dict()
    second = build_model(config, seed=4).state_dict()
    third = build_model(config, seed=5).state_dict()
    assert all(torch.equal(first[key], second[key]) for key in first)
    assert not all(torch.equal(first[key], third[key]) for key in first)


@pytest.mark.parametrize("arch", ["vit", "swin", "cnn"])
def test_forward_shape(small_models, volume, arch):
    """Logits cover every voxel with two classes"""
    logits = forward_segment(small_models[arch], volume)
    assert logits.shape == (1, 2, 32, 32, 32)


@pytest.mark.parametrize("arch", ["vit", "swin", "cnn"])
def test_forward_pretrain_shapes(small_models, volume, arch):
    """Pretext outputs have the widths the heads are built with"""
    model = small_models[arch]
    n_tokens = int(np.prod(model.token_grid))
    with torch.no_grad():
        out = model.forward_pretrain(as_batch(volume).repeat(2, 1, 1, 1, 1))
    assert out.recon.shape == (2, 1, 32, 32, 32)
    assert out.patch_logits.shape == (2, n_tokens, 32)
    assert out.global_logits.shape == (2, 32)
    assert out.contrast.shape == (2, 8)


def test_forward_pretrain_selected(small_models, volume):
    """Only the requested outputs are computed"""
    with torch.no_grad():
        out = small_models["vit"].forward_pretrain(as_batch(volume), outputs=("global",))
    assert out.global_logits is not None
    assert out.recon is None and out.patch_logits is None and out.contrast is None


@pytest.mark.parametrize("arch", ["vit", "swin"])
def test_token_mask_changes_encoding(small_models, volume, arch):
    """Masked tokens are replaced before the transformer blocks"""
    model = small_models[arch]
    x = as_batch(volume)
    token_mask = torch.zeros((1, *model.embed_grid), dtype=torch.bool)
    token_mask[0, 0] = True
    with torch.no_grad():
        plain = model.forward_pretrain(x, outputs=("global",)).global_logits
        masked = model.forward_pretrain(x, token_mask, outputs=("global",)).global_logits
    assert not torch.allclose(plain, masked)


def test_forward_wrong_grid(small_models):
    """Inputs off the model grid are rejected"""
    with pytest.raises(InputException):
        forward_segment(small_models["cnn"], np.zeros((16, 32, 32), dtype=np.float32))


def test_forward_non_finite(small_models):
    """NaN inputs are reported as a numerical failure"""
    data = np.zeros((32, 32, 32), dtype=np.float32)
    data[3, 3, 3] = np.nan
    with pytest.raises(NumericalException) as excinfo:
        forward_segment(small_models["cnn"], data)
    assert excinfo.value.where == "input"


def test_as_batch():
    """Arrays, volumes and tensors become (B, 1, D, H, W) float tensors"""
    data = np.ones((4, 5, 6), dtype=np.int16)
    assert as_batch(data).shape == (1, 1, 4, 5, 6)
    assert as_batch(data).dtype == torch.float32
    assert as_batch(Volume3D(data.astype(float), (1, 1, 1))).shape == (1, 1, 4, 5, 6)
    assert as_batch(torch.zeros(2, 1, 4, 5, 6)).shape == (2, 1, 4, 5, 6)


def test_tap_names(small_models):
    """Taps are named per block, shallow to deep"""
    assert list(small_models["vit"].tap_modules()) == ["block1", "block2", "block3"]
    assert list(small_models["swin"].tap_modules()) == [f"block{i}" for i in range(1, 9)]
    assert list(small_models["cnn"].tap_modules()) == [
        "down1",
        "down2",
        "down3",
        "down4",
        "up1",
        "up2",
        "up3",
    ]


def test_desk_swin_taps():
    """The desk Swin exposes one tap per block"""
    model = build_model(preset("swin", "desk"))
    assert len(model.tap_modules()) == 10


def test_forward_features(small_models, volume):
    """Every requested tap is captured with a feature map"""
    features = forward_features(small_models["vit"], volume)
    assert features.names == ["block1", "block2", "block3"]
    assert features["block1"].shape == (64, 48)
    assert features["block2"].feature_map.shape == (1, 48, 4, 4, 4)
    assert features.matrix("block2").shape == (1, 48)
    assert features.matrix("block2", pooling="tokens", token_grid=(2, 2, 2)).shape == (8, 48)


def test_forward_features_bad_pooling(small_models, volume):
    """Unknown pooling modes are config errors"""
    features = forward_features(small_models["cnn"], volume, taps=["down2"])
    assert len(features) == 1
    with pytest.raises(ConfigValueError):
        features.matrix("down2", pooling="max")
    with pytest.raises(KeyError):
        features.matrix("down3")


def test_forward_features_unknown_tap(small_models, volume):
    """Taps must name a layer of the model"""
    with pytest.raises(UnknownTapError) as excinfo:
        forward_features(small_models["vit"], volume, taps=["block9"])
    assert excinfo.value.tap == "block9"


def test_freeze_layers():
    """Freezing a layer freezes everything upstream of it"""
    model = build_model(small_config("vit"))
    trainable = count_parameters(model, trainable_only=True)
    frozen = freeze_layers(model, ["block1"])
    assert frozen == ["embed", "block1"]
    assert not any(p.requires_grad for p in model.blocks[0].parameters())
    assert all(p.requires_grad for p in model.blocks[1].parameters())
    assert not model.pos_embed.requires_grad
    assert count_parameters(model, trainable_only=True) < trainable
    assert freeze_layers(model, []) == []


def test_freeze_unknown_layer():
    """Unknown layer names are rejected"""
    model = build_model(small_config("cnn"))
    with pytest.raises(UnknownTapError):
        freeze_layers(model, ["up1"])


def test_count_parameters_scope(small_models):
    """The segmentation scope leaves out the pretext heads"""
    model = small_models["swin"]
    heads = sum(p.numel() for p in model.patch_head.parameters())
    assert count_parameters(model, "segmentation") <= count_parameters(model) - heads
    with pytest.raises(ConfigValueError):
        count_parameters(model, "encoder")


def test_paper_vit_tokens():
    """The full-scale ViT sees 4096 tokens of width 768"""
    config = preset("vit", "paper")
    grid = tuple(s // p for s, p in zip(config.input_shape, config.patch_size))
    assert int(np.prod(grid)) == 4096
    assert config.embed_dim == 768


@pytest.mark.slow
@pytest.mark.parametrize("arch", ["vit", "swin", "cnn"])
def test_paper_parameter_counts(arch):
    """Full-scale networks are within 15% of the reference sizes"""
    model = build_model(preset(arch, "paper"))
    count = count_parameters(model, "segmentation")
    assert abs(count - REFERENCE_PARAMETERS[arch]) <= 0.15 * REFERENCE_PARAMETERS[arch]
    if arch == "swin":
        assert len(model.tap_modules()) == 14
    if arch == "vit":
        assert model.token_grid == (16, 16, 16)
