"""Segmentation backbones: shared config, decoder, heads, taps and the model factory

Architectures live in ``network_<arch>`` plugin modules and are resolved by name.
"""

from collections import OrderedDict
from dataclasses import dataclass
import importlib
import logging
from typing import Dict, List, Optional, Tuple

from einops import rearrange
import numpy as np
from timm.layers import trunc_normal_
import torch
from torch import nn
import torch.nn.functional as F

from . import ConfigValueError, InputException, NumericalException, UnknownTapError
from .models import ModelBase, Volume3D

ARCHITECTURES = {"vit": "NetworkViT", "swin": "NetworkSwin", "cnn": "NetworkCNN"}
SCALES = ("paper", "desk")

# Parameters outside the segmentation path
HEADS = ("recon_head", "patch_head", "global_head", "contrast_head", "mask_token")


@dataclass
class ModelConfig(ModelBase):
    """Architecture hyperparameters

    For ``cnn`` the embed_dim is the width of the first stage.
    """

    # pylint: disable-msg=too-many-instance-attributes

    arch: str
    scale: str = "desk"
    input_shape: tuple = (64, 64, 64)
    patch_size: tuple = (8, 8, 8)
    embed_dim: int = 192
    depths: tuple = (6,)
    num_heads: tuple = (4,)
    window_size: tuple = (4, 4, 4)
    decoder_channels: tuple = (48, 24, 12, 6)
    drop_path_rate: float = 0.0
    proto_dim: int = 512
    mlp_ratio: float = 1.0
    head_hidden_dim: int = 256
    head_bottleneck_dim: int = 128
    contrast_dim: int = 128
    in_channels: int = 1
    num_classes: int = 2

    def __post_init__(self):
        for name in ("input_shape", "patch_size", "window_size"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 3 or min(value) <= 0:
                raise ConfigValueError(name, value, "need three positive integers")
            setattr(self, name, value)
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.drop_path_rate = float(self.drop_path_rate)
        self.mlp_ratio = float(self.mlp_ratio)
        self.validate()

    def validate(self):
        """:raises ConfigValueError: On any inconsistent hyperparameter"""
        if self.arch not in ARCHITECTURES:
            raise ConfigValueError("arch", self.arch, f"must be one of {sorted(ARCHITECTURES)}")
        if self.scale not in SCALES:
            raise ConfigValueError("scale", self.scale, f"must be one of {SCALES}")
        if not 0 <= self.drop_path_rate < 1:
            raise ConfigValueError("drop_path_rate", self.drop_path_rate, "must be in [0, 1)")
        factor = self.downsampling
        if any(size % f for size, f in zip(self.input_shape, factor)):
            raise ConfigValueError(
                "input_shape", self.input_shape, f"must be divisible by {factor} for {self.arch}"
            )
        if self.arch in ("vit", "swin"):
            if len(self.depths) != len(self.num_heads):
                raise ConfigValueError("num_heads", self.num_heads, "need one entry per stage")
            dims = self.stage_dims
            if any(dim % heads for dim, heads in zip(dims, self.num_heads)):
                raise ConfigValueError("num_heads", self.num_heads, f"must divide widths {dims}")
        if len(self.decoder_channels) != self.decoder_levels:
            raise ConfigValueError(
                "decoder_channels",
                self.decoder_channels,
                f"{self.arch} needs {self.decoder_levels} entries",
            )

    @property
    def downsampling(self) -> Tuple[int, int, int]:
        """Total stride between the input and the deepest feature grid"""
        if self.arch == "vit":
            return self.patch_size
        if self.arch == "swin":
            return tuple(p * 2 ** (len(self.depths) - 1) for p in self.patch_size)
        return (8, 8, 8)

    @property
    def stage_dims(self) -> Tuple[int, ...]:
        if self.arch == "swin":
            return tuple(self.embed_dim * 2**stage for stage in range(len(self.depths)))
        return (self.embed_dim,) * len(self.depths)

    @property
    def decoder_levels(self) -> int:
        if self.arch == "vit":
            return 4
        if self.arch == "swin":
            return len(self.depths) + 1
        return 3


PRESETS: Dict[Tuple[str, str], Dict] = {
    ("vit", "paper"): {
        "input_shape": (128, 128, 128),
        "patch_size": (8, 8, 8),
        "embed_dim": 768,
        "depths": (12,),
        "num_heads": (8,),
        "mlp_ratio": 1.0,
        "decoder_channels": (96, 48, 24, 12),
        "proto_dim": 1024,
        "head_hidden_dim": 1024,
        "head_bottleneck_dim": 256,
    },
    ("vit", "desk"): {
        "input_shape": (64, 64, 64),
        "patch_size": (8, 8, 8),
        "embed_dim": 192,
        "depths": (6,),
        "num_heads": (4,),
        "mlp_ratio": 1.0,
        "decoder_channels": (48, 24, 12, 6),
    },
    ("swin", "paper"): {
        "input_shape": (128, 128, 128),
        "patch_size": (2, 2, 2),
        "embed_dim": 48,
        "depths": (2, 2, 8, 2),
        "num_heads": (4, 4, 8, 16),
        "window_size": (4, 4, 4),
        "mlp_ratio": 4.0,
        "decoder_channels": (768, 384, 192, 96, 48),
        "proto_dim": 1024,
        "head_hidden_dim": 1024,
        "head_bottleneck_dim": 256,
    },
    ("swin", "desk"): {
        "input_shape": (64, 64, 64),
        "patch_size": (2, 2, 2),
        "embed_dim": 24,
        "depths": (2, 2, 4, 2),
        "num_heads": (2, 2, 4, 8),
        "window_size": (4, 4, 4),
        "mlp_ratio": 4.0,
        "decoder_channels": (192, 96, 48, 24, 12),
    },
    ("cnn", "paper"): {
        "input_shape": (128, 128, 128),
        "embed_dim": 32,
        "depths": (),
        "num_heads": (),
        "decoder_channels": (256, 128, 64),
        "proto_dim": 1024,
        "head_hidden_dim": 1024,
        "head_bottleneck_dim": 256,
    },
    ("cnn", "desk"): {
        "input_shape": (64, 64, 64),
        "embed_dim": 8,
        "depths": (),
        "num_heads": (),
        "decoder_channels": (64, 32, 16),
    },
}


def preset(arch: str, scale: str = "desk", **overrides) -> ModelConfig:
    """Architecture preset with optional field overrides"""
    if (arch, scale) not in PRESETS:
        raise ConfigValueError("model", f"{arch}@{scale}", "no such preset")
    values = dict(PRESETS[(arch, scale)], arch=arch, scale=scale)
    values.update(overrides)
    return ModelConfig.from_dict(values)


class ResBlock(nn.Module):
    """Two 3x3x3 conv/instance-norm/leaky-relu units with a residual connection"""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1, bias=False)
        self.norm1 = nn.InstanceNorm3d(out_channels, affine=True)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = nn.InstanceNorm3d(out_channels, affine=True)
        self.act = nn.LeakyReLU(0.01)
        self.shortcut = None
        if in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, 1, bias=False),
                nn.InstanceNorm3d(out_channels, affine=True),
            )

    def forward(self, x):
        residual = x if self.shortcut is None else self.shortcut(x)
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + residual)


class UpBlock(nn.Module):
    """Transposed-conv upsampling, concatenation with a skip, then a ResBlock"""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, out_channels, 2, stride=2, bias=False)
        self.res = ResBlock(2 * out_channels, out_channels)

    def forward(self, x, skip):
        return self.res(torch.cat([self.up(x), skip], dim=1))


class ConvDecoder(nn.Module):
    """Convolutional decoder with processed skip connections from the encoder

    Skips are ordered deep to shallow; a skip whose scale is above one lives on a
    coarser grid and is interpolated up after processing.
    """

    def __init__(self, bottleneck_channels, skip_channels, skip_scales, decoder_channels):
        super().__init__()
        if len(skip_channels) != len(decoder_channels) - 1:
            raise ConfigValueError(
                "decoder_channels", decoder_channels, f"need {len(skip_channels) + 1} entries"
            )
        self.skip_scales = tuple(skip_scales)
        self.bottleneck = ResBlock(bottleneck_channels, decoder_channels[0])
        self.skip_blocks = nn.ModuleList(
            ResBlock(channels, out) for channels, out in zip(skip_channels, decoder_channels[1:])
        )
        self.up_blocks = nn.ModuleList(
            UpBlock(cin, cout) for cin, cout in zip(decoder_channels[:-1], decoder_channels[1:])
        )
        self.out_channels = decoder_channels[-1]

    def forward(self, enc: "EncoderOutput"):
        x = self.bottleneck(enc.bottleneck)
        for skip, scale, skip_block, up_block in zip(
            enc.skips, self.skip_scales, self.skip_blocks, self.up_blocks
        ):
            skip = skip_block(skip)
            if scale > 1:
                skip = F.interpolate(
                    skip, scale_factor=scale, mode="trilinear", align_corners=False
                )
            x = up_block(x, skip)
        return x


class DistillHead(nn.Module):
    """MLP projecting features onto prototype logits"""

    def __init__(self, in_dim, hidden_dim, bottleneck_dim, proto_dim):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.last_layer = nn.Linear(bottleneck_dim, proto_dim, bias=False)

    def forward(self, x):
        return self.last_layer(F.normalize(self.mlp(x), dim=-1))


@dataclass
class EncoderOutput:
    """Encoder results consumed by the decoder and the pretext heads"""

    bottleneck: torch.Tensor
    skips: List[torch.Tensor]
    tokens: torch.Tensor
    pooled: torch.Tensor


@dataclass
class PretrainOutput:
    recon: Optional[torch.Tensor] = None
    patch_logits: Optional[torch.Tensor] = None
    global_logits: Optional[torch.Tensor] = None
    contrast: Optional[torch.Tensor] = None


class SegmentationModel(nn.Module):
    """Encoder/decoder segmentation network with distillation and reconstruction heads

    Subclasses build the encoder in ``__init__`` and then call ``build_heads``.
    """

    skip_scales: Tuple[int, ...] = ()

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    @property
    def bottleneck_channels(self) -> int:
        raise NotImplementedError

    @property
    def embed_grid(self) -> Tuple[int, int, int]:
        """Grid on which masked tokens are replaced by the mask token"""
        return tuple(s // p for s, p in zip(self.config.input_shape, self.config.patch_size))

    @property
    def token_grid(self) -> Tuple[int, int, int]:
        """Grid of the tokens fed to the distillation heads"""
        return tuple(s // f for s, f in zip(self.config.input_shape, self.config.downsampling))

    def build_heads(self, decoder: nn.Module):
        config = self.config
        self.decoder = decoder
        self.seg_head = nn.Conv3d(decoder.out_channels, config.num_classes, 1)
        self.recon_head = nn.Conv3d(decoder.out_channels, config.in_channels, 1)
        head_args = (
            self.bottleneck_channels,
            config.head_hidden_dim,
            config.head_bottleneck_dim,
            config.proto_dim,
        )
        self.patch_head = DistillHead(*head_args)
        self.global_head = DistillHead(*head_args)
        self.contrast_head = nn.Sequential(
            nn.Linear(self.bottleneck_channels, config.head_hidden_dim),
            nn.ReLU(),
            nn.Linear(config.head_hidden_dim, config.contrast_dim),
        )

    def encode(self, x: torch.Tensor, token_mask: Optional[torch.Tensor] = None) -> EncoderOutput:
        raise NotImplementedError

    def tap_modules(self) -> "OrderedDict[str, nn.Module]":
        """Tappable layers in forward order"""
        raise NotImplementedError

    def tap_map(self, name: str, output: torch.Tensor) -> torch.Tensor:
        """Tap output as a (B, C, D, H, W) feature map"""
        raise NotImplementedError

    def encoder_sequence(self) -> List[Tuple[str, List[nn.Parameter]]]:
        """Encoder parameter groups in forward order, used for freezing"""
        raise NotImplementedError

    def _outputs(self, bottleneck: torch.Tensor, skips) -> EncoderOutput:
        tokens = rearrange(bottleneck, "b c d h w -> b (d h w) c")
        return EncoderOutput(bottleneck, list(skips), tokens, tokens.mean(dim=1))

    def _check_input(self, x: torch.Tensor):
        if tuple(x.shape[2:]) != self.config.input_shape:
            raise InputException(
                f"Input grid {tuple(x.shape[2:])} doesn't match "
                + f"model input {self.config.input_shape}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Segmentation logits (B, num_classes, D, H, W)"""
        return self.seg_head(self.decoder(self.encode(x)))

    def forward_pretrain(
        self,
        x: torch.Tensor,
        token_mask: Optional[torch.Tensor] = None,
        outputs=("recon", "patch", "global", "contrast"),
    ) -> PretrainOutput:
        enc = self.encode(x, token_mask)
        result = PretrainOutput()
        if "recon" in outputs:
            result.recon = self.recon_head(self.decoder(enc))
        if "patch" in outputs:
            result.patch_logits = self.patch_head(enc.tokens)
        if "global" in outputs:
            result.global_logits = self.global_head(enc.pooled)
        if "contrast" in outputs:
            result.contrast = self.contrast_head(enc.pooled)
        return result

    def _apply_mask_token(self, tokens: torch.Tensor, token_mask: Optional[torch.Tensor]):
        """Replace masked (B, N, C) tokens by the learnt mask token"""
        if token_mask is None:
            return tokens
        token_mask = token_mask.reshape(tokens.shape[0], -1, 1).to(tokens.device)
        return torch.where(token_mask, self.mask_token.to(tokens.dtype).expand_as(tokens), tokens)


def init_transformer_weights(module: nn.Module):
    """Truncated-normal linear weights, unit layer norms"""
    if isinstance(module, nn.Linear):
        trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(config: ModelConfig, seed: int = 0) -> SegmentationModel:
    """Instantiate the architecture named by config.arch with seeded initialisation"""
    config.validate()
    module = importlib.import_module(f"ctpretrain.network_{config.arch}")
    # pylint: disable-msg=invalid-name
    Network = getattr(module, ARCHITECTURES[config.arch])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Network(config)
    logging.info(
        "Built %s@%s: %d parameters (%d segmentation)",
        config.arch,
        config.scale,
        count_parameters(model),
        count_parameters(model, scope="segmentation"),
    )
    return model


def count_parameters(model: nn.Module, scope: str = "all", trainable_only: bool = False) -> int:
    """Exact parameter count

    ``scope="segmentation"`` leaves out the pretext heads and the mask token.
    """
    if scope not in ("all", "segmentation"):
        raise ConfigValueError("scope", scope, "must be 'all' or 'segmentation'")
    total = 0
    for name, param in model.named_parameters():
        if scope == "segmentation" and name.split(".")[0] in HEADS:
            continue
        if trainable_only and not param.requires_grad:
            continue
        total += param.numel()
    return total


def as_batch(vol) -> torch.Tensor:
    """Volume3D, 3D array or tensor as a (B, 1, D, H, W) float tensor"""
    if isinstance(vol, Volume3D):
        vol = vol.data
    tensor = torch.as_tensor(np.asarray(vol) if not torch.is_tensor(vol) else vol).float()
    while tensor.dim() < 5:
        tensor = tensor.unsqueeze(0)
    return tensor


def _locate_non_finite(model: SegmentationModel, x: torch.Tensor) -> str:
    """Name of the first module (in execution order) emitting a non-finite value"""
    offenders = []

    def hook(name):
        def _record(_module, _inputs, output):
            if torch.is_tensor(output) and not torch.isfinite(output).all():
                offenders.append(name)

        return _record

    handles = [
        module.register_forward_hook(hook(name))
        for name, module in model.named_modules()
        if name and not list(module.children())
    ]
    try:
        with torch.no_grad():
            model(x)
    finally:
        for handle in handles:
            handle.remove()
    return offenders[0] if offenders else "input"


def forward_segment(model: SegmentationModel, vol) -> torch.Tensor:
    """Segmentation logits for a volume at the model's input resolution

    :raises NumericalException: If the logits contain NaN or Inf, naming the first offending layer
    """
    x = as_batch(vol)
    model._check_input(x)  # pylint: disable-msg=protected-access
    with torch.no_grad():
        logits = model(x)
    if not torch.isfinite(logits).all():
        where = "input" if not torch.isfinite(x).all() else _locate_non_finite(model, x)
        raise NumericalException(where, f"Non-finite segmentation logits, first seen in '{where}'")
    return logits


@dataclass
class FeatureEntry:
    name: str
    output: torch.Tensor
    feature_map: torch.Tensor

    @property
    def shape(self):
        """Per-sample shape of the raw tap output"""
        return tuple(self.output.shape[1:])


@dataclass
class EncoderFeatures:
    """Tapped activations, shallow to deep"""

    entries: List[FeatureEntry]

    def __len__(self):
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [entry.name for entry in self.entries]

    def __getitem__(self, name) -> FeatureEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def matrix(self, name, pooling="mean", token_grid=(4, 4, 4)) -> np.ndarray:
        """Activations as (samples, features)

        ``mean`` pools every sample to one row; ``tokens`` pools each sample onto a
        fixed token grid and keeps one row per token.
        """
        feature_map = self[name].feature_map.double()
        if pooling == "mean":
            return feature_map.mean(dim=(2, 3, 4)).cpu().numpy()
        if pooling == "tokens":
            pooled = F.adaptive_avg_pool3d(feature_map, token_grid)
            return rearrange(pooled, "b c d h w -> (b d h w) c").cpu().numpy()
        raise ConfigValueError("pooling", pooling, "must be 'mean' or 'tokens'")


def forward_features(model: SegmentationModel, vol, taps=None) -> EncoderFeatures:
    """Capture tap outputs with forward hooks during a normal forward pass

    :raises UnknownTapError: If a tap isn't a layer of the model
    """
    modules = model.tap_modules()
    taps = list(modules) if taps is None else list(taps)
    for tap in taps:
        if tap not in modules:
            raise UnknownTapError(tap, modules)

    captured = {}

    def hook(name):
        def _capture(_module, _inputs, output):
            captured[name] = output.detach()

        return _capture

    handles = [modules[name].register_forward_hook(hook(name)) for name in taps]
    try:
        with torch.no_grad():
            model(as_batch(vol))
    finally:
        for handle in handles:
            handle.remove()
    return EncoderFeatures(
        [FeatureEntry(name, captured[name], model.tap_map(name, captured[name])) for name in taps]
    )


def freeze_layers(model: SegmentationModel, names) -> List[str]:
    """Freeze the named encoder layers and everything upstream of them

    :returns: names of the frozen parameter groups
    """
    sequence = model.encoder_sequence()
    order = [name for name, _ in sequence]
    for name in names:
        if name not in order:
            raise UnknownTapError(name, order)
    if not names:
        return []
    last = max(order.index(name) for name in names)
    for _, params in sequence[: last + 1]:
        for param in params:
            param.requires_grad_(False)
    frozen = order[: last + 1]
    logging.info("Froze %d encoder layers: %s", len(frozen), ", ".join(frozen))
    return frozen

