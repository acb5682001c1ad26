"""Hierarchical shifted-window transformer encoder with a convolutional skip decoder"""

from collections import OrderedDict
import itertools

from einops import rearrange
from timm.layers import DropPath, trunc_normal_
import torch
from torch import nn
import torch.nn.functional as F

from . import ConfigValueError
from .network import ConvDecoder, ModelConfig, SegmentationModel, init_transformer_weights


def window_partition(x, window):
    """(B, D, H, W, C) -> (B, windows, tokens per window, C)"""
    return rearrange(
        x,
        "b (d p1) (h p2) (w p3) c -> b (d h w) (p1 p2 p3) c",
        p1=window[0],
        p2=window[1],
        p3=window[2],
    )


def window_reverse(windows, window, resolution):
    depth, height, width = (r // w for r, w in zip(resolution, window))
    return rearrange(
        windows,
        "b (d h w) (p1 p2 p3) c -> b (d p1) (h p2) (w p3) c",
        d=depth,
        h=height,
        w=width,
        p1=window[0],
        p2=window[1],
        p3=window[2],
    )


def relative_position_index(window):
    coords = torch.stack(torch.meshgrid([torch.arange(w) for w in window], indexing="ij"))
    coords = coords.flatten(1)
    relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    relative += torch.tensor([w - 1 for w in window])
    relative[:, :, 0] *= (2 * window[1] - 1) * (2 * window[2] - 1)
    relative[:, :, 1] *= 2 * window[2] - 1
    return relative.sum(-1)


def shifted_window_mask(resolution, window, shift):
    """Additive mask keeping attention inside each region of a cyclically shifted grid"""
    regions = torch.zeros((1, *resolution, 1))
    slices = [
        (slice(0, -w), slice(-w, -s), slice(-s, None)) for w, s in zip(window, shift)
    ]
    for count, (sd, sh, sw) in enumerate(itertools.product(*slices)):
        regions[:, sd, sh, sw, :] = count
    ids = window_partition(regions, window).squeeze(0).squeeze(-1)
    mask = ids.unsqueeze(1) - ids.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    """Window self attention with a learnt relative position bias"""

    def __init__(self, dim, window, num_heads):
        super().__init__()
        self.window = window
        self.num_heads = num_heads
        size = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1)
        self.relative_position_bias_table = nn.Parameter(torch.zeros(size, num_heads))
        self.register_buffer(
            "relative_position_index", relative_position_index(window), persistent=False
        )
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, x, mask=None):
        """x: (B, windows, N, C); mask: (windows, N, N) or None"""
        n_tokens = x.shape[2]
        q, k, v = rearrange(
            self.qkv(x), "b nw n (three h d) -> three b nw h n d", three=3, h=self.num_heads
        )
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        bias = rearrange(bias, "(n m) h -> h n m", n=n_tokens)
        if mask is not None:
            bias = bias.unsqueeze(0) + mask.unsqueeze(1)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias.to(q.dtype))
        return self.proj(rearrange(out, "b nw h n d -> b nw n (h d)"))


class SwinBlock(nn.Module):
    """Swin block on (B, D, H, W, C) features"""

    # pylint: disable-msg=too-many-arguments

    def __init__(self, dim, resolution, num_heads, window, shift, mlp_ratio, drop_path=0.0):
        super().__init__()
        self.resolution = tuple(resolution)
        self.window = tuple(min(w, r) for w, r in zip(window, resolution))
        self.shift = tuple(
            0 if r <= w else s for w, r, s in zip(window, resolution, shift)
        )
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, self.window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath(drop_path) if drop_path > 0 else nn.Identity()
        mask = None
        if any(self.shift):
            mask = shifted_window_mask(self.resolution, self.window, self.shift)
        self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, x):
        shortcut = x
        x = self.norm1(x)
        if any(self.shift):
            x = torch.roll(x, shifts=tuple(-s for s in self.shift), dims=(1, 2, 3))
        windows = self.attn(window_partition(x, self.window), self.attn_mask)
        x = window_reverse(windows, self.window, self.resolution)
        if any(self.shift):
            x = torch.roll(x, shifts=self.shift, dims=(1, 2, 3))
        x = shortcut + self.drop_path(x)
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchMerging(nn.Module):
    """Concatenate 2x2x2 neighbours and project 8C -> 2C"""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x = rearrange(x, "b (d p1) (h p2) (w p3) c -> b d h w (p1 p2 p3 c)", p1=2, p2=2, p3=2)
        return self.reduction(self.norm(x))


class NetworkSwin(SegmentationModel):
    """Swin encoder; every stage output except the last feeds the decoder"""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        if config.patch_size != (2, 2, 2):
            raise ConfigValueError("patch_size", config.patch_size, "swin decoder expects 2")
        dims = config.stage_dims
        self.patch_embed = nn.Conv3d(
            config.in_channels, dims[0], config.patch_size, stride=config.patch_size
        )
        self.patch_norm = nn.LayerNorm(dims[0])
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dims[0]))

        rates = iter(torch.linspace(0, config.drop_path_rate, sum(config.depths)).tolist())
        shift = tuple(w // 2 for w in config.window_size)
        resolution = self.embed_grid
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for stage, (depth, heads) in enumerate(zip(config.depths, config.num_heads)):
            self.stages.append(
                nn.ModuleList(
                    SwinBlock(
                        dims[stage],
                        resolution,
                        heads,
                        config.window_size,
                        shift if index % 2 else (0, 0, 0),
                        config.mlp_ratio,
                        next(rates),
                    )
                    for index in range(depth)
                )
            )
            if stage < len(config.depths) - 1:
                self.merges.append(PatchMerging(dims[stage]))
                resolution = tuple(r // 2 for r in resolution)
        self.norm = nn.LayerNorm(dims[-1])

        self.apply(init_transformer_weights)
        trunc_normal_(self.mask_token, std=0.02)
        skip_channels = tuple(reversed(dims[:-1])) + (config.in_channels,)
        self.build_heads(
            ConvDecoder(
                dims[-1], skip_channels, (1,) * len(skip_channels), config.decoder_channels
            )
        )

    @property
    def bottleneck_channels(self):
        return self.config.stage_dims[-1]

    def encode(self, x, token_mask=None):
        depth, height, width = self.embed_grid
        features = rearrange(self.patch_embed(x), "b c d h w -> b (d h w) c")
        features = self._apply_mask_token(self.patch_norm(features), token_mask)
        features = rearrange(features, "b (d h w) c -> b d h w c", d=depth, h=height, w=width)
        skips = [x]
        for stage, blocks in enumerate(self.stages):
            for block in blocks:
                features = block(features)
            if stage < len(self.merges):
                skips.insert(0, rearrange(features, "b d h w c -> b c d h w"))
                features = self.merges[stage](features)
        bottleneck = rearrange(self.norm(features), "b d h w c -> b c d h w")
        return self._outputs(bottleneck, skips)

    def tap_modules(self):
        blocks = [block for stage in self.stages for block in stage]
        return OrderedDict((f"block{index + 1}", block) for index, block in enumerate(blocks))

    def tap_map(self, name, output):
        return rearrange(output, "b d h w c -> b c d h w")

    def encoder_sequence(self):
        sequence = [
            ("embed", list(self.patch_embed.parameters()) + list(self.patch_norm.parameters()))
        ]
        count = 0
        for stage, blocks in enumerate(self.stages):
            for block in blocks:
                count += 1
                sequence.append((f"block{count}", list(block.parameters())))
            if stage < len(self.merges):
                sequence.append((f"merge{stage + 1}", list(self.merges[stage].parameters())))
        return sequence
