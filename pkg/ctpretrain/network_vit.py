"""Plain 3D vision transformer encoder with a convolutional skip decoder"""

from collections import OrderedDict

from einops import rearrange
from timm.layers import DropPath, trunc_normal_
import torch
from torch import nn
import torch.nn.functional as F

from . import ConfigValueError
from .network import ConvDecoder, ModelConfig, SegmentationModel, init_transformer_weights


class Attention(nn.Module):
    """Multi-head self attention over all tokens"""

    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = rearrange(
            self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.num_heads
        )
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(rearrange(out, "b h n d -> b n (h d)"))


class Block(nn.Module):
    """Pre-norm transformer block"""

    def __init__(self, dim, num_heads, mlp_ratio, drop_path=0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath(drop_path) if drop_path > 0 else nn.Identity()

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class NetworkViT(SegmentationModel):
    """ViT encoder; outputs of the blocks at one and two thirds of the depth feed the decoder"""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        if config.patch_size != (8, 8, 8):
            raise ConfigValueError("patch_size", config.patch_size, "vit decoder expects 8")
        dim, depth = config.embed_dim, config.depths[0]
        if depth < 3:
            raise ConfigValueError("depths", config.depths, "vit needs at least 3 blocks")
        n_tokens = self.embed_grid[0] * self.embed_grid[1] * self.embed_grid[2]

        self.patch_embed = nn.Conv3d(
            config.in_channels, dim, config.patch_size, stride=config.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, dim))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        rates = torch.linspace(0, config.drop_path_rate, depth).tolist()
        self.blocks = nn.ModuleList(
            Block(dim, config.num_heads[0], config.mlp_ratio, rate) for rate in rates
        )
        self.norm = nn.LayerNorm(dim)
        self.skip_indices = (2 * depth // 3 - 1, depth // 3 - 1)

        self.apply(init_transformer_weights)
        trunc_normal_(self.pos_embed, std=0.02)
        trunc_normal_(self.mask_token, std=0.02)
        self.build_heads(
            ConvDecoder(dim, (dim, dim, config.in_channels), (2, 4, 1), config.decoder_channels)
        )

    @property
    def bottleneck_channels(self):
        return self.config.embed_dim

    def _to_map(self, tokens):
        depth, height, width = self.embed_grid
        return rearrange(tokens, "b (d h w) c -> b c d h w", d=depth, h=height, w=width)

    def encode(self, x, token_mask=None):
        tokens = rearrange(self.patch_embed(x), "b c d h w -> b (d h w) c")
        tokens = self._apply_mask_token(tokens, token_mask) + self.pos_embed
        hidden = {}
        for index, block in enumerate(self.blocks):
            tokens = block(tokens)
            if index in self.skip_indices:
                hidden[index] = tokens
        bottleneck = self._to_map(self.norm(tokens))
        skips = [self._to_map(hidden[index]) for index in self.skip_indices] + [x]
        return self._outputs(bottleneck, skips)

    def tap_modules(self):
        return OrderedDict(
            (f"block{index + 1}", block) for index, block in enumerate(self.blocks)
        )

    def tap_map(self, name, output):
        return self._to_map(output)

    def encoder_sequence(self):
        sequence = [("embed", list(self.patch_embed.parameters()) + [self.pos_embed])]
        sequence += [(name, list(block.parameters())) for name, block in self.tap_modules().items()]
        return sequence
