"""Convolutional encoder/decoder without skip connections"""

from collections import OrderedDict

from torch import nn

from .network import ModelConfig, SegmentationModel


def conv_norm_act(in_channels, out_channels):
    return nn.Sequential(
        nn.Conv3d(in_channels, out_channels, 3, padding=1, bias=False),
        nn.InstanceNorm3d(out_channels, affine=True),
        nn.ReLU(),
    )


class DoubleConv(nn.Sequential):
    def __init__(self, in_channels, mid_channels, out_channels):
        super().__init__(
            conv_norm_act(in_channels, mid_channels), conv_norm_act(mid_channels, out_channels)
        )


class UpStage(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, in_channels, 2, stride=2, bias=False)
        self.conv = DoubleConv(in_channels, out_channels, out_channels)

    def forward(self, x):
        return self.conv(self.up(x))


class PlainDecoder(nn.Module):
    """Upsampling path fed only by the bottleneck"""

    def __init__(self, bottleneck_channels, decoder_channels):
        super().__init__()
        channels = (bottleneck_channels,) + tuple(decoder_channels)
        self.stages = nn.ModuleList(
            UpStage(cin, cout) for cin, cout in zip(channels[:-1], channels[1:])
        )
        self.out_channels = decoder_channels[-1]

    def forward(self, enc):
        x = enc.bottleneck
        for stage in self.stages:
            x = stage(x)
        return x


class NetworkCNN(SegmentationModel):
    """Four-stage encoder with widths w, 2w, 4w, 8w (doubled on exit), three poolings"""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        width = config.embed_dim
        self.pool = nn.MaxPool3d(2)
        self.downs = nn.ModuleList(
            [
                DoubleConv(config.in_channels, width, 2 * width),
                DoubleConv(2 * width, 2 * width, 4 * width),
                DoubleConv(4 * width, 4 * width, 8 * width),
                DoubleConv(8 * width, 8 * width, 16 * width),
            ]
        )
        self.build_heads(PlainDecoder(16 * width, config.decoder_channels))

    @property
    def bottleneck_channels(self):
        return 16 * self.config.embed_dim

    @property
    def embed_grid(self):
        return self.token_grid

    def encode(self, x, token_mask=None):
        for index, down in enumerate(self.downs):
            x = down(self.pool(x) if index else x)
        return self._outputs(x, [])

    def tap_modules(self):
        modules = OrderedDict((f"down{i + 1}", down) for i, down in enumerate(self.downs))
        modules.update(
            (f"up{i + 1}", stage) for i, stage in enumerate(self.decoder.stages)
        )
        return modules

    def tap_map(self, name, output):
        return output

    def encoder_sequence(self):
        return [(f"down{i + 1}", list(down.parameters())) for i, down in enumerate(self.downs)]
