"""Network building blocks.

Everything here is a plain ``torch.nn.Module`` working on NCHW tensors in
model space ([-1, 1]). The translation-level API (pyramids, ``translate``,
routing between FAL and the baseline) lives in :mod:`virtualstain.generator`.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

N_LEVELS = 5


def init_weights(module, generator=None):
    """Draw conv weights from N(0, 0.02) and zero their biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class DoubleConv(nn.Module):
    """[conv3x3 -> instance norm -> ReLU] x 2.

    With ``stride=2`` the first convolution halves the resolution.
    """

    def __init__(self, in_ch, out_ch, stride=1, norm=True):
        super().__init__()
        layers = [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)]
        if norm:
            layers.append(nn.InstanceNorm2d(out_ch))
        layers.append(nn.ReLU())
        layers.append(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        if norm:
            layers.append(nn.InstanceNorm2d(out_ch))
        layers.append(nn.ReLU())
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


def level_channels(base_channels):
    return [base_channels * 2 ** k for k in range(N_LEVELS)]


class Encoder(nn.Module):
    """Five Double Conv levels; level k has ``base * 2**(k-1)`` channels at
    ``1 / 2**(k-1)`` resolution."""

    def __init__(self, base_channels, in_ch=3, norm=True):
        super().__init__()
        chans = level_channels(base_channels)
        blocks = [DoubleConv(in_ch, chans[0], norm=norm)]
        for k in range(1, N_LEVELS):
            blocks.append(DoubleConv(chans[k - 1], chans[k], stride=2, norm=norm))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return levels


class Approximator(nn.Module):
    """Per-level feature transform; every level, including the deepest, owns
    an unshared Double Conv."""

    def __init__(self, base_channels, norm=True):
        super().__init__()
        self.blocks = nn.ModuleList(
            [DoubleConv(c, c, norm=norm) for c in level_channels(base_channels)]
        )

    def forward(self, levels):
        if len(levels) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} levels, got {len(levels)}")
        return [block(x) for block, x in zip(self.blocks, levels)]


class Decoder(nn.Module):
    """Consumes the deepest level and merges levels 4..1 through
    concatenated skip connections. Output passes through tanh."""

    def __init__(self, base_channels, out_ch=3, norm=True):
        super().__init__()
        chans = level_channels(base_channels)
        self.up_convs = nn.ModuleList()
        self.merges = nn.ModuleList()
        for k in range(N_LEVELS - 2, -1, -1):
            self.up_convs.append(nn.Conv2d(chans[k + 1], chans[k], 3, padding=1))
            self.merges.append(DoubleConv(2 * chans[k], chans[k], norm=norm))
        self.head = nn.Conv2d(chans[0], out_ch, 1)

    def forward(self, levels):
        if len(levels) != N_LEVELS:
            raise ValueError(f"expected {N_LEVELS} levels, got {len(levels)}")
        x = levels[-1]
        for i, (up, merge) in enumerate(zip(self.up_convs, self.merges)):
            skip = levels[N_LEVELS - 2 - i]
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            if x.shape[-2:] != skip.shape[-2:]:
                raise ValueError(
                    f"skip level {N_LEVELS - 1 - i} has spatial size "
                    f"{tuple(skip.shape[-2:])}, decoder expects {tuple(x.shape[-2:])}"
                )
            x = merge(torch.cat([x, skip], dim=1))
        return torch.tanh(self.head(x))


class UNetGenerator(nn.Module):
    """Single-encoder U-Net: the baseline translator and the reverse generator."""

    def __init__(self, base_channels, norm=True):
        super().__init__()
        self.encoder = Encoder(base_channels, norm=norm)
        self.decoder = Decoder(base_channels, norm=norm)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class FALGenerator(nn.Module):
    """Dual-encoder, single-decoder generator.

    The target encoder and decoder form an autoencoder; the source encoder
    plus approximator map source features onto the target feature space so
    the shared decoder can render them.
    """

    def __init__(self, base_channels, norm=True):
        super().__init__()
        self.target_encoder = Encoder(base_channels, norm=norm)
        self.source_encoder = Encoder(base_channels, norm=norm)
        self.approximator = Approximator(base_channels, norm=norm)
        self.decoder = Decoder(base_channels, norm=norm)

    def reconstruct(self, trg):
        return self.decoder(self.target_encoder(trg))

    def forward(self, src):
        return self.decoder(self.approximator(self.source_encoder(src)))


class PatchDiscriminator(nn.Module):
    """Three stride-2 conv blocks and a 1x1 head producing a patch logit map
    at 1/8 of the input resolution."""

    def __init__(self, in_ch=3, base_channels=32):
        super().__init__()
        c = base_channels
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.LeakyReLU(0.2),
        )
        self.head = nn.Conv2d(4 * c, 1, 1)

    def forward(self, x):
        return self.head(self.body(x))


class StyleConstrainer(nn.Module):
    """Binary classifier over a channel-concatenated image pair.

    Returns the probability that the second image shares the first one's
    style distribution.
    """

    def __init__(self, base_channels=32):
        super().__init__()
        self.net = PatchDiscriminator(in_ch=6, base_channels=base_channels)

    def logits(self, trg, other):
        return self.net(torch.cat([trg, other], dim=1)).mean(dim=(1, 2, 3))

    def forward(self, trg, other):
        return torch.sigmoid(self.logits(trg, other))


class PatternClassifier(nn.Module):
    """Four conv-pool blocks, global average pool and a linear head over the
    four HER2 levels."""

    def __init__(self, n_classes=4, widths=(16, 32, 64, 64)):
        super().__init__()
        blocks = []
        in_ch = 3
        for w in widths:
            blocks += [nn.Conv2d(in_ch, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            in_ch = w
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(in_ch, n_classes)

    def logits(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


@dataclass
class GeneratorConfig:
    base_channels: int = 32
    image_size: int = 64
    fal_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 4 or self.base_channels % 2:
            raise ValueError("base_channels must be even and >= 4")
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16")


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
