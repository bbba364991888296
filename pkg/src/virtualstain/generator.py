"""Stain translator: the FAL generator, the baseline U-Net and the reverse
generator behind one routing object."""

import numpy as np
import torch
import torch.nn as nn

from .networks import (
    N_LEVELS,
    FALGenerator,
    GeneratorConfig,
    UNetGenerator,
    init_weights,
    level_channels,
)


def to_tensor(img, dtype=torch.float32):
    """(H, W, C) array, (N, H, W, C) stack or list of images -> NCHW tensor."""
    if isinstance(img, (list, tuple)):
        arr = np.stack([np.asarray(i) for i in img])
    else:
        arr = np.asarray(img)
        if arr.ndim == 3:
            arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t):
    """NCHW tensor -> (H, W, C) array (first batch item) or stack of them."""
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return arr[0] if arr.shape[0] == 1 else arr


def check_pyramid(levels, base_channels, image_size):
    """Raise ``ValueError`` unless ``levels`` follows the halving/doubling law."""
    if len(levels) != N_LEVELS:
        raise ValueError(f"expected {N_LEVELS} levels, got {len(levels)}")
    for k, (x, c) in enumerate(zip(levels, level_channels(base_channels))):
        s = image_size // 2**k
        if tuple(x.shape[1:]) != (c, s, s):
            raise ValueError(f"level {k + 1} has shape {tuple(x.shape[1:])}, expected {(c, s, s)}")


class StainTranslator(nn.Module):
    """Forward generator (FAL or baseline, per config) plus the reverse
    generator used by the cycle term.

    Sub-networks are named as in the checkpoint layout: ``target_encoder``,
    ``source_encoder``, ``approximator``, ``decoder`` (FAL only),
    ``baseline_generator`` (FAL disabled) and ``reverse_generator``.
    """

    def __init__(self, config=None, norm=True):
        super().__init__()
        self.config = config or GeneratorConfig()
        ch = self.config.base_channels
        gen = torch.Generator().manual_seed(self.config.seed)
        if self.config.fal_enabled:
            self.fal = FALGenerator(ch, norm=norm)
            init_weights(self.fal, gen)
        else:
            self.baseline = UNetGenerator(ch, norm=norm)
            init_weights(self.baseline, gen)
        self.reverse = UNetGenerator(ch, norm=norm)
        init_weights(self.reverse, gen)

    @property
    def subnetworks(self):
        if self.config.fal_enabled:
            nets = {
                "target_encoder": self.fal.target_encoder,
                "source_encoder": self.fal.source_encoder,
                "approximator": self.fal.approximator,
                "decoder": self.fal.decoder,
            }
        else:
            nets = {"baseline_generator": self.baseline}
        nets["reverse_generator"] = self.reverse
        return nets

    def _check_input(self, x):
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (s, s):
            raise ValueError(f"expected (N, 3, {s}, {s}) input, got {tuple(x.shape)}")

    def _require_fal(self):
        if not self.config.fal_enabled:
            raise RuntimeError("FAL is disabled for this translator")

    def encode_target(self, trg):
        self._require_fal()
        self._check_input(trg)
        return self.fal.target_encoder(trg)

    def encode_source(self, src):
        self._require_fal()
        self._check_input(src)
        return self.fal.source_encoder(src)

    def approximate_features(self, levels):
        self._require_fal()
        return self.fal.approximator(levels)

    def decode(self, levels):
        self._require_fal()
        return self.fal.decoder(levels)

    def reconstruct(self, trg):
        return self.decode(self.encode_target(trg))

    def baseline_generate(self, src):
        if self.config.fal_enabled:
            raise RuntimeError("baseline generator is only built when FAL is disabled")
        self._check_input(src)
        return self.baseline(src)

    def translate(self, src):
        """Source -> generated target. Never touches the target encoder."""
        if not self.config.fal_enabled:
            return self.baseline_generate(src)
        return self.decode(self.approximate_features(self.encode_source(src)))

    def reverse_generate(self, gen):
        self._check_input(gen)
        return self.reverse(gen)

    def forward(self, src):
        return self.translate(src)

    def generator_parameters(self):
        """Parameters trained in the translation phase."""
        if self.config.fal_enabled:
            fwd = list(self.fal.source_encoder.parameters()) + list(self.fal.approximator.parameters())
        else:
            fwd = list(self.baseline.parameters())
        return fwd + list(self.reverse.parameters())

    def autoencoder_parameters(self):
        self._require_fal()
        return list(self.fal.target_encoder.parameters()) + list(self.fal.decoder.parameters())
