"""Stain vectors and DAB optical density.

Colour deconvolution follows Ruifrok & Johnston with the usual H-E-DAB
optical-density vectors (unit-normalised rows).
"""

import numpy as np
import torch

_RAW = {
    "hematoxylin": [0.65, 0.70, 0.29],
    "eosin": [0.07, 0.99, 0.11],
    "dab": [0.27, 0.57, 0.78],
}
STAIN_VECTORS = {k: np.asarray(v) / np.linalg.norm(v) for k, v in _RAW.items()}
RGB_FROM_HED = np.stack([STAIN_VECTORS[k] for k in ("hematoxylin", "eosin", "dab")])
HED_FROM_RGB = np.linalg.inv(RGB_FROM_HED)
LUMA = np.array([0.299, 0.587, 0.114])
I0 = 255.0


def od_from_intensity(ratio, alpha=1.0):
    """``(-log10(I / I0)) ** alpha`` for a transmitted/incident ratio."""
    return (-np.log10(ratio)) ** alpha


def dab_concentration(img):
    """DAB stain concentration of a metric-space RGB image, clipped at 0."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an RGB (H, W, 3) image, got {img.shape}")
    intensity = np.maximum(img * I0, 1.0)
    od = -np.log10(intensity / I0)
    return np.maximum(od @ HED_FROM_RGB[:, 2], 0.0)


def optical_density(img, alpha=1.0):
    """DAB optical-density map of a metric-space RGB image.

    The DAB channel is unmixed, rendered back as a DAB-only RGB image,
    converted to grayscale and mapped through :func:`od_from_intensity`.
    Intensities are clamped to one byte level to keep the log finite.
    """
    c = dab_concentration(img)
    dab_rgb = I0 * 10.0 ** (-c[..., None] * STAIN_VECTORS["dab"])
    gray = np.maximum(dab_rgb @ LUMA, 1.0)
    return od_from_intensity(gray / I0, alpha)


_HED_T = torch.tensor(HED_FROM_RGB[:, 2])
_DAB_T = torch.tensor(STAIN_VECTORS["dab"])
_LUMA_T = torch.tensor(LUMA)


def optical_density_torch(x, alpha=1.0):
    """Batched :func:`optical_density` for NCHW model-space tensors.

    Returns an (N, H, W) map; not meant to carry gradients.
    """
    dt = x.dtype
    metric = (x.double() + 1.0) / 2.0
    intensity = torch.clamp(metric * I0, min=1.0)
    od = -torch.log10(intensity / I0)
    c = torch.clamp(torch.einsum("nchw,c->nhw", od, _HED_T), min=0.0)
    dab_rgb = I0 * 10.0 ** (-c[:, None] * _DAB_T[None, :, None, None])
    gray = torch.clamp(torch.einsum("nchw,c->nhw", dab_rgb, _LUMA_T), min=1.0)
    return ((-torch.log10(gray / I0)) ** alpha).to(dt)
