"""Image-quality and pathology metrics.

All image metrics take metric-space arrays (values in [0, 1]) of shape
``(H, W, C)``. Optical density lives in :mod:`virtualstain.stains` and is
re-exported here.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .stains import LUMA, optical_density  # noqa: F401

FOD_THRESHOLD = 0.15
PSNR_CAP = 100.0
TABLE_COLUMNS = ("psnr", "ssim", "l_sdc", "l1_od", "acc", "auc", "vif")


def _pair(gen, trg):
    gen = np.asarray(gen, dtype=np.float64)
    trg = np.asarray(trg, dtype=np.float64)
    if gen.shape != trg.shape:
        raise ValueError(f"shape mismatch {gen.shape} vs {trg.shape}")
    return gen, trg


def psnr(gen, trg):
    """PSNR in dB for unit data range, capped at 100 dB."""
    gen, trg = _pair(gen, trg)
    mse = np.mean((gen - trg) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size, sigma):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(x, win):
    return ndimage.correlate(x, win, mode="reflect")


def ssim(gen, trg, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Single-scale SSIM with a Gaussian window, averaged over channels and
    over the full (reflect-padded) image."""
    gen, trg = _pair(gen, trg)
    if gen.ndim == 2:
        gen, trg = gen[..., None], trg[..., None]
    win = gaussian_window(win_size, sigma)
    c1, c2 = k1**2, k2**2
    vals = []
    for ch in range(gen.shape[-1]):
        x, y = gen[..., ch], trg[..., ch]
        mx, my = _filter(x, win), _filter(y, win)
        sxx = _filter(x * x, win) - mx * mx
        syy = _filter(y * y, win) - my * my
        sxy = _filter(x * y, win) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


VIF_SCALES = 4
VIF_NOISE_VAR = 2.0


def vif_window(scale):
    n = 2 ** (VIF_SCALES - scale + 1) + 1
    return gaussian_window(n, n / 5.0)


def _to_gray255(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img @ LUMA if img.shape[-1] == 3 else img[..., 0]
    return img * 255.0


def vif(gen, trg):
    """Pixel-domain VIF of ``gen`` against reference ``trg``.

    Four scales; at each scale the reference is treated as the source of a
    Gaussian scale mixture, ``gen`` as a gain-plus-noise distortion of it,
    and the ratio of summed information terms is returned.
    """
    gen, trg = _pair(gen, trg)
    ref, dist = _to_gray255(trg), _to_gray255(gen)
    if min(ref.shape) // 2 ** (VIF_SCALES - 1) < vif_window(VIF_SCALES).shape[0]:
        raise ValueError(f"image {ref.shape} too small for {VIF_SCALES}-scale VIF")
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        win = vif_window(scale)
        if scale > 1:
            ref = _filter(ref, win)[::2, ::2]
            dist = _filter(dist, win)[::2, ::2]
        mu1, mu2 = _filter(ref, win), _filter(dist, win)
        s1 = np.maximum(_filter(ref * ref, win) - mu1 * mu1, 0)
        s2 = np.maximum(_filter(dist * dist, win) - mu2 * mu2, 0)
        s12 = _filter(ref * dist, win) - mu1 * mu2

        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat1 = s1 < eps
        g[flat1] = 0
        sv[flat1] = s2[flat1]
        s1 = np.where(flat1, 0, s1)
        flat2 = s2 < eps
        g[flat2] = 0
        sv[flat2] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, eps)

        num += np.sum(np.log10(1 + g * g * s1 / (sv + VIF_NOISE_VAR)))
        den += np.sum(np.log10(1 + s1 / VIF_NOISE_VAR))
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return float(num / den)


def positive_signal(od, threshold=FOD_THRESHOLD):
    """Zero OD values at or below the focal threshold."""
    return np.where(od > threshold, od, 0.0)


def l1_od(gen, trg, alpha=1.0, threshold=FOD_THRESHOLD):
    """Summed absolute difference of thresholded DAB optical density."""
    gen, trg = _pair(gen, trg)
    a = positive_signal(optical_density(gen, alpha), threshold)
    b = positive_signal(optical_density(trg, alpha), threshold)
    return float(np.sum(np.abs(a - b)))


def binary_auc(scores, positive):
    """Mann-Whitney AUC with tie correction, computed on doubled ranks so
    the result is an exact ratio of integers."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    doubled = (2 * rankdata(scores, method="average")).astype(np.int64)
    u2 = int(doubled[positive].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def weighted_acc_auc(probs, labels, n_classes=4):
    """Accuracy and support-weighted one-vs-rest AUC.

    AUC is ``None`` when the labels contain a single class.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    present = [c for c in range(n_classes) if np.any(labels == c)]
    if len(present) < 2:
        return acc, None
    total = 0.0
    weight = 0
    for c in present:
        support = int(np.sum(labels == c))
        total += support * binary_auc(probs[:, c], labels == c)
        weight += support
    return acc, total / weight


@dataclass
class MetricsReport:
    """Per-image rows plus aggregates over them."""

    rows: list
    l_sdc: float = None
    acc: float = None
    auc: float = None
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.aggregate()

    def aggregate(self):
        out = {}
        for key in ("psnr", "ssim", "l1_od", "vif"):
            out[key] = float(np.mean([r[key] for r in self.rows]))
        out["l_sdc"] = self.l_sdc
        if self.acc is None and self.rows:
            probs = [r["class_probs"] for r in self.rows]
            labels = [r["her2_label"] for r in self.rows]
            self.acc, self.auc = weighted_acc_auc(probs, labels)
        out["acc"] = self.acc
        out["auc"] = self.auc
        return {k: out[k] for k in TABLE_COLUMNS}

    def to_dict(self):
        return {"aggregates": self.aggregates, "rows": self.rows}

    def save(self, stem):
        """Write ``<stem>.json`` and per-image ``<stem>.csv``."""
        stem = str(stem)
        with open(stem + ".json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        fields = ["pair_id", "her2_label", "predicted_class", "psnr", "ssim", "l1_od", "vif",
                  "class_probs"]
        with open(stem + ".csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in self.rows:
                rec = {k: r[k] for k in fields}
                rec["class_probs"] = " ".join(f"{p:.6f}" for p in r["class_probs"])
                w.writerow(rec)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        agg = d["aggregates"]
        return cls(d["rows"], l_sdc=agg["l_sdc"], acc=agg["acc"], auc=agg["auc"], aggregates=agg)
