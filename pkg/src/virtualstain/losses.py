"""Loss terms and the composite phase objectives.

All functions work on NCHW model-space tensors. The composite losses take
the networks they need as callables so they can be stubbed in tests.
"""

import logging
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .stains import optical_density_torch

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
TERMS = ("sdc", "cyc", "p", "cptc", "l1")


@dataclass(frozen=True)
class LossWeights:
    lambda_cha: float = 100.0
    lambda_sdc: float = 10.0
    lambda_cyc: float = 10.0
    lambda_p: float = 20.0
    lambda_cptc: float = 2.5
    # pixel L1 against the weak pair; only the Pix2Pix-style reference uses it
    lambda_l1: float = 100.0
    eps_charbonnier: float = 1e-3
    fod_threshold: float = 0.15
    gan_variant: str = "least_squares"
    enabled: frozenset = field(default=frozenset({"sdc", "cyc", "p", "cptc"}))

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        for name in ("lambda_cha",) + tuple(f"lambda_{t}" for t in TERMS):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gan_variant not in ("least_squares", "bce"):
            raise ValueError(f"unknown gan_variant {self.gan_variant!r}")

    def weight(self, term):
        return getattr(self, f"lambda_{term}") if term in self.enabled else 0.0

    def with_enabled(self, *terms):
        return replace(self, enabled=frozenset(terms))


@dataclass
class LossBreakdown:
    """Per-term values, their weights and the weighted composite."""

    terms: dict
    weights: dict
    total: torch.Tensor

    def as_floats(self):
        out = {k: v.item() for k, v in self.terms.items()}
        out["total"] = self.total.item()
        return out

    def weighted_sum(self):
        return sum(self.weights[k] * v.item() for k, v in self.terms.items())


def _compose(terms, weights):
    total = None
    for k, v in terms.items():
        contrib = v if weights[k] == 1.0 else weights[k] * v
        total = contrib if total is None else total + contrib
    return LossBreakdown(terms, weights, total)


def label_like(scores, value):
    """Constant label matrix of 0s or 1s shaped like ``scores``."""
    if value not in (0, 1):
        raise ValueError("label value must be 0 or 1")
    return torch.full_like(scores, float(value))


def gan_loss(scores, label, variant="least_squares"):
    """Least-squares (MSE on raw scores) or BCE (on logits) GAN loss."""
    if not torch.is_tensor(label):
        label = label_like(scores, label)
    if scores.shape != label.shape:
        raise ValueError(f"shape mismatch {tuple(scores.shape)} vs {tuple(label.shape)}")
    if variant == "least_squares":
        return torch.mean((scores - label) ** 2)
    if variant == "bce":
        return F.binary_cross_entropy_with_logits(scores, label)
    raise ValueError(f"unknown gan variant {variant!r}")


def bce(prob, target):
    """Binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = torch.clamp(prob, BCE_CLAMP, 1 - BCE_CLAMP)
    if target == 1:
        return -torch.log(p).mean()
    return -torch.log(1 - p).mean()


def sdc_loss_from_scores(p_sim, p_gen):
    return 0.5 * (bce(p_sim, 1) + bce(p_gen, 0))


def sdc_loss(sdc, trg, sim, gen):
    """Constrainer objective: (target, deformed target) pairs are positive,
    (target, generated) pairs negative."""
    if not trg.shape == sim.shape == gen.shape:
        raise ValueError("trg, sim and gen must share a shape")
    return sdc_loss_from_scores(sdc(trg, sim), sdc(trg, gen))


def sdc_generator_loss(sdc, trg, gen):
    """Generator side of the constrainer game: push (target, generated)
    towards the positive label."""
    if trg.shape != gen.shape:
        raise ValueError("trg and gen must share a shape")
    return bce(sdc(trg, gen), 1)


def l1(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean(torch.abs(a - b))


def cycle_loss(src, gen, reverse):
    return l1(src, reverse(gen))


def cosine_similarity(a, b, eps=1e-12):
    num = (a * b).sum(dim=-1)
    # clamp before the sqrt so zero vectors give a finite gradient
    den_sq = (a * a).sum(dim=-1) * (b * b).sum(dim=-1)
    return num / torch.sqrt(torch.clamp(den_sq, min=eps**2))


def pattern_loss_from_probs(p_trg, p_gen):
    return torch.mean(1 - cosine_similarity(p_trg, p_gen))


def pattern_loss(classifier, trg, gen):
    with torch.no_grad():
        p_trg = classifier(trg)
    return pattern_loss_from_probs(p_trg, classifier(gen))


def fod_mask(img, threshold=0.15, alpha=1.0):
    """1 where the DAB optical density exceeds ``threshold``.

    ``img`` is an NCHW model-space tensor; returns an (N, 1, H, W) float
    mask without gradient.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    with torch.no_grad():
        od = optical_density_torch(img, alpha)
    return (od > threshold).to(img.dtype)[:, None]


def masked_prototypes(features, mask):
    """Mask-weighted mean feature vector per image; ``mask`` is resampled to
    the feature resolution by area averaging. Returns (protos, mass)."""
    w = F.adaptive_avg_pool2d(mask, features.shape[-2:])
    mass = w.sum(dim=(1, 2, 3))
    protos = (features * w).sum(dim=(2, 3)) / torch.clamp(mass, min=1e-12)[:, None]
    return protos, mass


def ctpc_from_features(f_trg, f_gen, m_trg, m_gen):
    p_trg, mass_trg = masked_prototypes(f_trg, m_trg)
    p_gen, mass_gen = masked_prototypes(f_gen, m_gen)
    keep = (mass_trg > 0) & (mass_gen > 0)
    # swap skipped rows for a fixed vector so no NaN gradient leaks through where()
    k = keep[:, None]
    safe_trg = torch.where(k, p_trg, torch.ones_like(p_trg))
    safe_gen = torch.where(k, p_gen, torch.ones_like(p_gen))
    per_image = torch.where(keep, 1 - cosine_similarity(safe_trg, safe_gen), torch.zeros_like(mass_trg))
    if not bool(keep.all()):
        logger.debug("ctpc: %d of %d images skipped (empty FOD mask)",
                     int((~keep).sum()), keep.numel())
    return per_image.mean()


def ctpc_loss(classifier, trg, gen, threshold=0.15):
    """Tumour-prototype consistency between target and generated images.

    Prototypes are FOD-masked means of the classifier's last feature map;
    images with an empty mask on either side contribute 0.
    """
    with torch.no_grad():
        f_trg = classifier.features(trg)
    f_gen = classifier.features(gen)
    return ctpc_from_features(f_trg, f_gen, fod_mask(trg, threshold), fod_mask(gen, threshold))


def charbonnier_loss(x, y, eps=1e-3):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    # subtract eps inside the mean so identical inputs give exactly eps
    return torch.mean(torch.sqrt((x - y) ** 2 + eps**2) - eps) + eps


def rec_loss(trg, reconstruct, disc, weights):
    """Autoencoder-phase objective: GAN term on the reconstruction plus
    weighted Charbonnier fidelity."""
    rec = reconstruct(trg)
    terms = {
        "gan": gan_loss(disc(rec), 1, weights.gan_variant),
        "cha": charbonnier_loss(trg, rec, weights.eps_charbonnier),
    }
    return _compose(terms, {"gan": 1.0, "cha": weights.lambda_cha})


def gen_loss(src, trg, sim, *, generate, disc, weights, sdc=None, reverse=None,
             classifier=None, gen=None):
    """Translation-phase generator objective.

    ``sim`` is unused by the generator update (its constrainer term has no
    dependence on the generator) but is accepted to keep the signature of
    the three-image objectives uniform.
    """
    if gen is None:
        gen = generate(src)
    terms = {"gan": gan_loss(disc(gen), 1, weights.gan_variant)}
    weights_used = {"gan": 1.0}
    if "sdc" in weights.enabled:
        terms["sdc"] = sdc_generator_loss(sdc, trg, gen)
    if "cyc" in weights.enabled:
        terms["cyc"] = cycle_loss(src, gen, reverse)
    if "p" in weights.enabled or "cptc" in weights.enabled:
        with torch.no_grad():
            f_trg = classifier.features(trg)
            p_trg = torch.softmax(classifier.head(f_trg.mean(dim=(2, 3))), dim=1)
        f_gen = classifier.features(gen)
        if "p" in weights.enabled:
            p_gen = torch.softmax(classifier.head(f_gen.mean(dim=(2, 3))), dim=1)
            terms["p"] = pattern_loss_from_probs(p_trg, p_gen)
        if "cptc" in weights.enabled:
            t = weights.fod_threshold
            terms["cptc"] = ctpc_from_features(f_trg, f_gen, fod_mask(trg, t), fod_mask(gen, t))
    if "l1" in weights.enabled:
        terms["l1"] = l1(gen, trg)
    for k in terms:
        if k != "gan":
            weights_used[k] = weights.weight(k)
    return _compose(terms, weights_used)


def disc_loss(src, trg, sim, *, gen, disc, weights, sdc=None, train_sdc=False):
    """Adversary-step objectives ``(L_A, L_SDC)``.

    ``gen`` must already be detached from the generator graph. ``L_SDC`` is
    ``None`` unless the constrainer is being trained adversarially.
    """
    if gen.requires_grad:
        raise ValueError("generated images must be detached for the adversary step")
    v = weights.gan_variant
    loss_a = 0.5 * (gan_loss(disc(gen), 0, v) + gan_loss(disc(trg), 1, v))
    loss_sdc = sdc_loss(sdc, trg, sim, gen) if train_sdc else None
    return loss_a, loss_sdc
