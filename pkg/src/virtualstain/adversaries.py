"""Image discriminator and Style Distribution Constrainer (SDC).

The constrainer can be trained adversarially alongside the generator or
pretrained once on real targets and frozen.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .data import AugmentationSpec, simulate_weak_pairing
from .generator import to_tensor
from .losses import bce
from .networks import PatchDiscriminator, StyleConstrainer, init_weights

logger = logging.getLogger(__name__)

SDC_MODES = ("adversarial", "pretrained")


@dataclass(frozen=True)
class SdcConfig:
    mode: str = "adversarial"
    # probability that each transform is present in a positive-pair draw
    positive_aug_p: float = 0.5

    def __post_init__(self):
        if self.mode not in SDC_MODES:
            raise ValueError(f"sdc mode must be one of {SDC_MODES}")
        if not 0 < self.positive_aug_p <= 1:
            raise ValueError("positive_aug_p must be in (0, 1]")


def build_discriminator(base_channels=32, seed=0):
    d = PatchDiscriminator(3, base_channels)
    init_weights(d, torch.Generator().manual_seed(seed))
    return d


def build_sdc(base_channels=32, seed=0):
    s = StyleConstrainer(base_channels)
    init_weights(s, torch.Generator().manual_seed(seed))
    return s


def discriminate(disc, img):
    """Patch score map (raw, unsquashed)."""
    if img.ndim != 4 or img.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) tensor, got {tuple(img.shape)}")
    return disc(img)


def sdc_score(sdc, trg, other):
    """Probability that ``other`` lies in ``trg``'s style distribution."""
    if trg.shape != other.shape:
        raise ValueError(f"shape mismatch {tuple(trg.shape)} vs {tuple(other.shape)}")
    return sdc(trg, other)


def deform(img, rng, p=0.5):
    """Fresh weak-pairing deformation of a single (H, W, C) model-space image."""
    return simulate_weak_pairing(img, AugmentationSpec.sample(rng, p))


def sample_sdc_pairs(targets, labels, rng, p=0.5):
    """One positive and one negative pair per anchor.

    Positive: (target, deformed target), label 1. Negative: (target, another
    target with a different HER2 label), label 0.

    Returns ``(anchors, others, pair_labels)`` as lists/array.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two HER2 classes to build negatives")
    anchors, others, y = [], [], []
    for i, (img, lab) in enumerate(zip(targets, labels)):
        anchors.append(img)
        others.append(deform(img, rng, p))
        y.append(1)
        j = rng.choice(np.flatnonzero(labels != lab))
        anchors.append(img)
        others.append(targets[j])
        y.append(0)
    return anchors, others, np.asarray(y)


def balanced_accuracy(probs, y):
    pred = np.asarray(probs) > 0.5
    y = np.asarray(y).astype(bool)
    return 0.5 * (np.mean(pred[y]) + np.mean(~pred[~y]))


def evaluate_sdc(sdc, targets, labels, seed=0, batch_size=32):
    rng = np.random.default_rng(seed)
    a, o, y = sample_sdc_pairs(targets, labels, rng)
    probs = []
    with torch.no_grad():
        for i in range(0, len(a), batch_size):
            probs.append(sdc(to_tensor(a[i:i + batch_size]), to_tensor(o[i:i + batch_size])))
    return balanced_accuracy(torch.cat(probs).numpy(), y)


def pretrain_sdc(train_targets, train_labels, epochs, *, test_targets=None, test_labels=None,
                 seed=0, base_channels=32, batch_size=16, lr=2e-4, p=0.5):
    """Train a frozen reference constrainer on real targets.

    Pairs are re-sampled every epoch. Returns ``(sdc, heldout_balanced_acc)``;
    the accuracy is ``None`` without a held-out set.
    """
    if len(np.unique(train_labels)) < 2:
        raise ValueError("need at least two HER2 classes to pretrain the SDC")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    sdc = build_sdc(base_channels, seed)
    opt = torch.optim.Adam(sdc.parameters(), lr=lr, betas=(0.5, 0.999))
    for epoch in range(epochs):
        a, o, y = sample_sdc_pairs(train_targets, train_labels, rng, p)
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            prob = sdc(to_tensor([a[k] for k in idx]), to_tensor([o[k] for k in idx]))
            target = torch.from_numpy(y[idx]).float()
            loss = 0.5 * (bce(prob[target == 1], 1) if bool((target == 1).any()) else 0) + \
                0.5 * (bce(prob[target == 0], 0) if bool((target == 0).any()) else 0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        logger.info("sdc pretrain epoch %d loss %.4f", epoch + 1, total / len(y))
    sdc.eval()
    sdc.requires_grad_(False)
    acc = None
    if test_targets is not None:
        acc = evaluate_sdc(sdc, test_targets, test_labels, seed=seed + 1)
        logger.info("sdc held-out balanced accuracy %.3f", acc)
    return sdc, acc
