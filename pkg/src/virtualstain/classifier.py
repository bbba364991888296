"""HER2 pattern classifier: pretraining and inference."""

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .generator import to_tensor
from .networks import PatternClassifier

logger = logging.getLogger(__name__)


def classify(classifier, img):
    """Class probabilities (N, 4) for an NCHW model-space batch."""
    if img.ndim != 4 or img.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) tensor, got {tuple(img.shape)}")
    with torch.no_grad():
        return classifier(img)


def _augment(batch, rng, jitter):
    """Dihedral flips/rotations and a global brightness shift."""
    k = int(rng.integers(4))
    batch = torch.rot90(batch, k, dims=(2, 3))
    if rng.random() < 0.5:
        batch = torch.flip(batch, dims=(3,))
    if jitter:
        shift = torch.from_numpy(rng.uniform(-jitter, jitter, size=(batch.shape[0], 1, 1, 1)))
        batch = torch.clamp(batch + shift.to(batch.dtype), -1, 1)
    return batch


def accuracy(classifier, images, labels, batch_size=64):
    preds = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            preds.append(classifier(to_tensor(images[i:i + batch_size])).argmax(dim=1))
    return float((torch.cat(preds).numpy() == np.asarray(labels)).mean())


def pretrain_classifier(train_images, train_labels, epochs, *, test_images=None,
                        test_labels=None, seed=0, batch_size=16, lr=1e-3, jitter=0.1,
                        label_smoothing=0.2):
    """Cross-entropy training on (target image, HER2 label) pairs.

    Label smoothing keeps the frozen classifier's probabilities away from
    the simplex corners, where the pattern loss would have no gradient.
    Returns ``(classifier, heldout_accuracy)`` with the classifier frozen.
    """
    labels = np.asarray(train_labels)
    missing = set(range(4)) - set(labels.tolist())
    if missing:
        raise ValueError(f"training labels miss classes {sorted(missing)}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    clf = PatternClassifier()
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    x_all = to_tensor(list(train_images))
    y_all = torch.from_numpy(labels).long()
    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(len(labels)))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            x = _augment(x_all[idx], rng, jitter)
            loss = F.cross_entropy(clf.logits(x), y_all[idx], label_smoothing=label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        logger.info("classifier epoch %d loss %.4f", epoch + 1, total / len(labels))
    clf.eval()
    clf.requires_grad_(False)
    acc = None
    if test_images is not None:
        acc = accuracy(clf, test_images, test_labels)
        logger.info("classifier held-out accuracy %.3f", acc)
    return clf, acc
