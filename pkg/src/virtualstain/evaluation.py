"""Run a trained translator over a test split and collect every metric."""

import numpy as np
import torch

from .adversaries import deform
from .data import child_rng, to_metric
from .generator import to_tensor
from .losses import bce
from .metrics import MetricsReport, l1_od, psnr, ssim, vif

# seed namespace for the deterministic evaluation deformations
SIM_SEED = 7919


def evaluation_sims(targets, pair_ids, seed=SIM_SEED):
    """One deformed copy per target, fixed by pair id."""
    return np.stack([deform(t, child_rng(seed, pid)) for t, pid in zip(targets, pair_ids)])


def style_metric_lsdc(reference_sdc, targets, gens, sims, batch_size=32):
    """Style-distribution loss of generated images under a frozen reference
    constrainer.

    Per image: ``0.5 * (BCE(S(trg, sim), 1) + BCE(S(trg, gen), 1))``; both
    pairs are scored as in-distribution, so a generator whose outputs the
    reference accepts as restyled targets reaches the positive-pair floor.
    Returns the mean over images.
    """
    if reference_sdc is None:
        raise ValueError("the style metric needs a frozen reference constrainer")
    if not len(targets) == len(gens) == len(sims):
        raise ValueError("targets, gens and sims must have the same length")
    per = []
    with torch.no_grad():
        for i in range(0, len(targets), batch_size):
            t = to_tensor(targets[i:i + batch_size], torch.float32)
            g = to_tensor(gens[i:i + batch_size], torch.float32)
            s = to_tensor(sims[i:i + batch_size], torch.float32)
            p_sim = reference_sdc(t, s)
            p_gen = reference_sdc(t, g)
            for a, b in zip(p_sim, p_gen):
                per.append(0.5 * (bce(a, 1).item() + bce(b, 1).item()))
    return float(np.mean(per))


def translate_split(translator, sources, batch_size=16):
    out = []
    translator.eval()
    with torch.no_grad():
        for i in range(0, len(sources), batch_size):
            g = translator.translate(to_tensor(sources[i:i + batch_size]))
            out.append(g.numpy().transpose(0, 2, 3, 1))
    return np.concatenate(out).astype(np.float32)


def evaluate_suite(translator, test, classifier, reference_sdc, alpha=1.0, fod_threshold=0.15,
                   batch_size=16):
    """Translate every test source and score it against its target.

    ``test`` is a :class:`~virtualstain.data.SplitArrays`. Returns a
    :class:`MetricsReport` with one row per pair.
    """
    if len(test) == 0:
        raise ValueError("test split is empty")
    gens = translate_split(translator, test.sources, batch_size)
    with torch.no_grad():
        probs = np.concatenate([
            classifier(to_tensor(gens[i:i + batch_size])).numpy()
            for i in range(0, len(gens), batch_size)
        ]).astype(np.float64)
    sims = evaluation_sims(test.targets, test.pair_ids)
    l_sdc = style_metric_lsdc(reference_sdc, test.targets, gens, sims)
    rows = []
    for pid, g, t, lab, pr in zip(test.pair_ids, gens, test.targets, test.labels, probs):
        gm, tm = to_metric(g), to_metric(t)
        rows.append({
            "pair_id": pid,
            "her2_label": int(lab),
            "psnr": psnr(gm, tm),
            "ssim": float(ssim(gm, tm)),
            "l1_od": l1_od(gm, tm, alpha, fod_threshold),
            "vif": vif(gm, tm),
            "predicted_class": int(np.argmax(pr)),
            "class_probs": [float(p) for p in pr],
        })
    return MetricsReport(rows, l_sdc=l_sdc)


def reconstruction_psnr(translator, targets, batch_size=16):
    """Mean PSNR of decode(encode_target(trg)) against ``trg``."""
    vals = []
    with torch.no_grad():
        for i in range(0, len(targets), batch_size):
            rec = translator.reconstruct(to_tensor(targets[i:i + batch_size]))
            for r, t in zip(rec.numpy().transpose(0, 2, 3, 1), targets[i:i + batch_size]):
                vals.append(psnr(to_metric(r), to_metric(t)))
    return float(np.mean(vals))
