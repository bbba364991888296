"""The loss terms and quality metrics on hand-made inputs.

Every number printed here has a closed form, so the script doubles as a
quick sanity check of an installation.

    python demos/02_losses_and_metrics.py
"""

import math

import numpy as np
import torch

from virtualstain.losses import (
    charbonnier_loss,
    gan_loss,
    pattern_loss_from_probs,
    sdc_loss_from_scores,
)
from virtualstain.metrics import l1_od, psnr, ssim, vif, weighted_acc_auc

x = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 2 - 1
print("Charbonnier of identical images:", charbonnier_loss(x, x.clone()).item(), "(= eps)")

half = torch.full((4,), 0.5, dtype=torch.float64)
print("constrainer loss, undecided scores:", sdc_loss_from_scores(half, half).item(),
      f"(ln 2 = {math.log(2):.6f})")
print("least-squares GAN loss at 0.5:", gan_loss(half.view(1, 1, 2, 2), 1).item())

p = torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64)
q = torch.tensor([[0.5, 0.5, 0, 0]], dtype=torch.float64)
print("pattern loss, one-hot vs half/half:", round(pattern_loss_from_probs(p, q).item(), 6),
      f"(1 - 1/sqrt 2 = {1 - 1 / math.sqrt(2):.6f})")

rng = np.random.default_rng(0)
ref = rng.random((64, 64, 3))
noisy = np.clip(ref + 0.05 * rng.standard_normal(ref.shape), 0, 1)
print(f"PSNR {psnr(noisy, ref):.2f} dB, SSIM {ssim(noisy, ref):.3f}, VIF {vif(noisy, ref):.3f}")
print("VIF(x, x) =", round(vif(ref, ref), 9), " L1_OD(x, x) =", l1_od(ref, ref))

probs = np.eye(4)[[0, 0, 0, 1]] * 0.9 + 0.025
probs[3] = [0.9, 0.05, 0.025, 0.025]
acc, auc = weighted_acc_auc(probs, [0, 0, 0, 1])
print(f"weighted Acc {acc} with three right and one wrong; AUC {auc}")
