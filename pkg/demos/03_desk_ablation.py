"""Train the baseline and the full model at desk scale and compare them.

The frozen classifier and reference constrainer are pretrained on the
real targets first; both runs are then scored by them. With the default
30+30 epochs this takes roughly ten minutes on one CPU core; pass a
smaller epoch count to try it quickly.

    python demos/03_desk_ablation.py [epochs] [seed]
"""

import sys
import tempfile
import time
from pathlib import Path

import torch

from virtualstain.data import generate_synthetic_dataset
from virtualstain.experiments import (
    comparison_table,
    desk_config,
    load_splits,
    pretrain_frozen,
    run_ablation_preset,
)

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

root = Path(tempfile.mkdtemp(prefix="desk_"))
train, test = load_splits(generate_synthetic_dataset(200, 50, 64, 1, root))
t = time.perf_counter()
frozen = pretrain_frozen(train, test)
print(f"classifier held-out acc {frozen.classifier_acc:.3f}, "
      f"reference constrainer balanced acc {frozen.sdc_bacc:.3f} "
      f"({time.perf_counter() - t:.0f}s)")

base = desk_config(seed, epochs_phase1=epochs, epochs_phase2=epochs)
reports = {}
for name in ("baseline", "full"):
    t = time.perf_counter()
    reports[name], _ = run_ablation_preset(name, base, train, test, frozen)
    print(f"{name}: {time.perf_counter() - t:.0f}s")
print(comparison_table(reports), end="")
