"""Generate the synthetic weakly-paired set and look at what it contains.

Each pair is an H&E-like source and an IHC-like target rendered from the
same cell layout, then misaligned by a random elastic/affine warp. The
HER2 level controls how much brown DAB the target carries.

    python demos/01_synthetic_data.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from virtualstain.data import generate_synthetic_dataset, to_metric
from virtualstain.losses import fod_mask
from virtualstain.generator import to_tensor
from virtualstain.stains import optical_density

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_data")
manifest = generate_synthetic_dataset(40, 8, 64, seed=1, out_dir=out)
print(f"wrote {len(manifest.entries)} pairs to {out}; class counts {manifest.class_counts}")

# DAB optical density and the strongly stained (FOD) area grow with the label
by_label = {}
for e in manifest.entries:
    _, trg = manifest.load_pair(e)
    od = optical_density(to_metric(trg)).mean()
    area = fod_mask(to_tensor(trg)).mean().item()
    by_label.setdefault(e.her2_label, []).append((od, area))
for label in sorted(by_label):
    od, area = np.mean(by_label[label], axis=0)
    print(f"HER2 {label}: mean OD {od:.3f}, FOD area {area:.3f}")

# one row per label: source | target, two pairs each
rows = []
for label in range(4):
    pairs = [manifest.load_pair(e) for e in manifest.entries if e.her2_label == label][:2]
    rows.append(np.concatenate([np.concatenate(p, axis=1) for p in pairs], axis=1))
grid = ((np.concatenate(rows, axis=0) + 1) * 127.5).round().astype(np.uint8)
Image.fromarray(grid).save(out / "overview.png")
print(f"overview grid at {out / 'overview.png'}")
