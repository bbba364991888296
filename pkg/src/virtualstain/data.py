"""Synthetic weakly-paired stain data, misalignment simulation and image I/O.

Images are ``float32`` arrays of shape ``(H, W, C)``. Two value spaces are
used: *model* space ``[-1, 1]`` (networks, losses) and *metric* space
``[0, 1]`` (quality metrics). Use :func:`to_metric` / :func:`to_model` to
move between them.
"""

import json
import logging
import re
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .stains import STAIN_VECTORS

logger = logging.getLogger(__name__)

SPACES = {"model": (-1.0, 1.0), "metric": (0.0, 1.0)}
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
N_CLASSES = 4
# Elastic displacement is specified at this reference resolution.
ELASTIC_REFERENCE_SIZE = 1024


class DataError(ValueError):
    pass


class ManifestError(DataError):
    def __init__(self, message, pair_id=None):
        super().__init__(message if pair_id is None else f"{pair_id}: {message}")
        self.pair_id = pair_id


def check_image(img, space="model", channels=(3,)):
    """Validate an ``(H, W, C)`` image against a value space."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise DataError(f"expected an (H, W, C) array, got shape {img.shape}")
    h, w, c = img.shape
    if h < 8 or w < 8:
        raise DataError(f"image too small: {h}x{w}")
    if c not in channels:
        raise DataError(f"expected {channels} channels, got {c}")
    lo, hi = SPACES[space]
    if not np.all(np.isfinite(img)) or img.min() < lo or img.max() > hi:
        raise DataError(f"values outside {space} space [{lo}, {hi}]")
    return img


def to_metric(img):
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def to_model(img):
    return np.asarray(img, dtype=np.float64) * 2.0 - 1.0


def gray_mean(img):
    return float(np.mean(np.asarray(img, dtype=np.float64) @ GRAY_WEIGHTS))


# ---------------------------------------------------------------- augmentation

ELASTIC_RANGE = (5.0, 100.0)
TRANSLATE_RANGE = (-0.2, 0.2)
ROTATE_RANGE = (-15.0, 15.0)


@dataclass(frozen=True)
class AugmentationSpec:
    """One draw of the misalignment pipeline.

    ``elastic_intensity`` of 0 disables the elastic warp; otherwise it must
    lie in [5, 100]. The all-zero spec is the identity.
    """

    elastic_intensity: float = 0.0
    translate_frac: tuple = (0.0, 0.0)
    rotate_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "translate_frac", tuple(float(t) for t in self.translate_frac))
        e = self.elastic_intensity
        if e != 0 and not ELASTIC_RANGE[0] <= e <= ELASTIC_RANGE[1]:
            raise DataError(f"elastic_intensity {e} outside {ELASTIC_RANGE}")
        if len(self.translate_frac) != 2 or not all(
            TRANSLATE_RANGE[0] <= t <= TRANSLATE_RANGE[1] for t in self.translate_frac
        ):
            raise DataError(f"translate_frac {self.translate_frac} outside {TRANSLATE_RANGE}")
        if not ROTATE_RANGE[0] <= self.rotate_deg <= ROTATE_RANGE[1]:
            raise DataError(f"rotate_deg {self.rotate_deg} outside {ROTATE_RANGE}")

    @property
    def is_identity(self):
        return (
            self.elastic_intensity == 0
            and self.translate_frac == (0.0, 0.0)
            and self.rotate_deg == 0
        )

    @classmethod
    def sample(cls, rng, p=0.5):
        """Randomly combine the three transforms, each present with
        probability ``p`` and drawn uniformly from its range."""
        elastic = rng.uniform(*ELASTIC_RANGE) if rng.random() < p else 0.0
        if rng.random() < p:
            translate = tuple(rng.uniform(*TRANSLATE_RANGE, size=2))
        else:
            translate = (0.0, 0.0)
        rotate = rng.uniform(*ROTATE_RANGE) if rng.random() < p else 0.0
        return cls(float(elastic), translate, float(rotate), int(rng.integers(2**31)))


def largest_inscribed_rectangle(mask):
    """Largest axis-aligned all-True rectangle of a 2-D boolean mask.

    Returns ``(top, left, height, width)``. Ties resolve to the narrowest
    rectangle, then the one whose bottom row comes first, then leftmost.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    # heights[r, c]: run of True cells ending at row r in column c
    heights = np.zeros((h, w), dtype=np.int64)
    run = np.zeros(w, dtype=np.int64)
    for r in range(h):
        run = np.where(mask[r], run + 1, 0)
        heights[r] = run
    best, best_area = (0, 0, 0, 0), 0
    # lowest height over columns [c, c + d] for every (row, c), widened by one per pass
    low = heights.copy()
    for d in range(w):
        if d:
            low = np.minimum(low[:, :-1], heights[:, d:])
        area = low * (d + 1)
        k = int(np.argmax(area))
        r, c = divmod(k, area.shape[1])
        if area[r, c] > best_area:
            best_area = int(area[r, c])
            best = (r - int(low[r, c]) + 1, c, int(low[r, c]), d + 1)
    return best


def _elastic_field(shape, intensity, rng):
    h, w = shape
    size = max(h, w)
    sigma = size / 8.0
    amplitude = intensity * size / ELASTIC_REFERENCE_SIZE
    out = []
    for _ in range(2):
        d = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
        peak = np.abs(d).max()
        out.append(d / peak * amplitude if peak > 0 else d)
    return out


def warp_coordinates(shape, spec):
    """Source coordinates (row, col) sampled by every output pixel."""
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty, tx = spec.translate_frac[1] * h, spec.translate_frac[0] * w
    theta = np.deg2rad(spec.rotate_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    # inverse of: rotate about centre, then translate
    y, x = rows - cy - ty, cols - cx - tx
    src_r = cos * y - sin * x + cy
    src_c = sin * y + cos * x + cx
    if spec.elastic_intensity > 0:
        rng = np.random.default_rng(spec.seed)
        dy, dx = _elastic_field(shape, spec.elastic_intensity, rng)
        src_r = src_r + dy
        src_c = src_c + dx
    return src_r, src_c


def simulate_weak_pairing(img, spec, cval=0.0):
    """Apply elastic warp, translation and rotation, then crop to the largest
    rectangle free of fill pixels and resize back to the input size.

    ``cval`` is the fill used outside the source image by the warp; it never
    survives into the output.
    """
    img = np.asarray(img)
    check_image(img, "model", channels=(1, 3))
    if spec.is_identity:
        return img.copy()
    h, w, c = img.shape
    src_r, src_c = warp_coordinates((h, w), spec)
    valid = (src_r >= 0) & (src_r <= h - 1) & (src_c >= 0) & (src_c <= w - 1)
    top, left, ch, cw = largest_inscribed_rectangle(valid)
    if ch < 2 or cw < 2:
        raise DataError("transform leaves no usable region")
    # Resample the coordinate field over the crop; convexity of the source
    # box keeps every interpolated coordinate inside the image.
    gr = np.linspace(top, top + ch - 1, h)
    gc = np.linspace(left, left + cw - 1, w)
    grid = np.meshgrid(gr, gc, indexing="ij")
    fr = ndimage.map_coordinates(src_r, grid, order=1, mode="nearest")
    fc = ndimage.map_coordinates(src_c, grid, order=1, mode="nearest")
    fr = np.clip(fr, 0, h - 1)
    fc = np.clip(fc, 0, w - 1)
    out = np.empty_like(img)
    for k in range(c):
        out[..., k] = ndimage.map_coordinates(
            img[..., k].astype(np.float64), [fr, fc], order=1, mode="constant", cval=cval
        )
    return np.clip(out, -1.0, 1.0).astype(img.dtype)


def normalize_illumination(src, trg, tol=0.02, max_iter=20):
    """Shift the target so its grayscale mean matches the source's.

    The shifted target is clamped to [-1, 1]; when clamping binds the shift
    is re-applied until the residual is within ``tol``. The source is
    returned untouched.
    """
    src = np.asarray(src)
    trg = np.asarray(trg)
    if src.shape != trg.shape:
        raise DataError(f"shape mismatch {src.shape} vs {trg.shape}")
    target_mean = gray_mean(src)
    out = trg
    for _ in range(max_iter):
        shift = target_mean - gray_mean(out)
        if shift == 0:
            break
        out = np.clip(out + shift, -1.0, 1.0).astype(trg.dtype)
        if abs(target_mean - gray_mean(out)) <= tol / 4:
            break
    return src, out


# ------------------------------------------------------------------ image I/O


def save_image(path, img):
    """Write a model-space image as lossless 8-bit PNG."""
    img = np.asarray(img, dtype=np.float64)
    data = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if data.shape[-1] == 1:
        data = data[..., 0]
    Image.fromarray(data).save(path, format="PNG", optimize=False)


def load_image(path):
    """Read an 8-bit image into model space as ``float32`` (H, W, 3)."""
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return data / 127.5 - 1.0


# ------------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    pair_id: str
    source_path: str
    target_path: str
    her2_label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list
    image_size: int
    root: Path = field(default=Path("."))

    @property
    def class_counts(self):
        counts = {k: 0 for k in range(N_CLASSES)}
        for e in self.entries:
            counts[e.her2_label] += 1
        return counts

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def path(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_pair(self, entry):
        return load_image(self.path(entry.source_path)), load_image(self.path(entry.target_path))

    def save(self, path=None):
        path = Path(path) if path is not None else self.root / "manifest.jsonl"
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
        return path


ENTRY_FIELDS = {"pair_id", "source_path", "target_path", "her2_label", "split"}


def load_manifest(path, check_files=True):
    """Read ``manifest.jsonl`` and verify each referenced image."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if set(rec) != ENTRY_FIELDS:
                raise ManifestError(
                    f"line {lineno}: fields {sorted(rec)} do not match schema", rec.get("pair_id")
                )
            if rec["split"] not in ("train", "test") or rec["her2_label"] not in range(N_CLASSES):
                raise ManifestError(f"line {lineno}: bad split or label", rec["pair_id"])
            entries.append(ManifestEntry(**rec))
    if not entries:
        raise ManifestError(f"{path} has no entries")
    manifest = DatasetManifest(entries, image_size=0, root=path.parent)
    size = None
    for e in entries if check_files else entries[:1]:
        for rel in (e.source_path, e.target_path):
            p = manifest.path(rel)
            if not p.exists():
                raise ManifestError(f"missing file {p}", e.pair_id)
            try:
                with Image.open(p) as im:
                    w, h = im.size
            except Exception as exc:
                raise ManifestError(f"cannot decode {p}: {exc}", e.pair_id) from exc
            if size is None:
                size = h
            if (h, w) != (size, size):
                raise ManifestError(f"{p} is {h}x{w}, expected {size}x{size}", e.pair_id)
    manifest.image_size = size
    return manifest


BCI_NAME = re.compile(r"^(?P<stem>.+)_(?P<label>0|1\+|2\+|3\+)\.(png|jpg|jpeg|tif|tiff)$", re.I)


def load_bci(root, check_files=True):
    """Map a BCI-style directory (``HE/{train,test}`` and ``IHC/{train,test}``
    with files named ``<id>_<split>_<score>.png``) onto the manifest schema."""
    root = Path(root)
    entries = []
    for split in ("train", "test"):
        src_dir = root / "HE" / split
        if not src_dir.is_dir():
            continue
        for src in sorted(src_dir.iterdir()):
            m = BCI_NAME.match(src.name)
            if m is None:
                continue
            trg = root / "IHC" / split / src.name
            if not trg.exists():
                raise ManifestError(f"no IHC counterpart for {src.name}", m["stem"])
            entries.append(ManifestEntry(
                pair_id=m["stem"],
                source_path=str(src.relative_to(root)),
                target_path=str(trg.relative_to(root)),
                her2_label=int(m["label"][0]),
                split=split,
            ))
    if not entries:
        raise ManifestError(f"no BCI pairs under {root}")
    manifest = DatasetManifest(entries, image_size=0, root=root)
    with Image.open(manifest.path(entries[0].source_path)) as im:
        manifest.image_size = im.size[1]
    if check_files:
        for e in entries:
            for rel in (e.source_path, e.target_path):
                with Image.open(manifest.path(rel)) as im:
                    if im.size != (manifest.image_size, manifest.image_size):
                        raise ManifestError(f"{rel} has size {im.size}", e.pair_id)
    return manifest


# ------------------------------------------------------------ synthetic data

# DAB concentration on stained tumour membranes and the fraction of tumour
# cells that take the stain, per HER2 level.
DAB_LEVEL = (0.0, 0.35, 0.75, 1.25)
DAB_COVERAGE = (0.0, 0.55, 0.85, 1.0)
# Width of the stained membrane band relative to the unstained membrane.
# Thickening keeps the higher levels apart after per-image contrast
# normalisation, which removes most of the pure intensity difference.
DAB_WIDTH = (1.0, 1.0, 1.5, 2.2)
# Tumour fraction of cells in the H&E view, a weak global label cue.
TUMOUR_FRACTION = (0.2, 0.4, 0.6, 0.8)
# Eosin density of the membrane rim per unit DAB on the same cell: the
# local H&E cue that makes each cell's stain level inferable from the source.
HE_RIM = 0.45


def _render(conc, rng, noise=0.02):
    """Beer-Lambert rendering of stain concentration maps to metric RGB."""
    od = np.zeros(conc[next(iter(conc))].shape + (3,))
    for name, c in conc.items():
        od += c[..., None] * STAIN_VECTORS[name]
    rgb = 10.0 ** (-od)
    rgb += noise * rng.standard_normal(rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def _cell_maps(size, label, rng):
    """Nuclei, cytoplasm and membrane maps of a procedural tissue patch."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = size / 64.0
    n_cells = int(rng.integers(10, 16) * scale**2)
    tissue = ndimage.gaussian_filter(rng.standard_normal((size, size)), 6 * scale)
    tissue = np.clip(0.5 + tissue / (np.abs(tissue).max() + 1e-12), 0, 1)
    nuclei = np.zeros((size, size))
    tumour_nuclei = np.zeros((size, size))
    membrane = np.zeros((size, size))
    cytoplasm = np.zeros((size, size))
    stained = np.zeros((size, size))
    frac = np.clip(TUMOUR_FRACTION[label] + rng.normal(0, 0.05), 0.05, 0.95)
    for _ in range(n_cells):
        cy, cx = rng.uniform(0, size, 2)
        tumour = rng.random() < frac
        r = rng.uniform(2.6, 3.6) * scale if tumour else rng.uniform(1.4, 2.2) * scale
        ecc = rng.uniform(0.7, 1.0)
        ang = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(ang) + dx * np.sin(ang)) / r
        v = (-dy * np.sin(ang) + dx * np.cos(ang)) / (r * ecc)
        d = np.sqrt(u**2 + v**2)
        nucleus = np.clip(1.5 - d, 0, 1) ** 0.7
        nuclei = np.maximum(nuclei, nucleus * (0.75 if tumour else 0.55))
        if tumour:
            tumour_nuclei = np.maximum(tumour_nuclei, nucleus)
            body = np.clip(1.0 - np.abs(d - 1.8) / 0.9, 0, 1)
            cytoplasm = np.maximum(cytoplasm, body)
            ring = np.exp(-((d - 1.9) ** 2) / 0.18)
            membrane = np.maximum(membrane, ring)
            if rng.random() < DAB_COVERAGE[label]:
                band = np.exp(-((d - 1.9) ** 2) / (0.18 * DAB_WIDTH[label] ** 2))
                stained = np.maximum(stained, band)
    return {
        "tissue": tissue,
        "nuclei": nuclei,
        "tumour_nuclei": tumour_nuclei,
        "cytoplasm": cytoplasm,
        "membrane": membrane,
        "stained": stained,
    }


def render_pair(size, label, rng):
    """Render an aligned (H&E-like, IHC-like) pair in metric space."""
    m = _cell_maps(size, label, rng)
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0)
    texture = 0.08 * texture / (np.abs(texture).max() + 1e-12)
    dab =DAB_LEVEL[label] * (1 + 0.1 * rng.standard_normal()) * m["stained"]
    he = _render({
        "hematoxylin": 1.1 * m["nuclei"] + 0.25 * m["tumour_nuclei"] + 0.04 * m["tissue"],
        "eosin": 0.25 * m["tissue"] + 0.3 * m["cytoplasm"] + HE_RIM * np.clip(dab, 0, None)
        + texture * m["tissue"] + 0.02,
    }, rng)
    ihc = _render({
        "hematoxylin": 0.6 * m["nuclei"] + 0.12 * m["tissue"] + 0.5 * texture * m["tissue"],
        "dab": np.clip(dab, 0, None) + 0.02,
    }, rng)
    return he, ihc


def child_rng(seed, pair_id):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(pair_id.encode()),)))


def generate_synthetic_dataset(n_train, n_test, image_size, seed, out_dir):
    """Write a reproducible weakly-paired stain dataset.

    Sources are H&E-like patches; targets restyle the same cells into
    IHC-like patches whose DAB intensity and coverage rise with the HER2
    label, then are misaligned with a fresh :class:`AugmentationSpec`.
    """
    if n_train < 4 or n_test < 4:
        raise DataError("n_train and n_test must be >= 4")
    if image_size < 32:
        raise DataError("image_size must be >= 32")
    out_dir = Path(out_dir)
    try:
        for split in ("train", "test"):
            (out_dir / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from exc

    rng = np.random.default_rng(seed)
    entries = []
    for split, n in (("train", n_train), ("test", n_test)):
        labels = rng.permutation(np.arange(n) % N_CLASSES)
        for i in range(n):
            pair_id = f"{split}_{i:05d}"
            label = int(labels[i])
            r = child_rng(seed, pair_id)
            he, ihc = render_pair(image_size, label, r)
            spec = AugmentationSpec.sample(r)
            ihc = simulate_weak_pairing(to_model(ihc), spec)
            src_rel = f"{split}/{pair_id}_src.png"
            trg_rel = f"{split}/{pair_id}_trg.png"
            save_image(out_dir / src_rel, to_model(he))
            save_image(out_dir / trg_rel, ihc)
            entries.append(ManifestEntry(pair_id, src_rel, trg_rel, label, split))
    manifest = DatasetManifest(entries, image_size, root=out_dir)
    manifest.save()
    logger.info("wrote %d pairs to %s", len(entries), out_dir)
    return manifest


@dataclass
class SplitArrays:
    """One split held in memory: aligned source/target stacks and labels."""

    pair_ids: list
    sources: np.ndarray
    targets: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.pair_ids)


def load_split(manifest, split, normalize=True):
    """Load every pair of ``split``; with ``normalize`` each target is
    illumination-matched to its source."""
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    srcs, trgs = [], []
    for e in entries:
        try:
            s, t = manifest.load_pair(e)
        except (OSError, DataError) as exc:
            raise ManifestError(str(exc), e.pair_id) from exc
        if normalize:
            s, t = normalize_illumination(s, t)
        srcs.append(s)
        trgs.append(t)
    return SplitArrays(
        [e.pair_id for e in entries],
        np.stack(srcs).astype(np.float32),
        np.stack(trgs).astype(np.float32),
        np.array([e.her2_label for e in entries]),
    )
