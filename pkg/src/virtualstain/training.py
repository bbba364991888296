"""Two-phase training, checkpoints and the ablation presets."""

import copy
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adversaries import SdcConfig, build_discriminator, build_sdc
from .data import AugmentationSpec, simulate_weak_pairing
from .generator import StainTranslator, to_tensor
from .losses import LossWeights, disc_loss, gan_loss, gen_loss, rec_loss
from .networks import GeneratorConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    beta1: float = 0.5
    beta2: float = 0.999
    epochs_phase1: int = 30
    epochs_phase2: int = 30
    seed: int = 0
    disc_channels: int = 32
    augment: bool = True
    augment_p: float = 0.5
    normalize_illumination: bool = True
    checkpoint_every: int = 0
    # last fraction of each phase over which the learning rate decays
    # linearly towards zero; 0 keeps it constant
    lr_decay_fraction: float = 0.0
    preset: str = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    sdc: SdcConfig = field(default_factory=SdcConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs_phase1 < 1 or self.epochs_phase2 < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.lr_decay_fraction < 1.0:
            raise ConfigError("lr_decay_fraction must be in [0, 1)")

    def lr_at(self, epoch, total):
        """Learning rate for 0-based ``epoch`` of a phase lasting ``total``
        epochs: constant, then a linear ramp over the last
        ``round(lr_decay_fraction * total)`` epochs."""
        decay = round(self.lr_decay_fraction * total)
        if decay == 0 or epoch < total - decay:
            return self.lr
        return self.lr * max(total - epoch, 1) / (decay + 1)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["loss_weights"]["enabled"] = sorted(self.loss_weights.enabled)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"loss_weights": LossWeights, "sdc": SdcConfig, "generator": GeneratorConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d and not isinstance(d[key], typ):
                sub = dict(d[key])
                sub_known = {f.name for f in dataclasses.fields(typ)}
                bad = set(sub) - sub_known
                if bad:
                    raise ConfigError(f"unknown {key} keys {sorted(bad)}")
                try:
                    d[key] = typ(**sub)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------- presets

PRESETS = {
    "baseline": ({"cyc"}, False),
    "+ctpc": ({"cyc", "cptc"}, False),
    "+ctpc+sdc": ({"cyc", "cptc", "sdc"}, False),
    "+ctpc+sdc+fal": ({"cyc", "cptc", "sdc"}, True),
    "full": ({"cyc", "cptc", "sdc", "p"}, True),
}
PRESET_CHAIN = tuple(PRESETS)

# (style loss, structure loss) -> enabled terms, or None when the cell needs
# a pretrained perceptual backbone. None of the cells use FAL.
LOSS_GRID = {
    ("GAN+L1", "L1"): {"l1"},
    ("GAN+PSL", "PCL"): None,
    ("GAN+PSL", "Cycle"): None,
    ("GAN+SDC", "PCL"): None,
    ("GAN+SDC", "Cycle"): {"sdc", "cyc"},
}
UNAVAILABLE = "skipped: requires external perceptual backbone"


def apply_preset(config, name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}")
    terms, fal = PRESETS[name]
    return config.replace(
        preset=name,
        loss_weights=config.loss_weights.with_enabled(*terms),
        generator=dataclasses.replace(config.generator, fal_enabled=fal),
    )


def apply_grid_cell(config, cell):
    terms = LOSS_GRID[cell]
    if terms is None:
        raise ConfigError(UNAVAILABLE)
    return config.replace(
        preset="/".join(cell),
        loss_weights=config.loss_weights.with_enabled(*terms),
        generator=dataclasses.replace(config.generator, fal_enabled=False),
    )


# ------------------------------------------------------------------ checkpoint


def _state_bytes(state):
    buf = io.BytesIO()
    torch.save(state, buf)
    return buf.getvalue()


def weight_hash(module):
    """SHA-256 over a module's parameters and buffers, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """Weights, optimizer states, config, progress and RNG state."""

    weights: dict
    optimizers: dict
    config: dict
    epoch: int
    phase: int
    rng_state: dict
    seed: int

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, state in self.weights.items():
            (d / f"{name}.pt").write_bytes(_state_bytes(state))
        for name, state in self.optimizers.items():
            (d / f"optim_{name}.pt").write_bytes(_state_bytes(state))
        meta = {
            "config": self.config,
            "epoch": self.epoch,
            "phase": self.phase,
            "seed": self.seed,
            "rng_state": self.rng_state,
            "weights": sorted(self.weights),
            "optimizers": sorted(self.optimizers),
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta_path = d / "meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no checkpoint at {d}")
        meta = json.loads(meta_path.read_text())
        weights = {n: torch.load(d / f"{n}.pt", weights_only=True) for n in meta["weights"]}
        optims = {n: torch.load(d / f"optim_{n}.pt", weights_only=True) for n in meta["optimizers"]}
        return cls(weights, optims, meta["config"], meta["epoch"], meta["phase"],
                   meta["rng_state"], meta["seed"])


# --------------------------------------------------------------------- trainer


def _set_lr(optimizers, lr):
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


class Trainer:
    """Owns every network and optimizer of one run.

    ``classifier`` (frozen) is required when the pattern or CTPC terms are
    enabled; ``pretrained_sdc`` (frozen) when the constrainer runs in
    pretrained mode.
    """

    def __init__(self, config, train, classifier=None, pretrained_sdc=None, log_path=None,
                 checkpoint_dir=None):
        self.config = config
        self.train = train
        self.classifier = classifier
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.history = []
        self.phase1_checkpoint = None
        self.epoch = 0
        self.phase = 0
        self.step = 0

        w = config.loss_weights
        if classifier is not None:
            classifier.eval()
            classifier.requires_grad_(False)
        self.uses_sdc = "sdc" in w.enabled
        self.sdc_adversarial = self.uses_sdc and config.sdc.mode == "adversarial"
        if self.uses_sdc and config.sdc.mode == "pretrained" and pretrained_sdc is not None:
            pretrained_sdc.eval()
            pretrained_sdc.requires_grad_(False)

        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        gcfg = dataclasses.replace(config.generator, seed=config.seed)
        self.translator = StainTranslator(gcfg)
        self.disc = build_discriminator(config.disc_channels, config.seed + 1)
        self.disc_ae = build_discriminator(config.disc_channels, config.seed + 2) \
            if gcfg.fal_enabled else None
        if self.sdc_adversarial:
            self.sdc = build_sdc(config.disc_channels, config.seed + 3)
        else:
            self.sdc = pretrained_sdc if self.uses_sdc else None

        betas = (config.beta1, config.beta2)
        adam = lambda params: torch.optim.Adam(params, lr=config.lr, betas=betas)  # noqa: E731
        self.optimizers = {}
        if gcfg.fal_enabled:
            self.optimizers["autoencoder"] = adam(self.translator.autoencoder_parameters())
            self.optimizers["disc_autoencoder"] = adam(self.disc_ae.parameters())
        self.optimizers["generator"] = adam(self.translator.generator_parameters())
        adv = list(self.disc.parameters())
        if self.sdc_adversarial:
            adv += list(self.sdc.parameters())
        self.optimizers["adversary"] = adam(adv)

    # ------------------------------------------------------------ bookkeeping

    @property
    def modules(self):
        mods = dict(self.translator.subnetworks)
        mods["discriminator"] = self.disc
        if self.disc_ae is not None:
            mods["discriminator_autoencoder"] = self.disc_ae
        if self.sdc is not None:
            mods["sdc"] = self.sdc
        if self.classifier is not None:
            mods["classifier"] = self.classifier
        return mods

    def weight_hashes(self):
        return {name: weight_hash(m) for name, m in self.modules.items()}

    def checkpoint(self):
        return Checkpoint(
            weights={n: copy.deepcopy(m.state_dict()) for n, m in self.modules.items()},
            optimizers={n: copy.deepcopy(o.state_dict()) for n, o in self.optimizers.items()},
            config=self.config.to_dict(),
            epoch=self.epoch,
            phase=self.phase,
            rng_state=self.rng.bit_generator.state,
            seed=self.config.seed,
        )

    def load_checkpoint(self, ckpt, optimizers=True, rng=True):
        mods = self.modules
        for name, state in ckpt.weights.items():
            if name in mods:
                mods[name].load_state_dict(state)
        if optimizers:
            for name, state in ckpt.optimizers.items():
                if name in self.optimizers:
                    self.optimizers[name].load_state_dict(state)
        if rng:
            self.rng.bit_generator.state = ckpt.rng_state
        self.epoch, self.phase = ckpt.epoch, ckpt.phase

    def _log(self, record):
        self.history.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _check_finite(self, values, where):
        for k, v in values.items():
            if v is not None and not math.isfinite(v):
                raise TrainingError(
                    f"non-finite {k} loss in phase {self.phase}, epoch {self.epoch + 1}, "
                    f"step {self.step} ({where}): {values}"
                )

    def _maybe_checkpoint(self, final=False):
        if self.checkpoint_dir is None:
            return
        k = self.config.checkpoint_every
        if final or (k and self.epoch % k == 0):
            tag = "final" if final else f"epoch{self.epoch:04d}"
            self.checkpoint().save(self.checkpoint_dir / f"phase{self.phase}_{tag}")

    def _augment(self, imgs_list):
        """Apply one random spec per item jointly to every image stack."""
        if not self.config.augment:
            return imgs_list
        out = [s.copy() for s in imgs_list]
        for i in range(len(out[0])):
            spec = AugmentationSpec.sample(self.rng, self.config.augment_p)
            for stack in out:
                stack[i] = simulate_weak_pairing(stack[i], spec)
        return out

    def _simulate(self, trg):
        return np.stack([
            simulate_weak_pairing(t, AugmentationSpec.sample(self.rng, self.config.augment_p))
            for t in trg
        ])

    def epoch_means(self, phase, key):
        by_epoch = {}
        for r in self.history:
            if r["phase"] == phase and r.get(key) is not None:
                by_epoch.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    # ---------------------------------------------------------------- phase 1

    def train_phase_autoencoder(self, epochs=None):
        """Train target encoder, decoder and the phase-1 discriminator on
        targets with the reconstruction objective."""
        if not self.config.generator.fal_enabled:
            raise TrainingError("the autoencoder phase requires FAL")
        if len(self.train) == 0:
            raise TrainingError("empty training split")
        epochs = self.config.epochs_phase1 if epochs is None else epochs
        self.phase = 1
        w = self.config.loss_weights
        tr = self.translator
        opt_g = self.optimizers["autoencoder"]
        opt_d = self.optimizers["disc_autoencoder"]
        stop = self.epoch + epochs
        while self.epoch < stop:
            _set_lr((opt_g, opt_d), self.config.lr_at(self.epoch, self.config.epochs_phase1))
            for idx in _batches(self.rng.permutation(len(self.train)), self.config.batch_size):
                (trg_np,) = self._augment([self.train.targets[idx]])
                trg = to_tensor(trg_np)

                self.disc_ae.requires_grad_(False)
                bd = rec_loss(trg, tr.reconstruct, self.disc_ae, w)
                opt_g.zero_grad()
                bd.total.backward()
                opt_g.step()
                self.disc_ae.requires_grad_(True)

                rec = tr.reconstruct(trg).detach()
                v = w.gan_variant
                loss_d = 0.5 * (gan_loss(self.disc_ae(rec), 0, v) + gan_loss(self.disc_ae(trg), 1, v))
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()

                rec_vals = bd.as_floats()
                record = {"phase": 1, "epoch": self.epoch + 1, "step": self.step,
                          "rec": rec_vals["total"], "gan": rec_vals["gan"],
                          "cha": rec_vals["cha"], "disc": loss_d.item()}
                self._check_finite(record, "autoencoder")
                self._log(record)
                self.step += 1
            self.epoch += 1
            self._maybe_checkpoint()
        self._maybe_checkpoint(final=True)
        return self.checkpoint()

    # ---------------------------------------------------------------- phase 2

    def start_translation_phase(self):
        """Check phase-2 prerequisites and reset the epoch counter."""
        w = self.config.loss_weights
        if {"p", "cptc"} & w.enabled and self.classifier is None:
            raise TrainingError("pattern/CTPC terms need a pretrained classifier")
        if self.uses_sdc and self.sdc is None:
            raise TrainingError("pretrained SDC mode needs a pretrained constrainer")
        self.phase = 2
        self.epoch = 0
        self._freeze_autoencoder()

    def _freeze_autoencoder(self):
        if self.config.generator.fal_enabled:
            self.translator.fal.decoder.requires_grad_(False)
            self.translator.fal.target_encoder.requires_grad_(False)

    def train_phase_translation(self, epochs=None):
        """Alternate generator and adversary steps for the translation phase."""
        if self.phase != 2:
            self.start_translation_phase()
        self._freeze_autoencoder()
        epochs = self.config.epochs_phase2 if epochs is None else epochs
        cfg = self.config
        w = cfg.loss_weights
        tr = self.translator
        opt_g = self.optimizers["generator"]
        opt_a = self.optimizers["adversary"]
        frozen_adv = [self.disc] + ([self.sdc] if self.sdc is not None else [])
        need_sim = self.sdc_adversarial
        stop = self.epoch + epochs
        while self.epoch < stop:
            _set_lr((opt_g, opt_a), cfg.lr_at(self.epoch, cfg.epochs_phase2))
            for idx in _batches(self.rng.permutation(len(self.train)), cfg.batch_size):
                src_np, trg_np = self._augment([self.train.sources[idx], self.train.targets[idx]])
                src, trg = to_tensor(src_np), to_tensor(trg_np)
                sim = to_tensor(self._simulate(trg_np)) if need_sim else None

                for m in frozen_adv:
                    m.requires_grad_(False)
                gen = tr.translate(src)
                bd = gen_loss(src, trg, sim, generate=tr.translate, disc=self.disc, weights=w,
                              sdc=self.sdc, reverse=tr.reverse_generate,
                              classifier=self.classifier, gen=gen)
                opt_g.zero_grad()
                bd.total.backward()
                opt_g.step()
                self.disc.requires_grad_(True)
                if self.sdc_adversarial:
                    self.sdc.requires_grad_(True)

                loss_a, loss_s = disc_loss(src, trg, sim, gen=gen.detach(), disc=self.disc,
                                           weights=w, sdc=self.sdc,
                                           train_sdc=self.sdc_adversarial)
                adv = loss_a if loss_s is None else loss_a + loss_s
                opt_a.zero_grad()
                adv.backward()
                opt_a.step()

                record = {"phase": 2, "epoch": self.epoch + 1, "step": self.step}
                record.update(bd.as_floats())
                record["weighted_cyc"] = w.weight("cyc") * record["cyc"] if "cyc" in record else None
                record["disc"] = loss_a.item()
                record["disc_sdc"] = None if loss_s is None else loss_s.item()
                self._check_finite(record, "translation")
                self._log(record)
                self.step += 1
            self.epoch += 1
            self._maybe_checkpoint()
        self._maybe_checkpoint(final=True)
        return self.checkpoint()

    def fit(self, phase1=None):
        """Both phases in sequence. ``phase1`` reuses a finished autoencoder
        checkpoint of an identically-configured FAL run."""
        if self.config.generator.fal_enabled:
            if phase1 is None:
                phase1 = self.train_phase_autoencoder()
            else:
                self.load_phase1(phase1)
            self.phase1_checkpoint = phase1
        self.start_translation_phase()
        return self.train_phase_translation()

    def load_phase1(self, ckpt):
        if ckpt.phase != 1:
            raise TrainingError("expected a phase-1 checkpoint")
        names = ("target_encoder", "decoder", "discriminator_autoencoder")
        mods = self.modules
        for n in names:
            mods[n].load_state_dict(ckpt.weights[n])
        for n in ("autoencoder", "disc_autoencoder"):
            self.optimizers[n].load_state_dict(ckpt.optimizers[n])
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch, self.phase = ckpt.epoch, 1


def train_phase_autoencoder(config, train, **kwargs):
    trainer = Trainer(config, train, **kwargs)
    return trainer.train_phase_autoencoder(), trainer


def train_phase_translation(config, train, phase1=None, **kwargs):
    trainer = Trainer(config, train, **kwargs)
    if config.generator.fal_enabled:
        if phase1 is None:
            raise TrainingError("FAL translation phase needs a phase-1 checkpoint")
        trainer.load_phase1(phase1)
    trainer.start_translation_phase()
    return trainer.train_phase_translation(), trainer
