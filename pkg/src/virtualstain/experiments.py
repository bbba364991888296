"""End-to-end runs: frozen helper networks, ablation presets, loss grid."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from .adversaries import pretrain_sdc
from .classifier import pretrain_classifier
from .data import load_split
from .evaluation import evaluate_suite
from .generator import StainTranslator
from .networks import GeneratorConfig, PatternClassifier, StyleConstrainer
from .training import (
    LOSS_GRID,
    PRESET_CHAIN,
    UNAVAILABLE,
    Checkpoint,
    TrainConfig,
    Trainer,
    apply_grid_cell,
    apply_preset,
)

logger = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    classifier_epochs: int = 20
    sdc_epochs: int = 20
    sdc_channels: int = 16
    seed: int = 0


@dataclass
class FrozenNets:
    """The pattern classifier and the reference constrainer, both frozen.

    Trained once per dataset and shared by every run so that Acc/AUC and
    the style metric are comparable across presets.
    """

    classifier: PatternClassifier
    reference_sdc: StyleConstrainer
    classifier_acc: float = None
    sdc_bacc: float = None
    sdc_channels: int = 16

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.classifier.state_dict(), d / "classifier.pt")
        torch.save(self.reference_sdc.state_dict(), d / "reference_sdc.pt")
        meta = {"classifier_acc": self.classifier_acc, "sdc_bacc": self.sdc_bacc,
                "sdc_channels": self.sdc_channels}
        (d / "frozen.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = json.loads((d / "frozen.json").read_text())
        return cls(load_classifier(d / "classifier.pt"),
                   load_reference_sdc(d / "reference_sdc.pt", meta["sdc_channels"]),
                   meta["classifier_acc"], meta["sdc_bacc"], meta["sdc_channels"])


def _frozen(module):
    module.eval()
    module.requires_grad_(False)
    return module


def load_classifier(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"no pretrained classifier at {path}")
    clf = PatternClassifier()
    clf.load_state_dict(torch.load(path, weights_only=True))
    return _frozen(clf)


def load_reference_sdc(path, base_channels=16):
    if not Path(path).exists():
        raise FileNotFoundError(f"no pretrained constrainer at {path}")
    sdc = StyleConstrainer(base_channels)
    sdc.load_state_dict(torch.load(path, weights_only=True))
    return _frozen(sdc)


def pretrain_frozen(train, test, config=None):
    """Pretrain the classifier and reference constrainer on real targets."""
    config = config or PretrainConfig()
    clf, acc = pretrain_classifier(train.targets, train.labels, config.classifier_epochs,
                                   test_images=test.targets, test_labels=test.labels,
                                   seed=config.seed)
    sdc, bacc = pretrain_sdc(train.targets, train.labels, config.sdc_epochs,
                             test_targets=test.targets, test_labels=test.labels,
                             seed=config.seed, base_channels=config.sdc_channels)
    return FrozenNets(clf, sdc, acc, bacc, config.sdc_channels)


def desk_config(seed=0, **changes):
    """Training settings sized for one CPU core and the 64px synthetic set.

    Narrower networks and batches of 8 need a larger step than the
    published single-image setting; both phases use ``lr=2e-3``, decayed
    linearly over the second half of each phase so the adversarial game
    settles instead of ending mid-oscillation.
    """
    base = TrainConfig(lr=2e-3, lr_decay_fraction=0.5, batch_size=8, disc_channels=8, seed=seed,
                       generator=GeneratorConfig(base_channels=8, image_size=64))
    return base.replace(**changes)


def load_splits(manifest, normalize=True):
    return load_split(manifest, "train", normalize), load_split(manifest, "test", normalize)


def load_translator(ckpt):
    """Rebuild the translator described by a checkpoint and load its weights."""
    config = TrainConfig.from_dict(ckpt.config)
    gcfg = GeneratorConfig(**{**config.generator.__dict__, "seed": config.seed})
    tr = StainTranslator(gcfg)
    nets = tr.subnetworks
    for name, module in nets.items():
        if name not in ckpt.weights:
            raise KeyError(f"checkpoint has no {name} weights")
        module.load_state_dict(ckpt.weights[name])
    return tr.eval()


def run_config(config, train, test, frozen, phase1=None, **trainer_kwargs):
    """Train one configuration end to end and evaluate it.

    Returns ``(report, trainer)``.
    """
    trainer = Trainer(config, train, classifier=frozen.classifier,
                      pretrained_sdc=frozen.reference_sdc, **trainer_kwargs)
    trainer.fit(phase1=phase1)
    report = evaluate_suite(trainer.translator, test, frozen.classifier, frozen.reference_sdc)
    return report, trainer


def run_ablation_preset(name, base_config, train, test, frozen, phase1=None, **trainer_kwargs):
    return run_config(apply_preset(base_config, name), train, test, frozen, phase1,
                      **trainer_kwargs)


def run_ablation_chain(base_config, train, test, frozen, names=PRESET_CHAIN, out_dir=None):
    """Run the preset chain. FAL presets of one seed share a single
    autoencoder phase, which depends only on settings they have in common."""
    reports, phase1 = {}, None
    for name in names:
        cfg = apply_preset(base_config, name)
        kwargs = {}
        if out_dir is not None:
            run_dir = Path(out_dir) / name
            run_dir.mkdir(parents=True, exist_ok=True)
            kwargs = {"log_path": run_dir / "train_log.jsonl"}
        reuse = phase1 if cfg.generator.fal_enabled else None
        report, trainer = run_config(cfg, train, test, frozen, reuse, **kwargs)
        if cfg.generator.fal_enabled and phase1 is None:
            phase1 = trainer.phase1_checkpoint
        if out_dir is not None:
            report.save(Path(out_dir) / name / "report")
        logger.info("preset %s: %s", name, report.aggregates)
        reports[name] = report
    return reports


def run_loss_grid(base_config, train, test, frozen, out_dir=None):
    """Every style/structure loss combination; unavailable cells map to a
    skip message instead of a report."""
    grid = {}
    for cell, terms in LOSS_GRID.items():
        if terms is None:
            grid[cell] = UNAVAILABLE
            continue
        report, _ = run_config(apply_grid_cell(base_config, cell), train, test, frozen)
        if out_dir is not None:
            d = Path(out_dir) / "_".join(cell).replace("+", "")
            d.mkdir(parents=True, exist_ok=True)
            report.save(d / "report")
        grid[cell] = report
    return grid


def comparison_table(reports):
    """Rows of ``name, psnr, ssim, l_sdc, l1_od, acc, auc, vif`` as strings."""
    from .metrics import TABLE_COLUMNS

    lines = ["name," + ",".join(TABLE_COLUMNS)]
    for name, rep in reports.items():
        if isinstance(rep, str):
            lines.append(f"{name}," + ",".join([rep] + [""] * (len(TABLE_COLUMNS) - 1)))
            continue
        vals = []
        for k in TABLE_COLUMNS:
            v = rep.aggregates[k]
            vals.append("" if v is None else f"{v:.6g}")
        lines.append(f"{name}," + ",".join(vals))
    return "\n".join(lines) + "\n"


__all__ = [
    "Checkpoint", "FrozenNets", "PretrainConfig", "comparison_table", "desk_config",
    "load_classifier", "load_reference_sdc", "load_splits", "load_translator", "pretrain_frozen",
    "run_ablation_chain", "run_ablation_preset", "run_config", "run_loss_grid",
]
