"""Command-line entry point: ``virtualstain <command> [options]``.

Every command takes one JSON experiment config (``--config``) whose values
can be overridden by flags. The resolved config is written next to the
outputs. Relative output paths are resolved against ``$VIRTUALSTAIN_OUT``
when it is set.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .data import DataError, generate_synthetic_dataset, load_manifest
from .training import ConfigError, PRESET_CHAIN, Checkpoint, TrainConfig, TrainingError

logger = logging.getLogger("virtualstain")

OUT_ENV = "VIRTUALSTAIN_OUT"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_PRETRAINED = 5
EXIT_DATA = 6
EXIT_TRAINING = 7
EXIT_EXISTS = 8


class CliError(Exception):
    def __init__(self, message, code=EXIT_FAILURE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------- config

SECTIONS = {
    "data": {"manifest": None, "train": 200, "test": 50, "size": 64, "seed": 1},
    "metrics": {"alpha": 1.0, "fod_threshold": 0.15},
    "pretrain": {"classifier_epochs": 20, "sdc_epochs": 20, "sdc_channels": 16, "seed": 0},
}
TOP_KEYS = set(SECTIONS) | {"train", "output"}


def resolve_output(path):
    p = Path(path)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def load_config(path=None):
    """Parse and validate an experiment config; unknown keys are errors."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise CliError(f"config not found: {path}", EXIT_CONFIG) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_CONFIG) from exc
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object", EXIT_CONFIG)
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise CliError(f"unknown config keys {sorted(unknown)}", EXIT_CONFIG)
    cfg = {}
    for name, defaults in SECTIONS.items():
        section = raw.get(name, {})
        bad = set(section) - set(defaults)
        if bad:
            raise CliError(f"unknown {name} keys {sorted(bad)}", EXIT_CONFIG)
        cfg[name] = {**defaults, **section}
    try:
        cfg["train"] = TrainConfig.from_dict(raw.get("train", {}))
    except (ConfigError, ValueError) as exc:
        raise CliError(f"invalid train section: {exc}", EXIT_CONFIG) from exc
    cfg["output"] = raw.get("output", "runs")
    return cfg


def config_to_json(cfg):
    out = {k: v for k, v in cfg.items() if k != "train"}
    out["train"] = cfg["train"].to_dict()
    return out


def apply_overrides(cfg, args):
    """Flags win over config values."""
    train = cfg["train"]
    if getattr(args, "seed", None) is not None:
        train = train.replace(seed=args.seed)
    if getattr(args, "sdc_mode", None) is not None:
        train = train.replace(sdc=dataclasses.replace(train.sdc, mode=args.sdc_mode))
    if getattr(args, "epochs_phase1", None) is not None:
        train = train.replace(epochs_phase1=args.epochs_phase1)
    if getattr(args, "epochs_phase2", None) is not None:
        train = train.replace(epochs_phase2=args.epochs_phase2)
    cfg["train"] = train
    if getattr(args, "manifest", None) is not None:
        cfg["data"]["manifest"] = args.manifest
    if getattr(args, "out", None) is not None:
        cfg["output"] = args.out
    return cfg


def prepare_out(path, force):
    """Create an output directory, refusing to reuse a non-empty one
    unless ``force``."""
    path = resolve_output(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"{path} exists and is not empty (use --force to overwrite)", EXIT_EXISTS)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path}: {exc}", EXIT_DATA) from exc
    return path


def write_resolved(cfg, out_dir):
    (Path(out_dir) / "resolved_config.json").write_text(
        json.dumps(config_to_json(cfg), indent=1, sort_keys=True))


def _manifest(cfg):
    path = cfg["data"]["manifest"]
    if path is None:
        raise CliError("data.manifest is not set (config or --manifest)", EXIT_CONFIG)
    try:
        return load_manifest(path)
    except (DataError, FileNotFoundError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc


def _frozen(cfg, args):
    from .experiments import FrozenNets

    path = getattr(args, "frozen", None)
    if path is None:
        path = resolve_output(cfg["output"]) / "frozen"
    try:
        return FrozenNets.load(path)
    except FileNotFoundError as exc:
        raise CliError(f"pretrained classifier/constrainer missing at {path}; run "
                       "pretrain-classifier and pretrain-sdc first", EXIT_PRETRAINED) from exc


# -------------------------------------------------------------------- commands


def cmd_gen_data(args):
    out = prepare_out(args.out, args.force)
    try:
        m = generate_synthetic_dataset(args.train, args.test, args.size, args.seed, out)
    except DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    print(Path(m.root) / "manifest.jsonl")
    return EXIT_OK


def _pretrain(args, which):
    from .adversaries import pretrain_sdc
    from .classifier import pretrain_classifier
    from .experiments import load_splits

    cfg = apply_overrides(load_config(args.config), args)
    pre = cfg["pretrain"]
    train, test = load_splits(_manifest(cfg))
    out = resolve_output(cfg["output"]) / "frozen"
    out.mkdir(parents=True, exist_ok=True)
    meta_path = out / "frozen.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta.setdefault("classifier_acc", None)
    meta.setdefault("sdc_bacc", None)
    if which == "classifier":
        net, score = pretrain_classifier(train.targets, train.labels, pre["classifier_epochs"],
                                         test_images=test.targets, test_labels=test.labels,
                                         seed=pre["seed"])
        torch.save(net.state_dict(), out / "classifier.pt")
        meta["classifier_acc"] = score
        print(f"classifier held-out accuracy {score:.4f}")
    else:
        net, score = pretrain_sdc(train.targets, train.labels, pre["sdc_epochs"],
                                  test_targets=test.targets, test_labels=test.labels,
                                  seed=pre["seed"], base_channels=pre["sdc_channels"])
        torch.save(net.state_dict(), out / "reference_sdc.pt")
        meta["sdc_bacc"] = score
        print(f"constrainer held-out balanced accuracy {score:.4f}")
    meta["sdc_channels"] = pre["sdc_channels"]
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_pretrain_classifier(args):
    return _pretrain(args, "classifier")


def cmd_pretrain_sdc(args):
    return _pretrain(args, "sdc")


def cmd_train(args):
    from .experiments import load_splits
    from .training import Trainer, apply_preset

    cfg = apply_overrides(load_config(args.config), args)
    if args.preset:
        cfg["train"] = apply_preset(cfg["train"], args.preset)
    train_cfg = cfg["train"]
    frozen = _frozen(cfg, args)
    train, _ = load_splits(_manifest(cfg), train_cfg.normalize_illumination)
    run = resolve_output(cfg["output"]) / (args.name or train_cfg.preset or "train")
    if args.resume:
        if not run.exists():
            raise CliError(f"nothing to resume at {run}", EXIT_CHECKPOINT)
    else:
        run = prepare_out(run, args.force)
    write_resolved(cfg, run)
    trainer = Trainer(train_cfg, train, classifier=frozen.classifier,
                      pretrained_sdc=frozen.reference_sdc, log_path=run / "train_log.jsonl",
                      checkpoint_dir=run / "checkpoints")
    fal = train_cfg.generator.fal_enabled
    if args.resume:
        ckpt_dir = Path(args.resume)
        try:
            ckpt = Checkpoint.load(ckpt_dir)
        except FileNotFoundError as exc:
            raise CliError(str(exc), EXIT_CHECKPOINT) from exc
        trainer.load_checkpoint(ckpt)
        if ckpt.phase == 1:
            left = train_cfg.epochs_phase1 - ckpt.epoch
            if left > 0:
                trainer.train_phase_autoencoder(epochs=left)
            trainer.phase1_checkpoint = trainer.checkpoint()
            trainer.start_translation_phase()
            trainer.train_phase_translation()
        else:
            left = train_cfg.epochs_phase2 - ckpt.epoch
            if left > 0:
                trainer.train_phase_translation(epochs=left)
    else:
        trainer.fit()
    final = trainer.checkpoint()
    final.save(run / "final")
    print(run / "final")
    if fal:
        logger.info("phase-1 checkpoint at %s", run / "checkpoints" / "phase1_final")
    return EXIT_OK


def cmd_eval(args):
    from .evaluation import evaluate_suite
    from .experiments import load_splits, load_translator

    cfg = apply_overrides(load_config(args.config), args)
    try:
        ckpt = Checkpoint.load(args.ckpt)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from exc
    frozen = _frozen(cfg, args)
    _, test = load_splits(_manifest(cfg))
    translator = load_translator(ckpt)
    m = cfg["metrics"]
    report = evaluate_suite(translator, test, frozen.classifier, frozen.reference_sdc,
                            alpha=m["alpha"], fod_threshold=m["fod_threshold"])
    stem = Path(args.report) if args.report else Path(args.ckpt) / "report"
    report.save(stem)
    print(json.dumps(report.aggregates, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args):
    from .experiments import comparison_table, load_splits, run_ablation_chain, run_loss_grid

    if not args.chain and not args.grid:
        raise CliError("ablate needs --chain table1 or --grid loss", EXIT_USAGE)
    cfg = apply_overrides(load_config(args.config), args)
    frozen = _frozen(cfg, args)
    train, test = load_splits(_manifest(cfg), cfg["train"].normalize_illumination)
    out = prepare_out(resolve_output(cfg["output"]) / ("table1" if args.chain else "loss_grid"),
                      args.force)
    write_resolved(cfg, out)
    if args.chain:
        reports = run_ablation_chain(cfg["train"], train, test, frozen, PRESET_CHAIN, out)
    else:
        grid = run_loss_grid(cfg["train"], train, test, frozen, out)
        reports = {"/".join(k): v for k, v in grid.items()}
    table = comparison_table(reports)
    (out / "comparison.csv").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_report(args):
    from .plots import render_report

    written = render_report(Path(args.runs), Path(args.out) if args.out else None)
    if not written:
        raise CliError(f"no logs or reports found under {args.runs}", EXIT_DATA)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="virtualstain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic weakly-paired dataset")
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--test", type=int, default=50)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--manifest")
        sp.add_argument("--out", help="output root (overrides the config)")
        sp.add_argument("--seed", type=int)

    for name, fn in (("pretrain-classifier", cmd_pretrain_classifier),
                     ("pretrain-sdc", cmd_pretrain_sdc)):
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(func=fn)

    t = sub.add_parser("train", help="run both training phases")
    common(t)
    t.add_argument("--sdc-mode", choices=("adversarial", "pretrained"))
    t.add_argument("--preset", choices=PRESET_CHAIN)
    t.add_argument("--epochs-phase1", type=int)
    t.add_argument("--epochs-phase2", type=int)
    t.add_argument("--name", help="run directory name under the output root")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--frozen", help="directory with the pretrained classifier/constrainer")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", help="output stem for <stem>.json/.csv")
    e.add_argument("--frozen")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation chain or the loss grid")
    common(a)
    a.add_argument("--chain", choices=("table1",))
    a.add_argument("--grid", choices=("loss",))
    a.add_argument("--sdc-mode", choices=("adversarial", "pretrained"))
    a.add_argument("--epochs-phase1", type=int)
    a.add_argument("--epochs-phase2", type=int)
    a.add_argument("--frozen")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="plot loss curves and metric tables")
    r.add_argument("runs", help="directory searched for train_log.jsonl and report.json")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
