"""Presets, phase isolation, freezing, checkpoints and resume."""

import json

import numpy as np
import pytest
import torch

from virtualstain.adversaries import SdcConfig, build_sdc
from virtualstain.data import generate_synthetic_dataset, load_split
from virtualstain.losses import LossWeights
from virtualstain.networks import GeneratorConfig, PatternClassifier
from virtualstain.training import (
    LOSS_GRID,
    PRESET_CHAIN,
    PRESETS,
    UNAVAILABLE,
    Checkpoint,
    ConfigError,
    TrainConfig,
    Trainer,
    TrainingError,
    apply_grid_cell,
    apply_preset,
    train_phase_autoencoder,
    train_phase_translation,
    weight_hash,
)

SIZE = 32


@pytest.fixture(scope="module")
def split(tmp_path_factory):
    m = generate_synthetic_dataset(6, 4, SIZE, 11, tmp_path_factory.mktemp("tiny"))
    return load_split(m, "train")


@pytest.fixture(scope="module")
def frozen():
    torch.manual_seed(0)
    clf = PatternClassifier(widths=(4, 8, 8, 8))
    clf.requires_grad_(False)
    sdc = build_sdc(4, 9)
    sdc.requires_grad_(False)
    return clf, sdc


def tiny_config(preset="full", **kw):
    base = TrainConfig(lr=1e-3, batch_size=3, epochs_phase1=1, epochs_phase2=1, disc_channels=4,
                       generator=GeneratorConfig(base_channels=4, image_size=SIZE))
    return apply_preset(base, preset).replace(**kw)


def trainer(split, frozen, preset="full", **kw):
    clf, sdc = frozen
    return Trainer(tiny_config(preset, **kw), split, classifier=clf, pretrained_sdc=sdc)


def changed(before, after):
    return {k for k in before if before[k] != after.get(k)}


# ------------------------------------------------------------- presets


def test_preset_mapping():
    base = TrainConfig()
    b = apply_preset(base, "baseline")
    assert b.loss_weights.enabled == {"cyc"} and not b.generator.fal_enabled
    f = apply_preset(base, "full")
    assert f.loss_weights.enabled == {"cyc", "cptc", "sdc", "p"} and f.generator.fal_enabled
    assert f.preset == "full"
    with pytest.raises(ConfigError):
        apply_preset(base, "+pc")


def test_presets_form_strict_inclusion_chain():
    assert PRESET_CHAIN == ("baseline", "+ctpc", "+ctpc+sdc", "+ctpc+sdc+fal", "full")
    feats = [PRESETS[n][0] | ({"fal"} if PRESETS[n][1] else set()) for n in PRESET_CHAIN]
    for a, b in zip(feats, feats[1:]):
        assert a < b and len(b - a) == 1


def test_loss_grid_mapping():
    base = TrainConfig()
    assert len(LOSS_GRID) == 5
    for cell, terms in LOSS_GRID.items():
        if terms is None:
            with pytest.raises(ConfigError, match=UNAVAILABLE):
                apply_grid_cell(base, cell)
    pix = apply_grid_cell(base, ("GAN+L1", "L1"))
    assert pix.loss_weights.enabled == {"l1"} and not pix.generator.fal_enabled
    sdc_cycle = apply_grid_cell(base, ("GAN+SDC", "Cycle"))
    main = apply_preset(base, "+ctpc+sdc")
    assert sdc_cycle.loss_weights.enabled == main.loss_weights.enabled - {"cptc"}
    assert sdc_cycle.generator == main.generator


# -------------------------------------------------------------- config


def test_config_round_trip_and_validation():
    cfg = tiny_config()
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"loss_weights": {"lambda_style": 1.0}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"sdc": {"mode": "joint"}})
    for bad in (dict(lr=0.0), dict(epochs_phase1=0), dict(epochs_phase2=0), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_defaults_match_declared_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.beta1, cfg.beta2) == (1e-4, 1, 0.5, 0.999)
    assert (cfg.epochs_phase1, cfg.epochs_phase2) == (30, 30)
    w = LossWeights()
    assert (w.lambda_cha, w.lambda_sdc, w.lambda_cyc, w.lambda_p, w.lambda_cptc) == \
        (100, 10, 10, 20, 2.5)


def test_lr_schedule():
    const = TrainConfig(lr=1e-3)
    assert all(const.lr_at(e, 30) == 1e-3 for e in range(30))
    cfg = TrainConfig(lr=1.0, lr_decay_fraction=0.5)
    ramp = [cfg.lr_at(e, 30) for e in range(30)]
    assert ramp[:15] == [1.0] * 15
    assert ramp[15:] == [(30 - e) / 16 for e in range(15, 30)]
    assert all(a > b > 0 for a, b in zip(ramp[14:], ramp[15:]))
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay_fraction=1.0)


def test_lr_schedule_reaches_the_optimizers(split, frozen):
    t = trainer(split, frozen, lr_decay_fraction=0.5, epochs_phase1=2, epochs_phase2=2)
    t.train_phase_autoencoder()
    assert t.optimizers["autoencoder"].param_groups[0]["lr"] == 1e-3 / 2
    t.train_phase_translation()
    for name in ("generator", "adversary"):
        assert t.optimizers[name].param_groups[0]["lr"] == 1e-3 / 2


# ------------------------------------------------------- prerequisites


def test_missing_prerequisites(split, frozen):
    clf, sdc = frozen
    t = Trainer(tiny_config("full"), split)
    with pytest.raises(TrainingError, match="classifier"):
        t.start_translation_phase()
    cfg = tiny_config("+ctpc+sdc", sdc=SdcConfig("pretrained"))
    t = Trainer(cfg, split, classifier=clf)
    with pytest.raises(TrainingError, match="constrainer"):
        t.start_translation_phase()
    with pytest.raises(TrainingError):
        Trainer(tiny_config("baseline"), split).train_phase_autoencoder()
    with pytest.raises(TrainingError):
        train_phase_translation(tiny_config("full"), split, classifier=clf)


# --------------------------------------------------- phase isolation


def test_phase1_updates_only_the_autoencoder(split, frozen):
    t = trainer(split, frozen)
    before = t.weight_hashes()
    t.train_phase_autoencoder()
    assert changed(before, t.weight_hashes()) == {
        "target_encoder", "decoder", "discriminator_autoencoder"}


@pytest.mark.parametrize("mode", ["adversarial", "pretrained"])
def test_phase2_freeze_contracts(split, frozen, mode):
    t = trainer(split, frozen, sdc=SdcConfig(mode))
    t.train_phase_autoencoder()
    before = t.weight_hashes()
    t.train_phase_translation()
    diff = changed(before, t.weight_hashes())
    expect = {"source_encoder", "approximator", "reverse_generator", "discriminator"}
    if mode == "adversarial":
        expect.add("sdc")
    assert diff == expect
    assert before["classifier"] == weight_hash(frozen[0])


def test_baseline_phase2_updates(split, frozen):
    t = trainer(split, frozen, "baseline")
    before = t.weight_hashes()
    t.train_phase_translation()
    assert changed(before, t.weight_hashes()) == {
        "baseline_generator", "reverse_generator", "discriminator"}


def test_one_generator_and_one_adversary_step_per_batch(split, frozen):
    t = trainer(split, frozen)
    t.train_phase_autoencoder()
    counts = {}
    for name, opt in t.optimizers.items():
        orig = opt.step

        def step(*a, _n=name, _o=orig, **k):
            counts[_n] = counts.get(_n, 0) + 1
            return _o(*a, **k)

        opt.step = step
    t.train_phase_translation()
    n_batches = -(-len(split) // t.config.batch_size)
    assert counts == {"generator": n_batches, "adversary": n_batches}


# ------------------------------------------------------ checkpoints


def test_checkpoint_byte_stable(split, frozen, tmp_path):
    t = trainer(split, frozen)
    ckpt = t.train_phase_autoencoder()
    ckpt.save(tmp_path / "a")
    Checkpoint.load(tmp_path / "a").save(tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "missing")


def test_phase1_resume_is_bit_identical(split, frozen, tmp_path):
    straight = trainer(split, frozen)
    straight.train_phase_autoencoder(epochs=2)
    first = trainer(split, frozen)
    first.train_phase_autoencoder(epochs=1).save(tmp_path / "c")
    resumed = trainer(split, frozen)
    resumed.load_checkpoint(Checkpoint.load(tmp_path / "c"))
    resumed.train_phase_autoencoder(epochs=1)
    assert resumed.weight_hashes() == straight.weight_hashes()
    assert resumed.history[0]["rec"] == straight.history[len(first.history)]["rec"]


def test_phase2_resume_is_bit_identical(split, frozen, tmp_path):
    def fresh():
        t = trainer(split, frozen, lr_decay_fraction=0.5, epochs_phase2=2)
        t.train_phase_autoencoder()
        t.start_translation_phase()
        return t

    straight = fresh()
    straight.train_phase_translation(epochs=2)
    first = fresh()
    first.train_phase_translation(epochs=1).save(tmp_path / "c")
    resumed = trainer(split, frozen, lr_decay_fraction=0.5, epochs_phase2=2)
    resumed.load_checkpoint(Checkpoint.load(tmp_path / "c"))
    resumed.train_phase_translation(epochs=1)
    assert resumed.epoch == 2
    assert resumed.weight_hashes() == straight.weight_hashes()


def test_checkpoint_dir_and_log(split, frozen, tmp_path):
    clf, sdc = frozen
    log = tmp_path / "log.jsonl"
    t = Trainer(tiny_config(checkpoint_every=1, epochs_phase2=2), split, classifier=clf,
                pretrained_sdc=sdc, log_path=log, checkpoint_dir=tmp_path / "ck")
    t.fit()
    names = sorted(p.name for p in (tmp_path / "ck").iterdir())
    assert names == ["phase1_epoch0001", "phase1_final", "phase2_epoch0001", "phase2_epoch0002",
                     "phase2_final"]
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert records == t.history
    assert {r["phase"] for r in records} == {1, 2}
    assert all({"step", "phase", "epoch"} <= set(r) for r in records)
    assert len(t.epoch_means(2, "gan")) == 2


def test_functional_entry_points(split, frozen):
    clf, sdc = frozen
    cfg = tiny_config()
    p1, _ = train_phase_autoencoder(cfg, split)
    assert p1.phase == 1
    p2, t = train_phase_translation(cfg, split, phase1=p1, classifier=clf)
    assert p2.phase == 2 and p2.epoch == 1
    assert weight_hash(t.translator.fal.decoder) == \
        weight_hash_from_state(p1.weights["decoder"])


def weight_hash_from_state(state):
    m = torch.nn.Module()
    m.state_dict = lambda: state
    return weight_hash(m)


# ------------------------------------------------------- abort path


def test_non_finite_loss_aborts(split, frozen):
    t = trainer(split, frozen)
    with torch.no_grad():
        next(t.translator.fal.target_encoder.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite .* phase 1, epoch 1, step 0"):
        t.train_phase_autoencoder()


def test_determinism_same_seed(split, frozen):
    a, b = trainer(split, frozen), trainer(split, frozen)
    for t in (a, b):
        t.train_phase_autoencoder()
        t.train_phase_translation()
    assert a.weight_hashes() == b.weight_hashes()
    assert a.history == b.history
    c = trainer(split, frozen, seed=1)
    assert c.weight_hashes() != a.weight_hashes()


def test_augment_applies_one_spec_jointly(split, frozen):
    t = trainer(split, frozen, augment_p=1.0)
    x = split.sources[:3].copy()
    a, b = t._augment([x, x.copy()])
    assert np.array_equal(a, b) and not np.array_equal(a, x)
    off = trainer(split, frozen, augment=False)
    assert off._augment([x])[0] is x
