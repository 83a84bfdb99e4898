import hashlib

import numpy as np
import pytest

from maskdepth import tensor as T
from maskdepth import train as train_mod
from maskdepth.config import TrainConfig, dump_config, load_config, parse_overrides
from maskdepth.networks import DepthModel
from maskdepth.objective import triplet_loss
from maskdepth.train import RunRecord, TrainingDiverged, batch_loss, initial_loss, schedule, train

FAST = TrainConfig(
    epochs=3, steps_per_epoch=2, batch_size=2, lr_decay_epoch=2,
    image_h=32, image_w=32, width=16, depth_layers=1, heads=2,
)


# -- configuration -------------------------------------------------------------
def test_defaults_follow_training_plan():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr_decay_epoch, cfg.lr_decay_factor) == (20, 15, 0.1)
    assert (cfg.mask_ratio, cfg.mask_aspect, cfg.mask_target, cfg.loss_region) == (0.25, 0.3, "depth_only", "complete")
    assert cfg.mask_size == cfg.patch_edge


@pytest.mark.parametrize(
    "kw",
    [
        {"mask_target": "decoder"},
        {"depth_mask_strategy": "stripes"},
        {"loss_region": "partial"},
        {"mask_size": 12},
        {"loss_region": "masked_only", "mask_target": "none"},
        {"epochs": 0},
        {"width": 30},
        {"ssim_weight": -1.0},
    ],
)
def test_invalid_configs_raise(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nepochs = 3\n\n[mask]\nmask_target = both\n\n[model]\nper_position_mask_tokens = yes\n")
    cfg = load_config(path, ["optim.lr=5e-4", "seed=7"])
    assert (cfg.epochs, cfg.mask_target, cfg.lr, cfg.seed) == (3, "both", 5e-4, 7)
    assert cfg.per_position_mask_tokens is True


def test_dump_load_round_trip(tmp_path):
    cfg = FAST.replace(mask_target="both", ego_mask_strategy="random", seed=4)
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.ini") == cfg


def test_every_field_is_addressable():
    for name, value in TrainConfig().to_dict().items():
        text = str(value).lower() if isinstance(value, bool) else str(value)
        assert parse_overrides([f"{name}={text}"]) == {name: value}


def test_config_errors(tmp_path):
    with pytest.raises(KeyError):
        parse_overrides(["nonsense=1"])
    with pytest.raises(KeyError):
        parse_overrides(["mask.lr=1"])
    with pytest.raises(ValueError):
        parse_overrides(["epochs"])
    with pytest.raises(ValueError):
        parse_overrides(["per_position_mask_tokens=maybe"])
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.ini")
    (tmp_path / "bad.ini").write_text("[extras]\nx = 1\n")
    with pytest.raises(KeyError):
        load_config(tmp_path / "bad.ini")


# -- objective plumbing ------------------------------------------------------------
def test_unmasked_arm_is_plain_objective(tiny_dataset):
    cfg = FAST.replace(mask_target="none")
    model = DepthModel(cfg.model_config(), 0)
    f = tiny_dataset.frames[:2]
    with T.no_grad():
        a = batch_loss(model, cfg, f, tiny_dataset.K).item()
        b = triplet_loss(model, f[:, 0], f[:, 1], f[:, 2], tiny_dataset.K, cfg.loss_weights()).item()
    assert a == b


def test_depth_masking_changes_the_loss(tiny_dataset):
    model = DepthModel(FAST.model_config(), 0)
    f = tiny_dataset.frames[:2]
    with T.no_grad():
        masked = batch_loss(model, FAST, f, tiny_dataset.K).item()
        plain = batch_loss(model, FAST.replace(mask_target="none"), f, tiny_dataset.K).item()
    assert masked != plain


def test_masks_are_deterministic_per_step():
    a = train_mod._step_masks(FAST, 11, 5, 3, "blockwise")
    b = train_mod._step_masks(FAST, 11, 5, 3, "blockwise")
    c = train_mod._step_masks(FAST, 13, 5, 3, "blockwise")
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])
    assert a[0].shape == (3, 16) and a[1].shape == (3, 32, 32)


def test_common_loss_updates_both_networks(tiny_dataset):
    cfg = FAST.replace(epochs=1, steps_per_epoch=1)
    before = DepthModel(cfg.model_config(), cfg.seed)
    after, _ = train(cfg, tiny_dataset)
    for net in ("depth_net", "ego_net"):
        a = dict(getattr(before, net).named_parameters())
        b = dict(getattr(after, net).named_parameters())
        changed = [n for n in a if not np.array_equal(a[n].data, b[n].data)]
        assert len(changed) == len(a), f"{net}: untouched {sorted(set(a) - set(changed))}"


# -- training loop -------------------------------------------------------------------
def test_schedule():
    assert schedule(TrainConfig(), 400) == 100
    assert schedule(TrainConfig(steps_per_epoch=7), 400) == 7
    assert schedule(TrainConfig(batch_size=8), 3) == 1


def test_lr_decays_at_configured_epoch(tiny_dataset):
    _, rec = train(FAST, tiny_dataset)
    assert rec.epoch_lr == [1e-3, 1e-3, pytest.approx(1e-4)]
    assert rec.steps == 6 and len(rec.epoch_losses) == 3


def test_same_config_and_seed_reproduce_exactly(tiny_dataset, tmp_path):
    cfg = FAST.replace(checkpoint=str(tmp_path / "a.ckpt"), record=str(tmp_path / "a.json"))
    _, r1 = train(cfg, tiny_dataset)
    _, r2 = train(cfg.replace(checkpoint=str(tmp_path / "b.ckpt"), record=""), tiny_dataset)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert r1.epoch_losses == r2.epoch_losses
    assert r1.checkpoint_sha256 == hashlib.sha256((tmp_path / "a.ckpt").read_bytes()).hexdigest()
    _, r3 = train(FAST.replace(seed=1), tiny_dataset)
    assert r3.checkpoint_sha256 != r1.checkpoint_sha256


def test_record_round_trip(tiny_dataset, tmp_path):
    _, rec = train(FAST.replace(epochs=1, record=str(tmp_path / "r" / "rec.json")), tiny_dataset)
    back = RunRecord.load(tmp_path / "r" / "rec.json")
    assert back == rec
    assert back.config["epochs"] == 1


def test_initial_loss_is_fixed(tiny_dataset):
    model = DepthModel(FAST.model_config(), 0)
    assert initial_loss(model, FAST, tiny_dataset) == initial_loss(model, FAST, tiny_dataset)


def test_divergence_is_reported(tiny_dataset, monkeypatch):
    real = train_mod.batch_loss

    def poisoned(*args, **kw):
        loss, parts = real(*args, **kw)
        return loss * float("nan"), parts

    monkeypatch.setattr(train_mod, "batch_loss", lambda *a, **k: poisoned(*a, **k) if k.get("return_parts") else real(*a, **k))
    with pytest.raises(TrainingDiverged, match="non-finite loss at step 0"):
        train(FAST, tiny_dataset)


def test_dataset_errors(tiny_dataset, tmp_path):
    with pytest.raises(ValueError, match="no dataset"):
        train(FAST)
    with pytest.raises(FileNotFoundError):
        train(FAST.replace(dataset=str(tmp_path / "missing")))
    with pytest.raises(ValueError, match="32x32"):
        train(TrainConfig(epochs=1, steps_per_epoch=1), tiny_dataset)
