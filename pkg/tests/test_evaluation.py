import numpy as np
import pytest

from maskdepth.config import TrainConfig
from maskdepth.evaluation import (
    ARMS,
    AblationResult,
    ArmResult,
    OracleDepthModel,
    ablation_grid,
    arm_config,
    evaluate,
)
from maskdepth.networks import DepthModel
from maskdepth.train import RunRecord

FAST = TrainConfig(
    epochs=1, steps_per_epoch=2, batch_size=2, lr_decay_epoch=1,
    image_h=32, image_w=32, width=16, depth_layers=1, heads=2,
)


class ConstantModel:
    differentiable = False

    def predict_depth(self, images):
        return np.full(np.shape(images)[:-1], 5.0)


def test_oracle_model_scores_perfectly(tiny_dataset):
    rows = evaluate(OracleDepthModel(tiny_dataset), tiny_dataset, "clean")
    assert len(rows) == len(tiny_dataset)
    assert all(r.rmse == 0.0 and r.delta1 == 1.0 for r in rows)
    assert [r.image for r in rows] == list(range(len(tiny_dataset)))


def test_oracle_refuses_unseen_images(tiny_dataset):
    with pytest.raises(KeyError):
        OracleDepthModel(tiny_dataset).predict_depth(tiny_dataset.targets * 0.5)


def test_occlusion_rows_cover_every_region(tiny_dataset):
    rows = evaluate(ConstantModel(), tiny_dataset, "occlusion", {"mask_size": 8})
    n = len(tiny_dataset)
    assert len(rows) == 2 * 3 * n
    for strategy in ("blockwise", "random"):
        for region in ("complete", "unmasked", "masked"):
            sel = [r for r in rows if r.perturbation == strategy and r.region == region]
            assert len(sel) == n and all(r.level == "0.25" for r in sel)


def test_constant_prediction_has_median_baseline_error(tiny_dataset):
    rows = evaluate(ConstantModel(), tiny_dataset, "clean")
    # median scaling turns any constant into the ground-truth median
    for r, g in zip(rows, tiny_dataset.depth):
        g = np.clip(g, 0.1, 100.0)
        assert r.rmse == pytest.approx(np.sqrt(np.mean((np.median(g) - g) ** 2)))


def test_corruption_rows(tiny_dataset):
    rows = evaluate(ConstantModel(), tiny_dataset, "corruption", {"kinds": ("fog", "pixelate"), "severities": (1, 5)})
    assert len(rows) == 2 * 2 * len(tiny_dataset)
    assert {(r.perturbation, r.level) for r in rows} == {("fog", "1"), ("fog", "5"), ("pixelate", "1"), ("pixelate", "5")}
    with pytest.raises(ValueError):
        evaluate(ConstantModel(), tiny_dataset, "corruption", {"kinds": ("snow",)})


def test_attack_rows(tiny_dataset):
    model = DepthModel(FAST.model_config(), 0)
    params = {"untargeted": (1,), "flip_horizontal": (1,), "flip_vertical": ()}
    rows = evaluate(model, tiny_dataset.subset([0, 1]), "attack", params)
    assert [(r.perturbation, r.level) for r in rows] == [("untargeted", "1")] * 2 + [("flip_horizontal", "1")] * 2


def test_bad_suite_arguments(tiny_dataset):
    with pytest.raises(ValueError, match="unknown suite"):
        evaluate(ConstantModel(), tiny_dataset, "weather")
    with pytest.raises(ValueError, match="does not take"):
        evaluate(ConstantModel(), tiny_dataset, "occlusion", {"colour": 1})


# -- ablation ---------------------------------------------------------------
def test_arm_configs():
    base = TrainConfig()
    assert arm_config(base, "B,-") == base
    assert arm_config(base, "16/25%/Complete") == base
    assert arm_config(base, "R,-").depth_mask_strategy == "random"
    both = arm_config(base, "B,R")
    assert (both.mask_target, both.ego_mask_strategy) == ("both", "random")
    assert arm_config(base, "16/40%/Complete").mask_ratio == 0.40
    assert arm_config(base, "32/25%/Complete").mask_size == 2 * base.patch_edge
    assert arm_config(base, "16/25%/Masked").loss_region == "masked_only"
    with pytest.raises(ValueError, match="unknown ablation arm"):
        arm_config(base, "B,X")


def test_arms_reset_fields_of_the_base():
    base = TrainConfig(mask_ratio=0.4, mask_target="both")
    assert arm_config(base, "B,-").mask_ratio == 0.25
    assert arm_config(base, "B,-").mask_target == "depth_only"


def test_ordering_and_table():
    res = AblationResult()
    for arm, clean in (("B,-", 1.0), ("R,-", 2.0), ("zz", 0.5)):
        for seed in (0, 1):
            res.results.append(ArmResult(arm, seed, RunRecord({}), clean + seed, clean, clean))
    assert [a for a, _ in res.ordering()] == ["zz", "B,-", "R,-"]
    assert res.cell("B,-", "clean") == 1.5
    assert np.isnan(res.cell("missing", "clean"))
    table = res.table()
    assert "masking strategy" in table and "other arms" in table
    assert table.splitlines()[-1].startswith("ordering by mean: zz")


def test_tiny_grid_runs_end_to_end(tiny_dataset):
    res = ablation_grid(FAST, tiny_dataset, tiny_dataset, arms=["B,-", "B,B"], seeds=(0,))
    assert res.arms == ["B,-", "B,B"]
    for r in res.results:
        assert r.record.steps == 2
        assert set(r.record.metrics) == {"clean_rmse", "blockwise_rmse", "random_rmse"}
        assert np.isfinite(r.mean)
    assert set(ARMS) >= set(res.arms)
