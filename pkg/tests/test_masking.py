import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdepth import tensor as T
from maskdepth.masking import (
    MIN_BLOCK_CELLS,
    MaskConfig,
    apply_mask,
    blockwise_mask,
    grid_to_tokens,
    item_seed,
    make_mask,
    random_mask,
)
from maskdepth.tensor import ShapeError, Tensor

# 192x640 image with 16 px cells: a 12x40 grid of 480 cells
H, W = 192, 640
N_CELLS = 480


def test_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(mask_ratio=0.0)
    with pytest.raises(ValueError):
        MaskConfig(mask_ratio=1.0)
    with pytest.raises(ValueError):
        MaskConfig(aspect=1.0)
    with pytest.raises(ValueError):
        MaskConfig(mask_size=0)


def test_grid_shape_uses_floor():
    assert MaskConfig(mask_size=16).grid_shape(H, W) == (12, 40)
    assert MaskConfig(mask_size=16).grid_shape(200, 650) == (12, 40)


def test_blockwise_reaches_target_with_bounded_overshoot():
    cfg = MaskConfig(16, 0.25, 0.3, seed=0)
    m = blockwise_mask(cfg, H, W)
    s_max = 0.25 * N_CELLS
    assert 120 <= m.count <= 120 + MIN_BLOCK_CELLS + 2 * math.sqrt(s_max)
    assert m.grid.shape == (12, 40)


def test_same_seed_same_grid():
    cfg = MaskConfig(seed=12345)
    np.testing.assert_array_equal(blockwise_mask(cfg, H, W).grid, blockwise_mask(cfg, H, W).grid)
    assert not np.array_equal(blockwise_mask(cfg, H, W).grid, blockwise_mask(MaskConfig(seed=12346), H, W).grid)


def test_degenerate_one_cell_target_terminates():
    m = blockwise_mask(MaskConfig(16, 1 / N_CELLS, 0.3, seed=4), H, W)
    assert m.count >= 1
    assert len(m.blocks) == 1


def test_unsatisfiable_configs_raise():
    with pytest.raises(ValueError):
        blockwise_mask(MaskConfig(16, 0.25), 8, 8)
    with pytest.raises(ValueError):
        blockwise_mask(MaskConfig(16, 0.25, min_block=10), 32, 64)
    with pytest.raises(ValueError):
        make_mask("diagonal", MaskConfig(), H, W)


@pytest.mark.parametrize("seed", range(25))
def test_blocks_are_rectangles_of_minimum_area(seed):
    m = blockwise_mask(MaskConfig(16, 0.25, 0.3, seed=seed), H, W)
    union = np.zeros_like(m.grid)
    for b in m.blocks:
        assert b.height * b.width >= MIN_BLOCK_CELLS
        assert 0.3 <= b.aspect_drawn <= 1 / 0.3
        assert 0.3 - 1e-12 <= b.height / b.width <= 1 / 0.3 + 1e-12
        union[b.top : b.top + b.height, b.left : b.left + b.width] = True
    np.testing.assert_array_equal(union, m.grid)


def test_achieved_ratio_law_over_1000_seeds():
    ratios = np.array([blockwise_mask(MaskConfig(16, 0.25, 0.3, seed=s), H, W).achieved_ratio for s in range(1000)])
    assert ratios.min() >= 0.25
    assert ratios.max() <= 0.25 + 64 / 480
    assert 0.25 <= ratios.mean() <= 0.27


def test_random_mask_exact_count():
    assert random_mask(MaskConfig(16, 0.25, seed=1), H, W).count == 120
    assert random_mask(MaskConfig(16, 0.001, seed=1), H, W).count == 1


def test_random_mask_marginal_is_uniform():
    hits = np.zeros((12, 40))
    for s in range(10_000):
        hits += random_mask(MaskConfig(16, 0.25, seed=s), H, W).grid
    p = hits / 10_000
    dev = np.abs(p - 0.25)
    sd = math.sqrt(0.25 * 0.75 / 10_000)
    assert abs(p.mean() - 0.25) < 1e-12
    # a single cell's marginal sits within 0.01 (2.3 sd); the max over 480 cells
    # is held to 5 sd, which a fair sampler exceeds with probability < 3e-4
    assert np.mean(dev < 0.01) > 0.95
    assert dev.mean() < 0.01
    assert dev.max() < 5 * sd


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**63 - 1),
    st.floats(0.05, 0.6),
    st.sampled_from([(64, 64, 8), (96, 160, 16), (48, 80, 4)]),
)
def test_blockwise_invariants_property(seed, ratio, geom):
    h, w, size = geom
    cfg = MaskConfig(size, ratio, 0.3, seed=seed)
    gh, gw = cfg.grid_shape(h, w)
    if ratio * gh * gw < 1:
        return
    m = blockwise_mask(cfg, h, w)
    n = gh * gw
    assert m.count >= ratio * n
    assert m.count <= ratio * n + MIN_BLOCK_CELLS + 2 * math.sqrt(ratio * n) + max(gh, gw)
    px = m.pixels(h, w)
    assert px.shape == (h, w) and px.mean() == pytest.approx(m.achieved_ratio)


def test_item_seed_is_xor():
    assert item_seed(0b1010, 0b0110) == 0b1100
    assert item_seed(7, 0) == 7


def test_grid_to_tokens_repeats_for_double_cells():
    grid = np.array([[True, False], [False, True]])
    tok = grid_to_tokens(grid, 16, 8)
    assert tok.shape == (4, 4)
    np.testing.assert_array_equal(tok[:2, :2], True)
    np.testing.assert_array_equal(tok[:2, 2:], False)
    with pytest.raises(ValueError):
        grid_to_tokens(grid, 12, 8)


# -- token substitution ---------------------------------------------------
def _tokens(b=2, n=6, d=4, seed=0):
    return np.random.default_rng(seed).normal(size=(b, n, d))


def test_empty_mask_is_identity():
    x = _tokens()
    out = apply_mask(x, np.zeros(6, bool), np.ones((1, 4)))
    np.testing.assert_array_equal(out.data, x)


def test_full_mask_gives_mask_token_everywhere():
    tok = np.arange(4.0).reshape(1, 4)
    out = apply_mask(_tokens(), np.ones(6, bool), tok)
    np.testing.assert_array_equal(out.data, np.broadcast_to(tok, (2, 6, 4)))


def test_unmasked_positions_bit_identical_per_item_masks():
    x = _tokens()
    mask = np.array([[1, 0, 0, 1, 0, 0], [0, 0, 0, 0, 1, 1]], bool)
    out = apply_mask(x, mask, np.full((1, 4), 9.0)).data
    assert out.shape == x.shape
    np.testing.assert_array_equal(out[~mask], x[~mask])
    np.testing.assert_array_equal(out[mask], 9.0)


def test_length_mismatch_raises():
    with pytest.raises(ShapeError):
        apply_mask(_tokens(), np.zeros(5, bool), np.ones((1, 4)))


def test_mask_token_receives_gradient_only_when_used():
    tok = Tensor(np.random.default_rng(1).normal(size=(1, 4)), requires_grad=True)
    x = _tokens()
    out = apply_mask(x, np.array([0, 1, 0, 0, 0, 0], bool), tok)
    T.backward(T.sum(out * out))
    np.testing.assert_allclose(tok.grad, 2 * 2 * tok.data)  # two batch items, one masked position each

    tok.grad[...] = 0
    out = apply_mask(x, np.zeros(6, bool), tok)
    T.backward(T.sum(out * out))
    np.testing.assert_array_equal(tok.grad, 0)
