import numpy as np
import pytest

from maskdepth import tensor as T
from maskdepth.optim import AdamState, AdamW, AdamWConfig, adamw_step, step_lr
from maskdepth.tensor import Tensor


def _state(shape=()):
    return AdamState(np.zeros(shape), np.zeros(shape))


def test_first_step_moves_by_lr():
    # bias correction makes the first update lr * sign(g) when wd = 0
    p = adamw_step(np.array([1.0, -2.0]), np.array([0.3, -5.0]), _state((2,)), lr=0.1, weight_decay=0.0, eps=0.0)
    np.testing.assert_allclose(p, [0.9, -1.9])


def test_constant_gradient_step_tends_to_lr():
    p, st = np.array(0.0), _state()
    steps = []
    for _ in range(5000):
        new = adamw_step(p, np.array(1.0), st, lr=1e-3, weight_decay=0.0)
        steps.append(float(p - new))
        p = new
    assert steps[-1] == pytest.approx(1e-3, rel=1e-6)


def test_decoupled_weight_decay_with_zero_gradient():
    p = adamw_step(np.array([2.0]), np.array([0.0]), _state((1,)), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p, [2.0 - 0.1 * 0.5 * 2.0])


def test_matches_reference_loop():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(6, 3))
    p, st = rng.normal(size=3), _state((3,))
    ref, m, v = p.copy(), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p = adamw_step(p, g, st, 0.01, (0.8, 0.9), 0.1, 1e-8)
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        ref = ref - 0.01 * ((m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.9**t)) + 1e-8) + 0.1 * ref)
    np.testing.assert_allclose(p, ref, rtol=1e-13)
    assert st.t == 6


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        adamw_step(np.zeros(2), np.zeros(3), _state((2,)), 0.1)


@pytest.mark.parametrize(
    "kw", [{"lr": -1.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0.0}, {"weight_decay": -0.01}]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AdamWConfig(**kw)


def test_optimizer_minimises_quadratic():
    w = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = AdamW([w], AdamWConfig(lr=0.1, weight_decay=0.0))
    for _ in range(300):
        opt.zero_grad()
        T.backward(T.sum(w * w))
        opt.step()
    assert np.abs(w.data).max() < 0.05


def test_step_schedule():
    assert [step_lr(1e-3, e, 15, 0.1) for e in (0, 14, 15, 19)] == [1e-3, 1e-3, pytest.approx(1e-4), pytest.approx(1e-4)]
