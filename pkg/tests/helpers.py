"""Finite-difference oracle and the primitive-op registry shared by the test suites."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from maskdepth import tensor as T
from maskdepth.tensor import Tensor

H = 1e-5


def numeric_grad(f: Callable[..., float], arrays: Sequence[np.ndarray], h: float = H) -> list[np.ndarray]:
    """Central differences of a scalar function of several arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(*arrays)
            flat[i] = old - h
            fm = f(*arrays)
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build(*leaves)
    T.backward(out)
    return out.item(), [leaf.grad for leaf in leaves]


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|n|, floor)``."""
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor), initial=0.0))


def grad_check(build: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = H) -> float:
    """Worst elementwise relative error between backward and central differences."""

    def value(*xs):
        with T.no_grad():
            return build(*[Tensor(x) for x in xs]).item()

    _, ana = analytic_grad(build, arrays)
    num = numeric_grad(value, arrays, h)
    return max(rel_error(a, n) for a, n in zip(ana, num))


def fd_check(build: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = H, tol: float = 1e-8):
    """``(worst relative error, smooth)`` for one instance.

    Central differences are only an oracle where the function is smooth.
    ``smooth`` is False when some second difference ``f(x+h) - 2 f(x) + f(x-h)``
    sits far above the ``h**2`` curvature scale, which reveals a piecewise
    boundary inside the stencil (validity toggles, bilinear cell edges,
    min switches).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value():
        with T.no_grad():
            return build(*[Tensor(x) for x in arrays]).item()

    _, ana = analytic_grad(build, arrays)
    f0 = value()
    smooth = True
    worst = 0.0
    for a, g in zip(arrays, ana):
        flat = a.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = value()
            flat[i] = old - h
            fm = value()
            flat[i] = old
            num[i] = (fp - fm) / (2 * h)
            if abs(fp - 2 * f0 + fm) > tol * max(1.0, abs(f0)):
                smooth = False
        worst = max(worst, rel_error(g.reshape(-1), num))
    return worst, smooth


def smooth_fd_errors(make: Callable[[int], tuple], count: int, max_draws: int | None = None):
    """Errors of the first ``count`` smooth instances from ``make(seed)`` and the number rejected."""
    errs, rejected, seed = [], 0, 0
    max_draws = max_draws or 3 * count
    while len(errs) < count and seed < max_draws:
        err, smooth = fd_check(*make(seed))
        seed += 1
        if smooth:
            errs.append(err)
        else:
            rejected += 1
    return errs, rejected


def weighted(op: Callable[..., Tensor], w: np.ndarray) -> Callable[..., Tensor]:
    """Scalarise an op's output with fixed random weights so every output element matters."""
    return lambda *xs: T.sum(op(*xs) * w)


# ----------------------------------------------------------------------
# primitive registry: name -> builder(rng) -> (op, inputs)
# Input domains keep clear of kinks and zero-derivative points so that the
# finite-difference oracle is well conditioned.
# ----------------------------------------------------------------------
def _u(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _shape(rng, rank=None):
    rank = rank or int(rng.integers(1, 4))
    return tuple(int(n) for n in rng.integers(1, 4, size=rank))


def _away(rng, shape, lo, hi, gap):
    """Samples in [lo, hi] at least ``gap`` away from zero."""
    x = rng.uniform(gap, max(abs(lo), abs(hi)), size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _pair_apart(rng, shape, gap=0.1):
    a = _u(rng, shape)
    b = a + _away(rng, shape, -1, 1, gap)
    return a, b


def _clamp_input(rng, shape):
    """Magnitudes in [0.05, 0.45] or [0.55, 0.95]: clear of both clamp edges."""
    mag = rng.uniform(0.05, 0.45, size=shape) + 0.5 * rng.integers(0, 2, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _shift_case(rng):
    off = int(rng.integers(-2, 3))
    return (lambda a: T.shift(a, off, axis=1)), [_u(rng, (3, 4))]


PRIMITIVES: dict[str, Callable] = {
    "add": lambda r: (T.add, [_u(r, (3, 4)), _u(r, (4,))]),
    "sub": lambda r: (T.sub, [_u(r, (2, 3)), _u(r, (2, 1))]),
    "mul": lambda r: (T.mul, [_u(r, (3, 4)), _u(r, (3, 1))]),
    "div": lambda r: (T.div, [_u(r, (3, 4)), _u(r, (4,), 0.5, 2.0)]),
    "neg": lambda r: (T.neg, [_u(r, _shape(r))]),
    "exp": lambda r: (T.exp, [_u(r, _shape(r))]),
    "log": lambda r: (T.log, [_u(r, _shape(r), 0.5, 2.0)]),
    "sigmoid": lambda r: (T.sigmoid, [_u(r, _shape(r), -3, 3)]),
    "pow_scalar": lambda r: ((lambda a: T.pow(a, 2.5)), [_u(r, _shape(r), 0.5, 2.0)]),
    "pow_tensor": lambda r: (T.pow, [_u(r, (3, 2), 1.2, 2.0), _u(r, (3, 2), 0.5, 2.0)]),
    "sqrt": lambda r: (T.sqrt, [_u(r, _shape(r), 0.5, 2.0)]),
    "clamp": lambda r: ((lambda a: T.clamp(a, -0.5, 0.5)), [_clamp_input(r, (4, 3))]),
    "abs": lambda r: (T.abs, [_away(r, _shape(r), -1, 1, 0.05)]),
    "sin": lambda r: (T.sin, [_u(r, _shape(r))]),
    "cos": lambda r: (T.cos, [_u(r, _shape(r), 0.2, 1.2)]),
    "gelu": lambda r: (T.gelu, [_u(r, _shape(r), -0.4, 2.0)]),
    "minimum": lambda r: (T.minimum, list(_pair_apart(r, (3, 4)))),
    "maximum": lambda r: (T.maximum, list(_pair_apart(r, (3, 4)))),
    "matmul": lambda r: (T.matmul, [_u(r, (4, 5)), _u(r, (5, 3))]),
    "matmul_batched": lambda r: (T.matmul, [_u(r, (2, 3, 4)), _u(r, (4, 2))]),
    "sum_axis": lambda r: ((lambda a: T.sum(a, axis=1)), [_u(r, (2, 3, 4))]),
    "mean_axes": lambda r: ((lambda a: T.mean(a, axis=(0, 2), keepdims=True)), [_u(r, (2, 3, 4))]),
    "reshape": lambda r: ((lambda a: T.reshape(a, (4, 3))), [_u(r, (2, 6))]),
    "transpose": lambda r: ((lambda a: T.transpose(a, (2, 0, 1))), [_u(r, (2, 3, 4))]),
    "slice": lambda r: ((lambda a: T.slice_axis(a, 1, 1, 3)), [_u(r, (2, 4))]),
    "getitem_fancy": lambda r: ((lambda a: a[np.array([0, 2, 2]), 1:]), [_u(r, (3, 3))]),
    "concat": lambda r: ((lambda a, b: T.concat([a, b], axis=1)), [_u(r, (2, 3)), _u(r, (2, 2))]),
    "stack": lambda r: ((lambda a, b: T.stack([a, b], axis=0)), [_u(r, (2, 3)), _u(r, (2, 3))]),
    "pad_constant": lambda r: ((lambda a: T.pad(a, [(1, 2), (0, 1)], value=0.3)), [_u(r, (2, 3))]),
    "pad_edge": lambda r: ((lambda a: T.pad(a, [(2, 1), (1, 1)], mode="edge")), [_u(r, (2, 3))]),
    "shift": lambda r: _shift_case(r),
    "flip": lambda r: ((lambda a: T.flip(a, 0)), [_u(r, (3, 2))]),
    "gather": lambda r: ((lambda a: T.gather(a, np.array([[0, 5], [5, 3]]))), [_u(r, (2, 3))]),
    "where": lambda r: ((lambda a, b: T.where(np.array([[True, False, True]]), a, b)), [_u(r, (2, 3)), _u(r, (2, 3))]),
    "softmax": lambda r: ((lambda a: T.softmax(a, axis=-1)), [_u(r, (3, 5), -2, 2)]),
    "layer_norm": lambda r: (
        (lambda a, g, b: T.layer_norm(a, g, b, eps=1e-5)),
        [_u(r, (3, 5), -2, 2), _u(r, (5,), 0.5, 1.5), _u(r, (5,))],
    ),
}


def primitive_instance(name: str, rng: np.random.Generator):
    op, inputs = PRIMITIVES[name](rng)
    with T.no_grad():
        out_shape = op(*[Tensor(x) for x in inputs]).shape
    w = rng.uniform(0.5, 1.5, size=out_shape)
    return weighted(op, w), inputs


def depth_loss_case(seed: int, size: int = 8):
    """Random 8x8 view-synthesis instance; leaves are depth and both poses."""
    from maskdepth.geometry import Intrinsics, Pose
    from maskdepth.losses import depth_loss

    K = Intrinsics.default(size, size)
    r = np.random.default_rng([seed, 3])
    tgt, s1, s2 = (r.uniform(0, 1, (1, size, size, 3)) for _ in range(3))
    d = r.uniform(1.0, 3.0, (1, size, size))
    rot = r.normal(0, 0.02, (2, 1, 3))
    tr = r.normal(0, 0.05, (2, 1, 3))

    def build(d, r0, t0, r1, t1):
        return depth_loss(tgt, [s1, s2], d, [Pose(r0, t0), Pose(r1, t1)], K)

    return build, [d, rot[0], tr[0], rot[1], tr[1]]


# ----------------------------------------------------------------------
# composite ops: name -> make(seed) -> (build, inputs)
# ----------------------------------------------------------------------
def _rodrigues_case(seed):
    from maskdepth.geometry import axis_angle_to_matrix

    r = np.random.default_rng([seed, 21])
    w = r.uniform(0.5, 1.5, size=(3, 3))
    scale = 1e-9 if seed % 10 == 0 else r.uniform(0.05, 3.0)  # every tenth instance hits the Taylor branch
    v = r.normal(size=3)
    return (lambda a: T.sum(axis_angle_to_matrix(a) * w)), [v * scale / np.linalg.norm(v)]


def _bilinear_case(seed):
    from maskdepth.geometry import bilinear_sample

    r = np.random.default_rng([seed, 22])
    w = r.uniform(0.5, 1.5, size=(1, 3, 4, 2))
    build = lambda s, u, v: T.sum(bilinear_sample(s, u, v)[0] * w)
    return build, [r.uniform(size=(1, 5, 5, 2)), r.uniform(0.2, 3.8, (1, 3, 4)), r.uniform(0.2, 3.8, (1, 3, 4))]


def _synthesis_case(seed):
    from maskdepth.geometry import Intrinsics, Pose, synthesize_target

    r = np.random.default_rng([seed, 23])
    K = Intrinsics.default(6, 6)
    src = r.uniform(size=(1, 6, 6, 3))
    w = r.uniform(0.5, 1.5, size=(1, 6, 6, 3))
    build = lambda d, rot, t: T.sum(synthesize_target(src, d, Pose(rot, t), K)[0] * w)
    return build, [r.uniform(1, 3, (1, 6, 6)), r.normal(0, 0.02, (1, 3)), r.normal(0, 0.05, (1, 3))]


def _ssim_case(seed):
    from maskdepth.losses import ssim_loss

    r = np.random.default_rng([seed, 24])
    return ssim_loss, [r.uniform(size=(1, 4, 4, 3)), r.uniform(size=(1, 4, 4, 3))]


def _smoothness_case(seed):
    from maskdepth.losses import smoothness_loss

    r = np.random.default_rng([seed, 25])
    tgt = r.uniform(size=(1, 5, 6, 3))
    return (lambda d: smoothness_loss(d, tgt)), [r.uniform(0.1, 1.0, (1, 5, 6))]


COMPOSITES: dict[str, Callable] = {
    "axis_angle_to_matrix": _rodrigues_case,
    "bilinear_sample": _bilinear_case,
    "synthesize_target": _synthesis_case,
    "ssim_loss": _ssim_case,
    "smoothness_loss": _smoothness_case,
    "depth_loss": depth_loss_case,
}
