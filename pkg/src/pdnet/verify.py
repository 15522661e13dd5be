"""Self-verification: finite-difference gradient checks for every
differentiable operator and for the full model end to end.

The double tier runs grad_check literally in float64 (eps 1e-3, tolerance
1e-5).  The float tier compares the float32-computed gradients against
central differences evaluated on an exact float64 twin of the same case:
a float32-evaluated difference quotient would measure its own quantization
noise rather than the backward pass (float32 loss values carry ~6e-8
relative rounding, which divided by 2*eps swamps any gradient below ~1e-2).
ReLU and max-pool cases keep inputs away from their kinks, where a central
difference is not a valid oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .model import (FusionSpec, MasterConfig, PDNet, SubNetConfig, bce_loss,
                    total_loss)
from .optim import grad_check
from .tensor import Rng, Tape, Tensor, backward

FLOAT_TOL = 1e-3
DOUBLE_TOL = 1e-5
CHECK_EPS = 1e-3
DOUBLE_EPS = 3e-4  # truncation below 1e-5 on the curved ops (BN), noise still negligible
E2E_EPS = 1e-4  # small enough not to cross relu/pool kinks through a deep stack
E2E_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.err < self.tol


def _sq_sum(y: Tensor) -> Tensor:
    return ops.reduce_sum(ops.multiply(y, y))


def _op_cases(rng: Rng, positive: bool = False):
    """(name, f, raw float64 arrays, grad flags); f works at either precision.

    ``positive`` bounds the linear-op probes away from gradient
    cancellations (|x|+0.3): used by the float tier, where a coordinate
    whose gradient cancels to ~1e-4 of the typical scale cannot meet a
    relative tolerance against any oracle (float32 forward rounding alone
    shifts the true gradient by ~1e-6 absolute).
    """
    g = rng.gen

    def draw(*shape):
        return g.standard_normal(shape)

    def pdraw(*shape):
        arr = g.standard_normal(shape)
        return np.abs(arr) + 0.3 if positive else arr

    def bn_fn(i):
        # weighted sum, not sum of squares: normalization makes sum(bn(x)^2)
        # nearly constant in x, leaving no gradient signal to check
        c = i[0].shape[1]
        rm = np.zeros(c, i[0].dtype)
        rv = np.ones(c, i[0].dtype)
        y = ops.batch_norm(i[0], i[1], i[2], rm, rv, True)
        return ops.reduce_sum(ops.multiply(y, i[3]))

    pool_in = 0.1 * draw(1, 2, 6, 6)
    pool_in += np.arange(pool_in.size).reshape(pool_in.shape) * 0.9  # no near-ties

    relu_in = draw(1, 2, 6, 6)
    relu_in += 0.05 * np.sign(relu_in) + (relu_in == 0) * 0.05  # probe away from 0

    bce_mask = (g.random((1, 1, 4, 4)) > 0.5).astype(np.float64)

    cases = [
        ("conv2d", lambda i: _sq_sum(ops.conv2d(i[0], i[1], i[2], 1, 1)),
         [pdraw(1, 2, 6, 6), pdraw(3, 2, 3, 3), pdraw(1, 3, 1, 1)], [1, 1, 1]),
        ("conv2d_s2", lambda i: _sq_sum(ops.conv2d(i[0], i[1], i[2], 2, 1)),
         [pdraw(1, 2, 6, 6), pdraw(3, 2, 3, 3), pdraw(1, 3, 1, 1)], [1, 1, 1]),
        ("transposed_conv2d", lambda i: _sq_sum(ops.transposed_conv2d(i[0], i[1], i[2], 2, 0)),
         [pdraw(1, 2, 4, 4), pdraw(2, 3, 2, 2), pdraw(1, 3, 1, 1)], [1, 1, 1]),
        ("transposed_conv2d_p1",
         lambda i: _sq_sum(ops.transposed_conv2d(i[0], i[1], i[2], 2, 1)),
         [pdraw(1, 2, 5, 5), pdraw(2, 3, 3, 3), pdraw(1, 3, 1, 1)], [1, 1, 1]),
        ("max_pool2d", lambda i: _sq_sum(ops.max_pool2d(i[0])), [pool_in], [1]),
        ("batch_norm", bn_fn,
         [draw(2, 2, 4, 4), draw(1, 2, 1, 1), draw(1, 2, 1, 1), pdraw(2, 2, 4, 4)],
         [1, 1, 1, 0]),
        ("relu", lambda i: _sq_sum(ops.relu(i[0])), [relu_in], [1]),
        ("sigmoid", lambda i: _sq_sum(ops.sigmoid(i[0])), [draw(1, 2, 6, 6)], [1]),
        ("concat_channels", lambda i: _sq_sum(ops.concat_channels([i[0], i[1]])),
         [draw(1, 2, 4, 4), draw(1, 3, 4, 4)], [1, 1]),
        ("center_crop", lambda i: _sq_sum(ops.center_crop(i[0], 3, 2)),
         [draw(1, 2, 5, 5)], [1]),
        ("scale_combine_add", lambda i: _sq_sum(ops.scale_combine(i[0], i[1], 0.7, "add")),
         [pdraw(1, 2, 4, 4), pdraw(1, 2, 4, 4)], [1, 1]),
        ("scale_combine_gate", lambda i: _sq_sum(ops.scale_combine(i[0], i[1], 0.7, "gate")),
         [pdraw(1, 2, 4, 4), pdraw(1, 2, 4, 4)], [1, 1]),
        ("bce_loss", lambda i: bce_loss(ops.sigmoid(i[0]), i[1]),
         [draw(1, 1, 4, 4), bce_mask], [1, 0]),
    ]
    return cases


def _fd_compare(analytic: list[np.ndarray | None], inputs64: list[Tensor], f,
                eps: float, floor: float) -> float:
    """Max relative error of analytic gradients vs float64 central differences."""
    worst = 0.0
    for a_grad, x in zip(analytic, inputs64):
        if a_grad is None:
            continue
        a_flat = a_grad.reshape(-1)
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(inputs64).item()
            flat[i] = orig - eps
            fm = f(inputs64).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = float(a_flat[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def check_op_float(name, f, arrays, grads, eps: float = CHECK_EPS) -> float:
    """Float tier: float32 tape gradients vs float64-evaluated differences."""
    in32 = [Tensor(a.astype(np.float32), requires_grad=bool(rg))
            for a, rg in zip(arrays, grads)]
    for t in in32:
        t.zero_grad()
    with Tape() as tape:
        loss = f(in32)
        backward(loss, tape)
    analytic = [t.grad if t.requires_grad else None for t in in32]
    # exact cast back up: the twin evaluates the same point in float64
    in64 = [Tensor(t.data.astype(np.float64), requires_grad=False) for t in in32]
    return _fd_compare(analytic, in64, f, eps, floor=1e-8)


def run_grad_suite(seeds=(0, 1), include_double: bool = True) -> list[CheckResult]:
    """Every differentiable op at both precision tiers, then the model end to end."""
    results = []
    for seed in seeds:
        for name, f, arrays, grads in _op_cases(Rng(seed), positive=True):
            err = check_op_float(name, f, arrays, grads)
            results.append(CheckResult(f"{name}[f32,seed{seed}]", err, FLOAT_TOL))
        if include_double:
            for name, f, arrays, grads in _op_cases(Rng(seed)):
                inputs = [Tensor(a, requires_grad=bool(rg))
                          for a, rg in zip(arrays, grads)]
                err = grad_check(f, inputs, eps=DOUBLE_EPS)
                results.append(CheckResult(f"{name}[f64,seed{seed}]", err, DOUBLE_TOL))
    results.append(CheckResult("end_to_end[f32]", e2e_case(np.float32, 0), FLOAT_TOL))
    if include_double:
        results.append(CheckResult("end_to_end[f64]", e2e_case(np.float64, 0), DOUBLE_TOL))
    return results


def tiny_model(dtype, seed: int = 0, with_subnet: bool = True) -> PDNet:
    """2-block, 16x16 configuration used for end-to-end checks."""
    mc = MasterConfig(stage_channels=(4, 8), convs_per_block=(1, 1), input_size=16)
    sc = SubNetConfig(stage_channels=(4, 8), convs_per_block=(1, 1), fusion_stage=1) \
        if with_subnet else None
    fu = FusionSpec("gate", 1.0) if with_subnet else None
    return PDNet(mc, sc, fu, Rng(seed), dtype)


def e2e_case(dtype, seed: int = 0, eps: float = E2E_EPS) -> float:
    """Max relative gradient error of total_loss over all unfrozen parameters.

    Differences are evaluated on an exact float64 twin; the denominator
    floor is 1e-6 because on near-cancelled coordinates (|grad| ~ 1e-7
    here) the relative metric is ill-posed, while a wrong backward rule
    would still deviate at the gradient's own 1e-4..1e-2 scale.
    """
    model = tiny_model(dtype, seed)
    g = Rng(seed).child(7).gen
    rgb = g.random((1, 3, 16, 16))
    depth = g.random((1, 1, 16, 16))
    gt = (g.random((1, 1, 16, 16)) > 0.6).astype(np.float64)
    params = list(model.named_params())

    model.zero_grads()
    with Tape() as tape:
        s, sides = model.forward(Tensor(rgb.astype(dtype)), Tensor(depth.astype(dtype)),
                                 training=True)
        loss = total_loss(s, sides, Tensor(gt.astype(dtype)), 0.5)
        backward(loss, tape)

    twin = tiny_model(np.float64, seed)
    twin_params = list(twin.named_params())
    for (name, src), (tname, dst) in zip(params, twin_params):
        assert name == tname
        dst.data = src.data.astype(np.float64)
    rgb64, dep64, gt64 = Tensor(rgb), Tensor(depth), Tensor(gt)

    def f(_):
        s, sides = twin.forward(rgb64, dep64, training=True)
        return total_loss(s, sides, gt64, 0.5)

    analytic = [src.grad for _, src in params]
    inputs64 = [dst for _, dst in twin_params]
    return _fd_compare(analytic, inputs64, lambda _: f(None), eps, floor=E2E_FLOOR)
