"""Adam optimizer and the finite-difference gradient checker."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tape, Tensor, backward


class AdamState:
    """Per-parameter first/second moment buffers keyed by parameter name.

    Moments are created lazily (zero at t = 0); ``t`` increases by exactly
    one per step.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(named_params, state: AdamState, lr: float):
    """One bias-corrected Adam update over (name, tensor) pairs.

    Frozen parameters are skipped entirely, moments untouched.  A non-finite
    gradient raises, naming the offending parameter.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        if p.frozen or p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def grad_check(f, inputs: list[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between taped gradients of f and central differences.

    ``f`` must map the given tensors to a scalar tensor.  Relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    for x in inputs:
        if x.requires_grad:
            x.zero_grad()
    with Tape() as tape:
        loss = f(inputs)
        if loss.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got {loss.shape}")
        backward(loss, tape)

    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = x.grad.reshape(-1).copy()
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(inputs).item()
            flat[i] = orig - eps
            fm = f(inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = float(analytic[i])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst
