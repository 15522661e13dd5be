import numpy as np
import pytest

from pdnet import ops
from pdnet.optim import AdamState, adam_step, grad_check
from pdnet.tensor import Rng, Tensor
from pdnet.verify import (CHECK_EPS, DOUBLE_EPS, DOUBLE_TOL, FLOAT_TOL,
                          _op_cases, check_op_float)


def test_grad_check_quadratic_exact():
    x = Tensor(Rng(0).gen.standard_normal((1, 1, 3, 3)), requires_grad=True)
    err = grad_check(lambda i: ops.reduce_sum(ops.multiply(i[0], i[0])), [x], eps=1e-3)
    assert err < 1e-6  # central differences are exact for quadratics


def test_grad_check_relu_away_from_kink():
    g = Rng(1).gen
    raw = g.standard_normal((1, 2, 6, 6))
    raw += 0.05 * np.sign(raw) + (raw == 0) * 0.05  # |x| > 10*eps
    x = Tensor(raw, requires_grad=True)
    err = grad_check(lambda i: ops.reduce_sum(ops.relu(i[0])), [x], eps=1e-3)
    assert err < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_grad_check_double(seed):
    for name, f, arrays, grads in _op_cases(Rng(seed)):
        inputs = [Tensor(a, requires_grad=bool(rg)) for a, rg in zip(arrays, grads)]
        err = grad_check(f, inputs, eps=DOUBLE_EPS)
        assert err < DOUBLE_TOL, f"{name} seed {seed}: {err}"


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_grad_check_float(seed):
    for name, f, arrays, grads in _op_cases(Rng(seed)):
        err = check_op_float(name, f, arrays, grads, eps=CHECK_EPS)
        assert err < FLOAT_TOL, f"{name} seed {seed}: {err}"


class TestAdam:
    def _param(self, value, grad):
        t = Tensor(np.full((1, 1, 2, 2), value, np.float32), requires_grad=True)
        t.grad[...] = grad
        return t

    def test_zero_grad_leaves_params(self):
        p = self._param(1.5, 0.0)
        state = AdamState()
        adam_step([("p", p)], state, 0.1)
        assert state.t == 1
        assert np.all(p.data == 1.5)

    def test_first_step_closed_form(self):
        g = 0.73
        lr = 0.01
        p = self._param(2.0, g)
        state = AdamState()
        adam_step([("p", p)], state, lr)
        # bias-corrected first step: lr * g / (|g| + eps)
        expect = 2.0 - lr * g / (abs(g) + state.eps)
        assert np.abs(p.data - expect).max() < 1e-6

    def test_first_step_is_lr_sign(self):
        p = self._param(0.0, -3.2)
        adam_step([("p", p)], AdamState(), 0.001)
        assert np.allclose(p.data, 0.001, atol=1e-6)

    def test_frozen_skipped_entirely(self):
        p = self._param(1.0, 5.0)
        p.frozen = True
        state = AdamState()
        adam_step([("p", p)], state, 0.1)
        assert np.all(p.data == 1.0)
        assert "p" not in state.m  # moments untouched

    def test_t_strictly_increases(self):
        p = self._param(0.0, 1.0)
        state = AdamState()
        for i in range(1, 6):
            adam_step([("p", p)], state, 0.01)
            assert state.t == i

    def test_non_finite_gradient_names_parameter(self):
        p = self._param(0.0, 1.0)
        p.grad[0, 0, 0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="enc0.w"):
            adam_step([("enc0.w", p)], AdamState(), 0.01)

    def test_moments_zero_at_t0(self):
        state = AdamState()
        assert state.t == 0 and not state.m and not state.v
