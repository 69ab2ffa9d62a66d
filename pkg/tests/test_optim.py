"""AdamW update rule, state accounting, and the warmup/decay schedule."""

import numpy as np
import pytest

from prunelab.errors import ConfigError, ContractError
from prunelab.optim import AdamW, LrSchedule, lr_at
from prunelab.tensor import Parameter


def scalar_adamw_reference(p0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent scalar AdamW for cross-checking trajectories."""
    p, m, v = p0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(p)
    return out


class TestAdamW:
    def test_degenerate_betas_single_step(self):
        p = Parameter(np.asarray([1.0]), "bias")
        opt = AdamW([p], beta1=0.0, beta2=0.0, eps=0.0)
        p.grad = np.asarray([1.0], dtype=p.data.dtype)
        opt.step(0.1)
        assert p.data[0] == pytest.approx(0.9)

    def test_zero_gradient_fixed_point(self):
        p = Parameter(np.asarray([1.5, -2.0]), "bias")
        before = p.data.copy()
        opt = AdamW([p])
        for _ in range(5):
            p.grad = np.zeros_like(p.data)
            opt.step(0.1)
        assert np.array_equal(p.data, before)

    def test_quadratic_descent_matches_scalar_reference(self):
        p = Parameter(np.asarray([1.0], dtype=np.float64), "bias")
        opt = AdamW([p])
        seen = []
        grads = []
        for _ in range(10):
            grads.append(2.0 * float(p.data[0]))
            p.grad = np.asarray([grads[-1]])
            opt.step(0.05)
            seen.append(float(p.data[0]))
        ref = scalar_adamw_reference(1.0, grads, 0.05)
        assert np.allclose(seen, ref, rtol=1e-12)
        mags = [1.0] + [abs(x) for x in seen]
        assert all(b < a for a, b in zip(mags, mags[1:]))

    def test_state_float_count(self):
        params = [Parameter(np.zeros((3, 4)), "linear-weight"), Parameter(np.zeros(7), "bias")]
        opt = AdamW(params)
        assert opt.state_float_count() == 2 * (12 + 7)

    def test_missing_grad_contract(self):
        p = Parameter(np.zeros(3), "bias")
        opt = AdamW([p])
        with pytest.raises(ContractError):
            opt.step(0.1)

    def test_frozen_param_rejected(self):
        p = Parameter(np.zeros(3), "bias", trainable=False)
        with pytest.raises(ContractError):
            AdamW([p])

    def test_masked_coordinates_stay_zero(self, rng):
        p = Parameter(rng.standard_normal((4, 4)), "linear-weight")
        p.mask = (rng.random((4, 4)) > 0.5).astype(p.data.dtype)
        p.data *= p.mask
        opt = AdamW([p])
        for _ in range(10):
            p.grad = rng.standard_normal((4, 4)).astype(p.data.dtype)
            opt.step(0.1)
        assert np.all(p.data[p.mask == 0] == 0.0)


class TestLrSchedule:
    def test_warmup_endpoint(self):
        s = LrSchedule(1e-4, 1000, 100)
        assert lr_at(s, 100) == pytest.approx(1e-4)

    def test_ramp_start_zero(self):
        assert lr_at(LrSchedule(1e-4, 1000, 100), 0) == 0.0

    def test_decay_midpoint(self):
        assert lr_at(LrSchedule(1e-4, 1000, 100), 550) == pytest.approx(5e-5)

    def test_default_warmup_is_ten_percent(self):
        assert LrSchedule(1e-3, 1000).warmup_iters == 100
        assert LrSchedule(1e-3, 15).warmup_iters == 2

    def test_out_of_range(self):
        s = LrSchedule(1e-4, 1000, 100)
        with pytest.raises(ContractError):
            lr_at(s, 1001)
        with pytest.raises(ContractError):
            lr_at(s, -1)

    def test_invalid_warmup(self):
        with pytest.raises(ConfigError):
            LrSchedule(1e-4, 10, 10)
        with pytest.raises(ConfigError):
            LrSchedule(1e-4, 1, 0)
