import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lens.numerics import (
    AdamW,
    LrSchedule,
    NonDeterministicForward,
    NonFiniteError,
    OptimizerState,
    Tensor,
    adamw_step,
    gelu,
    grad_check,
    layer_norm,
    log,
    log_softmax,
    lr_at,
    no_grad,
    softmax,
    tanh,
)


def test_sum_grad_is_ones():
    p = Tensor.param([0.5, -1.0, 2.0])
    p.sum().backward()
    assert np.array_equal(p.grad, [1, 1, 1])


def test_square_grad():
    p = Tensor.param([1.0, 2.0, 3.0])
    (p * p).sum().backward()
    assert np.allclose(p.grad, [2, 4, 6])


def test_unreachable_parameter_grad_stays_zero():
    p = Tensor.param([1.0, 2.0])
    q = Tensor.param([3.0])
    (p * 2.0).sum().backward()
    assert np.array_equal(q.grad, [0.0])


def test_grad_accumulates_until_zeroed():
    p = Tensor.param([1.0])
    (p * 3.0).sum().backward()
    (p * 3.0).sum().backward()
    assert p.grad[0] == 6.0
    p.zero_grad()
    assert p.grad[0] == 0.0


def test_non_scalar_loss_rejected():
    p = Tensor.param([1.0, 2.0])
    with pytest.raises(ValueError):
        (p * 2.0).backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_forward_raises():
    p = Tensor.param([-1.0])
    with pytest.raises(NonFiniteError):
        log(p)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_in_backward_raises():
    p = Tensor.param([0.0])
    with pytest.raises(NonFiniteError):
        (p ** 0.5).sum().backward()


def test_data_is_float32():
    p = Tensor.param([[1, 2], [3, 4]])
    assert p.dtype == np.float32
    assert (p @ p).dtype == np.float32
    assert gelu(p).dtype == np.float32


def test_shared_subexpression_grad():
    # y = x*x + x*x*x reuses the node x*x
    x = Tensor.param([1.5])
    sq = x * x
    (sq + sq * x).sum().backward()
    assert np.allclose(x.grad, [2 * 1.5 + 3 * 1.5**2])


def test_no_grad_records_nothing():
    p = Tensor.param([1.0])
    with no_grad():
        y = p * 2.0
    assert not y.requires_grad


def _two_layer(seed=0):
    rng = np.random.default_rng(seed)
    w1 = Tensor.param(rng.normal(size=(5, 7)) * 0.5)
    b1 = Tensor.param(rng.normal(size=7) * 0.1)
    w2 = Tensor.param(rng.normal(size=(7, 3)) * 0.5)
    x = Tensor(rng.normal(size=(4, 5)))
    target = np.array([0, 2, 1, 2])

    def forward():
        h = tanh(x @ w1 + b1)
        lp = log_softmax(h @ w2, axis=-1)
        return -lp[np.arange(4), target].mean()

    return forward, {"w1": w1, "b1": b1, "w2": w2}


def test_two_layer_network_matches_finite_differences():
    forward, params = _two_layer()
    report = grad_check(forward, params, h=1e-3, tol=1e-3)
    assert report.passed, str(report)


def test_grad_check_identity_is_exact():
    p = Tensor.param([0.3, -0.2, 0.7])
    report = grad_check(lambda: p.sum(), {"p": p})
    assert report.max_error == pytest.approx(0.0, abs=1e-9)


def test_grad_check_softmax_cross_entropy():
    z = Tensor.param([1.0, 2.0, 3.0])
    report = grad_check(lambda: -log_softmax(z)[2], {"z": z}, h=1e-3)
    assert report.max_error <= 1e-4


def test_grad_check_restores_float32_data():
    forward, params = _two_layer()
    before = {k: v.data.copy() for k, v in params.items()}
    grad_check(forward, params, max_entries=5)
    for k, v in params.items():
        assert v.dtype == np.float32
        assert np.array_equal(v.data, before[k])


def test_grad_check_detects_nondeterminism():
    p = Tensor.param([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicForward):
        grad_check(lambda: (p * float(rng.normal())).sum(), {"p": p})


def test_ops_gradients():
    rng = np.random.default_rng(3)
    a = Tensor.param(rng.normal(size=(2, 3, 4)))
    g = Tensor.param(rng.normal(size=4) * 0.1 + 1.0)
    b = Tensor.param(rng.normal(size=4) * 0.1)
    w = Tensor.param(rng.normal(size=(4, 4)))

    def forward():
        x = layer_norm(a, g, b)
        y = gelu(x @ w)
        s = softmax(y, axis=-1)
        return (s * y).sum() + (x.exp() * 0.01).sum() + y.transpose(0, 2, 1)[:, 1:3].mean()

    report = grad_check(forward, {"a": a, "g": g, "b": b, "w": w})
    assert report.passed, str(report)


# -- optimizer ------------------------------------------------------------------------


def test_adamw_first_step_hand_computed():
    p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    g = {"w": np.array([0.5, 0.5], dtype=np.float32)}
    new, st_ = adamw_step(p, g, OptimizerState(), lr=0.1, weight_decay=0.01)
    # first step: mhat = g, vhat = g^2 so the update is sign(g) up to eps
    expect = p["w"] - 0.1 * 0.01 * p["w"] - 0.1 * 0.5 / (0.5 + 1e-8)
    assert np.allclose(new["w"], expect, atol=1e-6)
    assert st_.step == 1
    assert st_.m["w"].shape == p["w"].shape


def test_adamw_zero_grad_only_decays():
    p = {"w": np.array([2.0], dtype=np.float32)}
    new, _ = adamw_step(p, {"w": np.zeros(1, dtype=np.float32)}, OptimizerState(), lr=0.1, weight_decay=0.5)
    assert np.allclose(new["w"], [2.0 - 0.1 * 0.5 * 2.0])


def test_adamw_step_counter_increments():
    t = Tensor.param([1.0, 2.0])
    opt = AdamW({"t": t})
    for k in range(3):
        opt.zero_grad()
        (t * t).sum().backward()
        opt.step(0.01)
        assert opt.state.step == k + 1


def test_adamw_rejects_bad_inputs():
    p = {"w": np.ones(2, dtype=np.float32)}
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.ones(2, dtype=np.float32)}, OptimizerState(), lr=0.0)
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.ones(3, dtype=np.float32)}, OptimizerState(), lr=0.1)


def test_adamw_is_pure():
    p = {"w": np.ones(2, dtype=np.float32)}
    g = {"w": np.ones(2, dtype=np.float32)}
    s = OptimizerState()
    adamw_step(p, g, s, lr=0.1)
    assert np.array_equal(p["w"], [1, 1]) and s.step == 0


# -- schedules -------------------------------------------------------------------------


def test_cosine_endpoints():
    s = LrSchedule("cosine", 1e-3, 100)
    assert lr_at(s, 0) == pytest.approx(1e-3)
    assert lr_at(s, 50) == pytest.approx(5e-4)
    assert lr_at(s, 100) <= lr_at(s, 0)


def test_linear_decays_to_zero_after_warmup():
    s = LrSchedule("linear", 1.0, 110, warmup_steps=10)
    assert lr_at(s, 5) == pytest.approx(0.5)
    assert lr_at(s, 10) == pytest.approx(1.0)
    assert lr_at(s, 60) == pytest.approx(0.5)
    assert lr_at(s, 110) == pytest.approx(0.0)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_all_warmup_schedule_ends_at_peak(kind):
    s = LrSchedule(kind, 2.0, 20, 20)
    assert lr_at(s, 10) == pytest.approx(1.0)
    assert lr_at(s, 20) == 2.0


def test_constant_schedule():
    s = LrSchedule("constant", 0.3, 10)
    assert all(lr_at(s, k) == 0.3 for k in range(11))


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule("step", 1.0, 10)
    with pytest.raises(ValueError):
        LrSchedule("cosine", 0.0, 10)
    with pytest.raises(ValueError):
        lr_at(LrSchedule("cosine", 1.0, 10), 11)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 50), st.floats(1e-6, 1.0))
def test_schedules_bounded_and_monotone_after_warmup(total, warm, base):
    warm = min(warm, total)
    for kind in ("cosine", "linear"):
        s = LrSchedule(kind, base, total, warm)
        vals = [lr_at(s, k) for k in range(warm, total + 1)]
        assert all(0.0 <= v <= base * (1 + 1e-12) for v in vals)
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
        assert math.isclose(lr_at(s, total), 0.0, abs_tol=1e-12) or total == warm
