import numpy as np
import pytest

from qcdiff.errors import ContractError, ParameterError
from qcdiff.optim import AdamW
from qcdiff.tensor import Tensor


def make_param(values):
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)


def test_zero_grad_zero_decay_is_identity():
    p = make_param([1.5, -2.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert np.array_equal(p.data, [1.5, -2.0])
    assert opt.step_count == 1


def test_first_step_is_bias_corrected_unit_update():
    p = make_param([0.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    # m_hat = v_hat = 1 after bias correction, so the step is lr/(1+eps)
    assert p.data[0] == pytest.approx(-0.1, rel=1e-5)


def test_decoupled_decay_with_zero_grad():
    p = make_param([2.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, rel=1e-6)


def test_grad_clipping_rescales_global_norm():
    # two params with joint grad norm 5; cap at 1 scales both by 1/5,
    # leaving the direction of the (sign-based) first Adam step unchanged
    # but the accumulated moments scaled
    p1, p2 = make_param([0.0]), make_param([0.0])
    opt = AdamW({"a": p1, "b": p2}, lr=0.1, weight_decay=0.0, grad_clip_norm=1.0)
    p1.grad = np.array([3.0], dtype=np.float32)
    p2.grad = np.array([4.0], dtype=np.float32)
    opt.step()
    assert opt._m["a"][0] == pytest.approx(0.1 * 3.0 / 5.0, rel=1e-6)
    assert opt._m["b"][0] == pytest.approx(0.1 * 4.0 / 5.0, rel=1e-6)


def test_grad_clipping_inactive_below_threshold():
    p = make_param([0.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0, grad_clip_norm=10.0)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(-0.1, rel=1e-5)


def test_bad_clip_norm_rejected():
    with pytest.raises(ParameterError):
        AdamW({"p": make_param([0.0])}, grad_clip_norm=0.0)


def test_missing_grad_names_parameter():
    p = make_param([1.0])
    q = make_param([1.0])
    p.grad = np.zeros(1, dtype=np.float32)
    opt = AdamW({"has_grad": p, "lonely": q}, lr=0.1)
    with pytest.raises(ContractError, match="lonely"):
        opt.step()


def test_step_count_increments():
    p = make_param([1.0])
    opt = AdamW({"p": p}, lr=0.01)
    for i in range(1, 4):
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        assert opt.step_count == i


def test_invalid_hyperparameters_rejected():
    p = make_param([1.0])
    with pytest.raises(ParameterError):
        AdamW({"p": p}, lr=-1.0)
    with pytest.raises(ParameterError):
        AdamW({"p": p}, lr=0.1, beta1=1.0)
    with pytest.raises(ParameterError):
        AdamW({"p": p}, lr=0.1, weight_decay=-0.1)


def test_converges_on_quadratic():
    p = make_param([5.0])
    opt = AdamW({"p": p}, lr=0.2, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step()
    assert abs(p.data[0]) < 0.1
