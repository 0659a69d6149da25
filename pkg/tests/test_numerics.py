import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from soundmap.gradsuite import EPS, check_ops
from soundmap.numerics import autograd as ag
from soundmap.numerics.autograd import ContractError, Tensor, backward
from soundmap.numerics.checkpoint import load_arrays, save_arrays
from soundmap.numerics.gradcheck import grad_check
from soundmap.numerics.nn import MLP
from soundmap.numerics.optim import AdamState, LrSchedule, adam_step, cosine_warmup_lr


def test_sum_of_squares_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * x).sum())
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_sum_grad_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    backward((y + y * x).sum())  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert np.allclose(x.grad, [2 * 3 + 3 * 9])


@pytest.mark.parametrize("name,err", sorted(check_ops(0).items()))
def test_op_gradients(name, err):
    assert err < 1e-4, name


def test_grad_check_quadratic_and_constant():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    assert grad_check(lambda t: (ag.matmul(t, A) * t).sum(), rng.normal(size=(2, 4)), EPS) < 1e-8
    assert grad_check(lambda t: (t * 0.0).sum() + 3.0, rng.normal(size=5), EPS) == 0.0


def test_three_layer_mlp_gradcheck():
    rng = np.random.default_rng(2)
    mlp = MLP([5, 7, 6, 3], rng).astype(np.float64)
    x = Tensor(rng.normal(size=(4, 5)))
    target = rng.normal(size=(4, 3))

    def loss():
        out = mlp(x) - target
        return (out * out).mean()

    params = mlp.named_parameters()
    grads = backward(loss(), params)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + EPS
            fp = float(loss().data)
            flat[i] = orig - EPS
            fm = float(loss().data)
            flat[i] = orig
            num = (fp - fm) / (2 * EPS)
            a = grads[name].reshape(-1)[i]
            assert abs(a - num) / max(1.0, abs(a)) < 1e-4, name


finite = hnp.arrays(np.float64, (3, 4), elements=st.floats(-20, 20))


@given(finite)
def test_ops_stay_finite(x):
    t = Tensor(x, requires_grad=True)
    outs = [ag.softmax(t), ag.log_softmax(t), ag.log_sigmoid(t), ag.sigmoid(t), ag.softplus(t),
            ag.logsumexp(t), ag.tanh(t), ag.gelu(t), ag.layernorm(t, Tensor(np.ones(4)), Tensor(np.zeros(4))),
            ag.l2_norm(t, eps=1e-12)]
    loss = outs[0].sum()
    for o in outs[1:]:
        loss = loss + o.sum()
    assert np.isfinite(loss.data)
    backward(loss)
    assert np.isfinite(t.grad).all()


# -- Adam -----------------------------------------------------------------------------------
def test_adam_zero_grad_no_decay_is_identity():
    p = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    before = p["w"].copy()
    st_ = AdamState(weight_decay=0.0)
    adam_step(p, {"w": np.zeros((2, 3), np.float32)}, st_, 1e-3)
    assert np.array_equal(p["w"], before)
    assert st_.step == 1


def test_adam_first_step_formula():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=10)
    g = rng.normal(size=10)
    p = {"w": w0.copy()}
    lr, eps = 1e-2, 1e-8
    adam_step(p, {"w": g}, AdamState(weight_decay=0.0, eps=eps), lr)
    assert np.allclose(p["w"], w0 - lr * g / (np.sqrt(g * g) + eps), rtol=0, atol=1e-12)


def adam_reference(w, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * wd * w
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_matches_reference_with_decay():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(5)]
    p = {"w": w0.copy(), "b": w0[0].copy()}
    state = AdamState(weight_decay=0.2)
    for g in grads:
        adam_step(p, {"w": g, "b": g[0]}, state, 1e-2, no_decay=frozenset({"b"}))
    assert np.allclose(p["w"], adam_reference(w0, grads, 1e-2, 0.2), atol=1e-12)
    assert np.allclose(p["b"], adam_reference(w0[0], [g[0] for g in grads], 1e-2, 0.0), atol=1e-12)


def test_adam_deterministic_and_shape_checked():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(5, 5)).astype(np.float32)
    g = rng.normal(size=(5, 5)).astype(np.float32)
    outs = []
    for _ in range(2):
        p = {"w": w.copy()}
        adam_step(p, {"w": g}, AdamState(), 1e-3)
        outs.append(p["w"])
    assert outs[0].tobytes() == outs[1].tobytes()
    assert outs[0].shape == w.shape
    with pytest.raises(ContractError):
        adam_step({"w": w.copy()}, {"w": g[:2]}, AdamState(), 1e-3)


# -- schedule -----------------------------------------------------------------------------------
def test_schedule_endpoints():
    s = LrSchedule(10, 100, 5e-5)
    assert cosine_warmup_lr(0, s) == 0.0
    assert cosine_warmup_lr(10, s) == pytest.approx(5e-5)
    assert cosine_warmup_lr(100, s) == pytest.approx(0.0, abs=1e-20)
    assert cosine_warmup_lr(55, s) == pytest.approx(2.5e-5)
    assert cosine_warmup_lr(5, s) == pytest.approx(2.5e-5)


def test_schedule_contract():
    with pytest.raises(ContractError):
        LrSchedule(0, 10, 1.0)
    with pytest.raises(ContractError):
        LrSchedule(11, 10, 1.0)
    with pytest.raises(ContractError):
        cosine_warmup_lr(11, LrSchedule(5, 10, 1.0))


@given(st.integers(1, 500), st.integers(0, 500))
def test_schedule_continuous_at_warmup(w, extra):
    s = LrSchedule(w, w + extra + 1, 1.0)
    left = cosine_warmup_lr(w - 1, s) if w > 1 else 0.0
    right = cosine_warmup_lr(w + 1, s)
    at = cosine_warmup_lr(w, s)
    assert at == pytest.approx(1.0)
    # neighbouring steps differ by at most one step's slope on either side
    assert at - left <= 1.0 / w + 1e-12
    assert at - right <= math.pi / (2 * (s.total_steps - w)) + 1e-12


# -- checkpoints -------------------------------------------------------------------------------
def test_checkpoint_arrays_bitwise(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {"a/b": rng.normal(size=(3, 2)).astype(np.float32), "c": np.arange(4, dtype=np.int64),
              "s": np.float32(rng.normal(size=()))[()] * np.ones((), np.float32)}
    save_arrays(tmp_path / "ck", arrays, {"step": 7})
    back, meta = load_arrays(tmp_path / "ck")
    assert meta == {"step": 7}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.asarray(v).tobytes()
