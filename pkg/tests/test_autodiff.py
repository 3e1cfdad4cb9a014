import numpy as np
import pytest

import casc.nn.autodiff as F
from casc.nn import Adam, GroupNorm, Linear, Tensor, no_grad

from util import numeric_grad, rel_err

RNG = np.random.default_rng(7)


def check_grads(build_loss, arrays, tol=1e-6, eps=1e-6):
    """build_loss(tensors) -> Tensor scalar; compares backprop to central differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    for t in tensors:
        def f():
            with no_grad():
                val = build_loss(*[Tensor(x.data) for x in tensors])
                return float(val.data) if isinstance(val, Tensor) else float(val)

        num = numeric_grad(f, t.data, eps=eps)
        assert t.grad is not None
        assert rel_err(t.grad, num) < tol, f"grad mismatch: {rel_err(t.grad, num)}"


CASES = [
    ("add_broadcast", lambda a, b: F.sum_(F.mul(F.add(a, b), F.add(a, b))), [(3, 4), (4,)]),
    ("sub", lambda a, b: F.sum_(F.power(F.sub(a, b), 3)), [(2, 3), (2, 3)]),
    ("mul_broadcast", lambda a, b: F.sum_(F.mul(a, b)), [(2, 3, 4), (3, 1)]),
    ("div", lambda a, b: F.sum_(F.div(a, b)), [(3, 3), (3, 3)]),
    ("matmul2d", lambda a, b: F.sum_(F.matmul(a, b)), [(3, 4), (4, 5)]),
    ("matmul_batched", lambda a, b: F.sum_(F.power(F.matmul(a, b), 2)), [(2, 3, 4), (2, 4, 2)]),
    ("matmul_broadcast", lambda a, b: F.sum_(F.matmul(a, b)), [(3, 4), (5, 4, 2)]),
    ("exp", lambda a: F.sum_(F.exp(a)), [(4, 4)]),
    ("sqrt", lambda a: F.sum_(F.sqrt(F.add(F.mul(a, a), 1.0))), [(5,)]),
    ("tanh", lambda a: F.sum_(F.tanh(a)), [(3, 3)]),
    ("sigmoid", lambda a: F.sum_(F.sigmoid(a)), [(6,)]),
    ("silu", lambda a: F.sum_(F.silu(a)), [(2, 5)]),
    ("mean_axis", lambda a: F.sum_(F.power(F.mean(a, axis=(0, 2), keepdims=True), 2)), [(2, 3, 4)]),
    ("reshape_transpose", lambda a: F.sum_(F.mul(F.transpose(F.reshape(a, (4, 3)), (1, 0)), 2.0)), [(2, 6)]),
    ("softmax", lambda a: F.sum_(F.power(F.softmax(a, axis=-1), 2)), [(3, 5)]),
    ("upsample", lambda a: F.sum_(F.power(F.upsample_nearest2x(a), 2)), [(1, 3, 2, 2)]),
]


@pytest.mark.parametrize("name,fn,shapes", CASES, ids=[c[0] for c in CASES])
def test_op_gradients(name, fn, shapes):
    arrays = [RNG.normal(size=s) + (0.5 if name == "div" else 0.0) for s in shapes]
    if name == "div":
        arrays[1] = np.abs(arrays[1]) + 0.5
    if name == "sqrt":
        arrays[0] = np.abs(arrays[0]) + 0.1
    check_grads(fn, arrays)


def test_concat_gradient():
    a = RNG.normal(size=(2, 3))
    b = RNG.normal(size=(2, 2))
    check_grads(lambda x, y: F.sum_(F.power(F.concat([x, y], axis=1), 2)), [a, b])


def test_abs_gradient_away_from_zero():
    a = RNG.normal(size=(4, 4)) + np.sign(RNG.normal(size=(4, 4))) * 0.5
    check_grads(lambda x: F.sum_(F.absolute(x)), [a])


def test_relu_gradient_away_from_zero():
    a = RNG.normal(size=(4, 4)) * 2
    a[np.abs(a) < 0.1] = 0.5
    check_grads(lambda x: F.sum_(F.power(F.relu(x), 2)), [a])


def test_conv2d_gradients():
    x = RNG.normal(size=(2, 5, 5, 3))
    w = RNG.normal(size=(3, 3, 3, 4))
    b = RNG.normal(size=(4,))
    check_grads(lambda xt, wt, bt: F.sum_(F.power(F.conv2d(xt, wt, bt, stride=1, padding=1), 2)), [x, w, b])


def test_conv2d_stride2_gradients():
    x = RNG.normal(size=(1, 6, 6, 2))
    w = RNG.normal(size=(3, 3, 2, 3))
    check_grads(lambda xt, wt: F.sum_(F.power(F.conv2d(xt, wt, None, stride=2, padding=1), 2)), [x, w])


def test_gather_rows_gradient():
    table = RNG.normal(size=(6, 3))
    idx = np.array([0, 2, 2, 5, 1])
    check_grads(lambda t: F.sum_(F.power(F.gather_rows(t, idx), 2)), [table])


def test_groupnorm_gradients():
    rng = np.random.default_rng(11)
    gn = GroupNorm(8, groups=4, dtype=np.float64)
    x = rng.normal(size=(2, 3, 3, 8))
    # random projection keeps the loss sensitive to the normalized direction
    probe = rng.normal(size=(2, 3, 3, 8))

    xt = Tensor(x, requires_grad=True)
    loss = F.sum_(F.mul(gn(xt), probe))
    loss.backward()

    def f():
        with no_grad():
            return float(F.sum_(F.mul(gn(Tensor(x)), probe)).data)

    num = numeric_grad(f, x)
    assert rel_err(xt.grad, num) < 1e-6
    num_gamma = numeric_grad(f, gn.gamma.data)
    assert rel_err(gn.gamma.grad, num_gamma) < 1e-6


def test_linear_layer_and_adam_step():
    rng = np.random.default_rng(5)
    lin = Linear(4, 3, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(8, 4)))
    target = rng.normal(size=(8, 3))
    losses = []
    opt = Adam(lin.parameters(), lr=5e-2)
    for _ in range(60):
        opt.zero_grad()
        diff = F.sub(lin(x), target)
        loss = F.mean(F.mul(diff, diff))
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.25 * losses[0]


def test_tensor_reuse_accumulates():
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = F.sum_(F.add(F.mul(a, a), a))  # x^2 + x -> 2x + 1
    y.backward()
    np.testing.assert_allclose(a.grad, np.array([5.0, 7.0]))


def test_no_grad_blocks_recording():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = F.mul(a, 2.0)
    assert not out.requires_grad
    assert out._grad_fn is None


def test_stop_grad_blocks_flow():
    a = Tensor(np.array([1.5]), requires_grad=True)
    y = F.sum_(F.mul(F.stop_grad(a), a))
    y.backward()
    np.testing.assert_allclose(a.grad, np.array([1.5]))


def test_plain_arrays_pass_through():
    x = np.arange(4.0)
    assert isinstance(F.sqrt(x + 1), np.ndarray)
    assert isinstance(F.mean(x), np.floating)
    assert isinstance(F.conv2d(np.ones((1, 4, 4, 1)), np.ones((3, 3, 1, 2)), None, 1, 1), np.ndarray)


def test_float32_preserved():
    a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = F.mean(F.silu(F.add(F.mul(a, 0.5), 1.0)))
    assert out.dtype == np.float32
    out.backward()
    assert a.grad.dtype == np.float32
