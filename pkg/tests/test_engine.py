import math
import zlib

import numpy as np
import pytest

from delivr import engine as E
from delivr.engine import Tensor
from delivr.errors import GraphError, ShapeError
from delivr.optim import AdamW, adam_step, cosine_lr


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, *arrays, tol=1e-6):
    """Compare backward() against central differences for a scalar-valued ``build``."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    build(*leaves).backward()
    for leaf in leaves:
        def f():
            with E.no_grad():
                return float(build(*[Tensor(l.data) for l in leaves]).item())
        num = numeric_grad(f, leaf.data)
        np.testing.assert_allclose(leaf.grad, num, rtol=tol, atol=tol)


@pytest.mark.parametrize("name,fn,shapes", [
    ("add-broadcast", lambda a, b: ((a + b) * (a + b)).sum(), [(2, 3), (3,)]),
    ("sub", lambda a, b: ((a - b) * a).sum(), [(2, 3), (1, 3)]),
    ("mul", lambda a, b: (a * b * b).sum(), [(4,), (4,)]),
    ("div", lambda a, b: (a / b).sum(), [(3,), (3,)]),
    ("matmul", lambda a, b: ((a @ b) * (a @ b)).sum(), [(2, 3), (3, 2)]),
    ("batched-matmul", lambda a, b: ((a @ b) * (a @ b)).mean(), [(2, 2, 3), (3, 4)]),
    ("transpose", lambda a: (E.transpose(a, (1, 0, 2)) * Tensor(np.arange(24.).reshape(3, 2, 4))).sum(), [(2, 3, 4)]),
    ("swap-last", lambda a: (a.T @ a).sum(), [(3, 2)]),
    ("tanh", lambda a: (E.tanh(a) * E.tanh(a)).sum(), [(5,)]),
    ("sin-cos", lambda a: (E.sin(a) * E.cos(a * 2.0)).sum(), [(5,)]),
    ("exp", lambda a: E.exp(a).mean(), [(2, 2)]),
    ("softmax", lambda a: (E.softmax(a) * Tensor(np.arange(12.).reshape(3, 4))).sum(), [(3, 4)]),
    ("mean-axis", lambda a: (a.mean(axis=1) * a.mean(axis=1)).sum(), [(3, 4)]),
    ("sum-keepdims", lambda a: (a.sum(axis=0, keepdims=True) * a).sum(), [(3, 4)]),
    ("reshape", lambda a: (a.reshape(6, 2) @ Tensor(np.ones((2, 1)))).sum() * 1.5, [(3, 4)]),
    ("concat", lambda a, b: (E.concat([a, b], axis=1) * Tensor(np.arange(15.).reshape(3, 5))).sum(), [(3, 2), (3, 3)]),
    ("stack", lambda a, b: (E.stack([a, b], axis=-1) * Tensor(np.arange(8.).reshape(4, 2))).sum(), [(4,), (4,)]),
    ("slice", lambda a: (a[:, 1:] * a[:, :-1]).sum(), [(3, 4)]),
    ("layer_norm", lambda a, g, b: (E.layer_norm(a, g, b) * Tensor(np.arange(8.).reshape(2, 4))).sum(), [(2, 4), (4,), (4,)]),
    ("masked_fill", lambda a: (E.softmax(E.masked_fill(a, np.eye(3, dtype=bool), -1e9)) * Tensor(np.arange(9.).reshape(3, 3))).sum(), [(3, 3)]),
    ("wrap", lambda a: (E.wrap_angle(a * 4.0) * E.wrap_angle(a * 4.0)).sum(), [(4,)]),
])
def test_op_gradients(name, fn, shapes):
    r = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [r.uniform(0.5, 1.5, s) * r.choice([-1, 1], s) for s in shapes]
    if name == "div":
        arrays[1] = np.abs(arrays[1]) + 0.5
    if name == "wrap":
        arrays[0] = np.array([0.1, 0.5, -0.6, 0.9])  # 4x stays away from the branch cut
    check_grads(fn, *arrays)


def test_abs_and_relu_gradients_away_from_kink():
    x = np.array([-1.3, -0.2, 0.4, 2.0])
    check_grads(lambda a: (E.abs_(a) * Tensor(np.arange(4.0))).sum(), x)
    check_grads(lambda a: (E.relu(a) * Tensor(np.arange(4.0))).sum(), x)


def test_abs_subgradient_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    E.abs_(x).sum().backward()
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_softmax_examples():
    np.testing.assert_allclose(E.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)
    x = np.array([0.3, -1.2, 2.0, 0.0])
    np.testing.assert_allclose(E.softmax(Tensor(x + 123.4)).data, E.softmax(Tensor(x)).data, atol=1e-15)
    big = E.softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(big))


def test_matmul_example():
    a = Tensor(np.arange(1.0, 7.0).reshape(2, 3))
    b = Tensor(np.arange(1.0, 7.0).reshape(3, 2))
    np.testing.assert_array_equal((a @ b).data, [[22, 28], [49, 64]])


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        E.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)
    with pytest.raises(ShapeError):
        E.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.ones(2)))


def test_backward_examples():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
    w = Tensor(np.array(0.0), requires_grad=True)
    E.tanh(w).backward()
    assert w.grad == 1.0


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()  # non-scalar
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()
    with pytest.raises(GraphError):
        Tensor(np.ones(3)).sum().backward()  # detached


def test_shared_subgraph_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = Tensor(np.array([-4.0]), requires_grad=True)
    ((x + y) * (x + 1.0)).sum().backward()
    assert x.grad[0] == pytest.approx(1.0) and y.grad[0] == pytest.approx(3.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with E.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_float32_preserved():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = E.softmax(E.tanh(x * 2.0) + 1.0)
    assert y.dtype == np.float32


def test_deterministic_forward_backward():
    def run():
        r = np.random.default_rng(7)
        a = Tensor(r.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(r.normal(size=(5, 3)), requires_grad=True)
        loss = E.softmax(E.tanh(a @ b)).mean()
        loss.backward()
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()
    assert run() == run()


# -- optimizer ---------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    state = {}
    adam_step(p, np.zeros(2), state, lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_hand_computed():
    p = np.array([0.5])
    adam_step(p, np.array([1.0]), {}, lr=0.1)
    # m_hat = 1, v_hat = 1 -> step = 0.1 * 1 / (1 + 1e-8)
    assert p[0] - 0.5 == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert p[0] - 0.5 == pytest.approx(-0.1, abs=1e-8)


def test_adam_identical_params_stay_identical():
    a = {"x": Tensor(np.array([0.3]), requires_grad=True), "y": Tensor(np.array([0.3]), requires_grad=True)}
    opt = AdamW(a, lr=0.05, weight_decay=0.1)
    for k in range(5):
        for t in a.values():
            t.grad = np.array([math.sin(k)])
        opt.step()
    assert a["x"].data[0] == a["y"].data[0]


def test_adamw_decoupled_decay():
    p = np.array([2.0])
    adam_step(p, np.zeros(1), {}, lr=0.1, weight_decay=0.5)
    assert p[0] == pytest.approx(2.0 * (1 - 0.05))


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 2e-4, 1e-6) == pytest.approx(2e-4)
    assert cosine_lr(99, 100, 2e-4, 1e-6) == pytest.approx(1e-6)
    lrs = [cosine_lr(s, 100, 2e-4, 1e-6) for s in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
