import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from crossloc import diffcore as dc

from oracles import numeric_grad


def T(x, grad=True):
    return dc.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def grad_of(fn, *arrays):
    ts = [T(a) for a in arrays]
    out = fn(*ts)
    out.backward()
    return out, [t.grad for t in ts]


# -- forward values --------------------------------------------------------------


def test_relu_forward():
    assert np.array_equal(dc.relu(T([-1.0, 2.0])).data, [0.0, 2.0])


def test_softmax_symmetric():
    assert np.allclose(dc.softmax(T([0.0, 0.0])).data, [0.5, 0.5])


def test_l2_normalize_345():
    assert np.allclose(dc.l2_normalize(T([3.0, 4.0])).data, [0.6, 0.8])


def test_l2_normalize_zero_vector_maps_to_zero():
    y = dc.l2_normalize(T([0.0, 0.0, 0.0]))
    assert np.array_equal(y.data, np.zeros(3))
    dc.sum(y).backward()


@given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_unit_norm(x):
    y = dc.l2_normalize(T(x)).data
    n = np.linalg.norm(x)
    if n > 1e-12:
        assert abs(np.linalg.norm(y) - 1.0) < 1e-12
    else:
        assert not y.any()


def test_smooth_l1_branches():
    y = dc.smooth_l1(T([0.5, -2.0, 1.0])).data
    assert np.allclose(y, [0.125, 1.5, 0.5])


def test_max_gradient_goes_to_first_argmax():
    x = T([[1.0, 3.0, 3.0]])
    dc.sum(dc.max(x, axis=1)).backward()
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_take_accumulates_repeated_indices():
    x = T([[1.0], [2.0], [3.0]])
    dc.sum(dc.take(x, [0, 0, 2])).backward()
    assert np.array_equal(x.grad[:, 0], [2.0, 0.0, 1.0])


def test_norm_zero_has_zero_gradient():
    x = T([0.0, 0.0])
    dc.sum(dc.norm(x)).backward()
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_broadcast_add_unbroadcasts_gradient():
    out, (ga, gb) = grad_of(lambda a, b: dc.sum(a + b), np.ones((3, 4)), np.ones(4))
    assert ga.shape == (3, 4) and gb.shape == (4,)
    assert np.array_equal(gb, [3.0] * 4)


def test_shape_errors():
    with pytest.raises(dc.ShapeError):
        dc.add(T(np.ones(3)), T(np.ones(4)))
    with pytest.raises(dc.ShapeError):
        dc.reshape(T(np.ones(6)), (4, 2))
    with pytest.raises(dc.ShapeError):
        T(np.ones(3)).backward()
    with pytest.raises(dc.ShapeError):
        dc.Tensor(np.ones(2)).item()


def test_backward_through_shared_subexpression():
    x = T([2.0])
    y = x * x
    dc.sum(y + y).backward()
    assert np.allclose(x.grad, [8.0])


# -- gradients against an independent central-difference oracle -------------------

UNARY = {
    "relu": lambda t: dc.relu(t),
    "smooth_l1": lambda t: dc.smooth_l1(t),
    "softmax": lambda t: dc.softmax(t, axis=-1),
    "norm": lambda t: dc.norm(t, axis=-1),
    "l2_normalize": lambda t: dc.l2_normalize(t, axis=-1),
    "max": lambda t: dc.max(t, axis=-1),
    "sum": lambda t: dc.sum(t, axis=0),
    "mean": lambda t: dc.mean(t, axis=1),
    "reshape": lambda t: dc.reshape(t, (-1,)),
    "transpose": lambda t: dc.transpose(t, (1, 0)),
    "take": lambda t: dc.take(t, [2, 0, 2], axis=0),
    "scale": lambda t: dc.scale(t, -1.7),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(5))
def test_unary_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4)) * 1.5
    w = rng.normal(size=UNARY[name](dc.Tensor(x)).shape)  # random cotangent

    def f(a):
        return float(np.sum(UNARY[name](dc.Tensor(a)).data * w))

    with dc.watch_kinks() as mon:
        f(x)
    if mon.margin < 1e-4:
        pytest.skip("sample point too close to a kink")
    t = T(x)
    dc.sum(UNARY[name](t) * dc.Tensor(w)).backward()
    num = numeric_grad(f, x)
    assert np.max(np.abs(t.grad - num) / np.maximum(1, np.abs(num))) < 1e-6


BINARY = {
    "add": (lambda a, b: a + b, (3, 4), (4,)),
    "sub": (lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": (lambda a, b: a * b, (2, 3, 4), (3, 4)),
    "matmul": (lambda a, b: a @ b, (3, 4), (4, 2)),
    "batched_matmul": (lambda a, b: dc.matmul(a, b), (2, 3, 4), (4, 5)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(3))
def test_binary_op_gradients(name, seed):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    w = rng.normal(size=fn(dc.Tensor(a), dc.Tensor(b)).shape)
    ta, tb = T(a), T(b)
    dc.sum(fn(ta, tb) * dc.Tensor(w)).backward()
    na = numeric_grad(lambda x: float(np.sum(fn(dc.Tensor(x), dc.Tensor(b)).data * w)), a)
    nb = numeric_grad(lambda x: float(np.sum(fn(dc.Tensor(a), dc.Tensor(x)).data * w)), b)
    assert np.allclose(ta.grad, na, atol=1e-7)
    assert np.allclose(tb.grad, nb, atol=1e-7)


@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_mul_gradient_closed_form(a, b):
    out, (ga, gb) = grad_of(lambda x, y: dc.sum(x * y), a, b)
    assert np.array_equal(ga, b) and np.array_equal(gb, a)


# -- drivers -----------------------------------------------------------------------


def _linear_smooth_l1(inputs, P):
    x, y = inputs
    return dc.sum(dc.smooth_l1(dc.matmul(dc.Tensor(x), P["w"]) + P["b"] - dc.Tensor(y)))


def test_gradient_check_linear_smooth_l1():
    rng = np.random.default_rng(0)
    P = dc.ParamStore({"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)})
    inputs = (rng.normal(size=(5, 4)), rng.normal(size=(5, 3)))
    assert dc.kink_margin(_linear_smooth_l1, inputs, P) > 1e-6
    assert dc.gradient_check(_linear_smooth_l1, inputs, P, 1e-5) < 1e-4


def test_gradient_check_constant_graph():
    P = dc.ParamStore({"w": np.ones(3)})
    assert dc.gradient_check(lambda i, Q: dc.Tensor(2.0), None, P) == 0.0


def test_gradient_check_rejects_bad_epsilon():
    P = dc.ParamStore({"w": np.ones(1)})
    for eps in (0.0, -1e-5, 1e-2):
        with pytest.raises(ValueError):
            dc.gradient_check(lambda i, Q: dc.sum(Q["w"]), None, P, eps)


def test_gradient_check_detects_wrong_gradient():
    def bad(a):
        a = dc.as_tensor(a)
        return dc._make(a.data ** 2, (a,), lambda g: (g * a.data,), "bad")  # missing factor 2

    P = dc.ParamStore({"w": np.array([1.0, -2.0])})
    assert dc.gradient_check(lambda i, Q: dc.sum(bad(Q["w"])), None, P) > 0.1


def test_forward_backward_is_deterministic_and_pure():
    rng = np.random.default_rng(3)
    P = dc.ParamStore({"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)})
    before = {k: v.copy() for k, v in P.items()}
    inputs = (rng.normal(size=(5, 4)), rng.normal(size=(5, 3)))
    o1, g1 = dc.forward_backward(_linear_smooth_l1, inputs, P)
    o2, g2 = dc.forward_backward(_linear_smooth_l1, inputs, P)
    assert o1.tobytes() == o2.tobytes()
    assert all(g1.grads[k].tobytes() == g2.grads[k].tobytes() for k in P)
    assert all(np.array_equal(before[k], P[k]) for k in P)


def test_kink_margin_detects_relu_at_zero():
    P = dc.ParamStore({"w": np.array([0.0, 1.0])})
    assert dc.kink_margin(lambda i, Q: dc.sum(dc.relu(Q["w"])), None, P) == 0.0


def test_param_store_copy_is_deep():
    P = dc.ParamStore({"w": np.ones(2)})
    Q = P.copy()
    Q.params["w"][0] = 5.0
    assert P["w"][0] == 1.0
    assert set(P.subset("w").names()) == {"w"}
