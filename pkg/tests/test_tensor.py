import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossalign import tensor as T
from crossalign.tensor import DomainError, ShapeError, Tensor, gradcheck, make_node


def leaf(x):
    return Tensor(x, requires_grad=True)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    X = np.array([[0.3, -1.2], [2.0, 0.5]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)


def test_matmul_row_sums():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert np.array_equal(out.data, [[3], [7]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_shared_weight_gradient():
    rng = np.random.default_rng(0)
    a, w = leaf(rng.normal(size=(3, 4, 5))), leaf(rng.normal(size=(5, 2)))
    g = rng.normal(size=(3, 4, 2))
    T.backward(T.reduce_sum(T.matmul(a, w) * Tensor(g)))
    assert np.allclose(w.grad, np.einsum("bik,bij->kj", a.data, g))


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_hand_value():
    out = T.softmax(Tensor([0.70711, 0.0]), 0).data
    assert np.allclose(out, [0.6698, 0.3302], atol=1e-4)


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0]), 0).data
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1.0) <= 1e-9 and abs(out[1]) <= 1e-9


def test_softmax_invalid_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor([1.0, 2.0]), axis=1)


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(ValueError):
        T.softmax(Tensor([[1.0, 2.0]]), axis=-1, mask=np.array([[False, False]]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_sums_to_one(x):
    for axis in (0, 1):
        s = T.softmax(Tensor(x), axis).data.sum(axis=axis)
        assert np.all(np.abs(s - 1.0) <= 1e-12)


# -- reductions and pointwise ops ----------------------------------------------

def test_reduce_mean_examples():
    assert np.array_equal(T.reduce_mean(Tensor([[1, 3], [5, 7]]), 1).data, [2, 6])
    assert np.array_equal(T.reduce_mean(Tensor([[1, 3], [5, 7]]), 0).data, [3, 5])
    assert np.array_equal(T.reduce_mean(Tensor([[4.0, -1.0]]), 0).data, [4.0, -1.0])
    assert np.array_equal(T.reduce_mean(Tensor([[2, 2], [2, 2]]), 0).data, [2, 2])


def test_reduce_mean_zero_extent():
    with pytest.raises(ShapeError):
        T.reduce_mean(Tensor(np.zeros((0, 3))), 0)


def test_elementwise_examples():
    assert T.elementwise(Tensor([0.0]), "exp").data[0] == 1.0
    back = T.elementwise(T.elementwise(Tensor([2.0]), "exp"), "log").data[0]
    assert abs(back - 2.0) <= 1e-12
    with pytest.raises(DomainError):
        T.elementwise(Tensor([1.0]), "div", Tensor([0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))


def test_only_scalar_broadcast():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    assert np.array_equal((Tensor(np.ones((2, 3))) * 2.0).data, 2 * np.ones((2, 3)))


# -- backward -----------------------------------------------------------------

def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.reduce_sum(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_root():
    x = leaf([1.0, 2.0])
    root = T.reduce_sum(x) * 0.0 + 5.0
    T.backward(root)
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_backward_mean():
    x = leaf([1.0, -2.0, 3.0, 0.5])
    T.backward(T.reduce_mean(x))
    assert np.array_equal(x.grad, [0.25] * 4)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_repeated_backward_recomputes_from_zero():
    x = leaf([1.0, 2.0])
    root = T.reduce_sum(T.square(x))
    T.backward(root)
    first = x.grad.copy()
    T.backward(root)
    assert np.array_equal(x.grad, first)


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = x * x
    T.backward(T.reduce_sum(y + y))
    assert np.array_equal(x.grad, [12.0])


def test_backward_linearity():
    rng = np.random.default_rng(3)
    x = leaf(rng.uniform(-2, 2, size=5))

    def f(v):
        return T.reduce_sum(T.tanh(v) * v)

    def g(v):
        return T.reduce_sum(T.exp(v * 0.5))

    T.backward(f(x))
    gf = x.grad.copy()
    T.backward(g(x))
    gg = x.grad.copy()
    T.backward(f(x) + g(x))
    assert np.allclose(x.grad, gf + gg, rtol=1e-14, atol=1e-14)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


# -- gradcheck ----------------------------------------------------------------

def test_gradcheck_quadratic_passes():
    x = leaf([0.5, -1.5, 2.0])
    A = Tensor([[2.0, 0.3, 0.0], [0.3, 1.0, -0.4], [0.0, -0.4, 3.0]])
    rep = gradcheck(lambda p: T.reduce_sum(T.matmul(p["x"].reshape(1, 3), A) * p["x"].reshape(1, 3)),
                    {"x": x}, step=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_gradcheck_flags_corrupted_rule():
    def bad_square(x):
        return make_node(x.data ** 2, (x,), lambda g: (3.0 * g * x.data,))

    good = leaf([0.7, -0.2])
    bad = leaf([1.1, 0.4])
    rep = gradcheck(lambda p: T.reduce_sum(T.square(p["good"])) + T.reduce_sum(bad_square(p["bad"])),
                    {"good": good, "bad": bad})
    assert not rep.passed
    assert rep.worst_param == "bad"
    assert rep.failing == ["bad"]


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_gradcheck_non_finite_names_parameter():
    x = leaf([709.0 / 710.0])
    with pytest.raises(T.GradcheckError, match="x"):
        gradcheck(lambda p: T.reduce_sum(T.exp(p["x"] * 710.0)), {"x": x}, step=0.1)


def test_gradcheck_probe_domain_error_names_parameter():
    x = leaf([1e-7])
    with pytest.raises(T.GradcheckError, match="x"):
        gradcheck(lambda p: T.reduce_sum(T.log(p["x"])), {"x": x}, step=1e-5)


# -- every op against central differences --------------------------------------

def _w(rng, shape):
    return Tensor(rng.normal(size=shape))


OPS = {
    "add": lambda p, r: T.add(p["a"], p["b"]),
    "sub": lambda p, r: T.sub(p["a"], p["b"]),
    "mul": lambda p, r: T.mul(p["a"], p["b"]),
    "div": lambda p, r: T.div(p["a"], T.add(T.square(p["b"]), 0.5)),
    "scalar_mul": lambda p, r: T.mul(p["a"], T.reduce_sum(p["b"])),
    "neg": lambda p, r: T.neg(p["a"]),
    "exp": lambda p, r: T.exp(p["a"]),
    "log": lambda p, r: T.log(T.add(T.square(p["a"]), 0.3)),
    "sqrt": lambda p, r: T.sqrt(T.add(T.square(p["a"]), 0.3)),
    "square": lambda p, r: T.square(p["a"]),
    "tanh": lambda p, r: T.tanh(p["a"]),
    "sigmoid": lambda p, r: T.sigmoid(p["a"]),
    "matmul": lambda p, r: T.matmul(p["a"], p["b"].T),
    "transpose": lambda p, r: T.transpose(p["a"]),
    "reshape": lambda p, r: T.reshape(p["a"], (3, 2)),
    "reduce_sum": lambda p, r: T.reduce_sum(p["a"], axis=0),
    "reduce_mean": lambda p, r: T.reduce_mean(p["a"], axis=1, keepdims=True),
    "softmax": lambda p, r: T.softmax(p["a"], axis=1),
    "masked_softmax": lambda p, r: T.softmax(p["a"], axis=1, mask=np.array([[1, 0, 1], [1, 1, 0]], bool)),
    "log_softmax": lambda p, r: T.log_softmax(p["a"], axis=0),
    "broadcast_to": lambda p, r: T.broadcast_to(p["a"][0], (4, 3)),
    "concat": lambda p, r: T.concat([p["a"], p["b"]], axis=0),
    "stack": lambda p, r: T.stack([p["a"], p["b"]], axis=1),
    "getitem": lambda p, r: p["a"][:, 1:],
    "take_rows": lambda p, r: T.take_rows(p["a"], np.array([[1, 0], [1, 1]])),
    "pick": lambda p, r: T.pick(p["a"], np.array([2, 0])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_matches_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    build = OPS[name]
    for _ in range(100):
        p = {"a": leaf(rng.uniform(-2, 2, size=(2, 3))), "b": leaf(rng.uniform(-2, 2, size=(2, 3)))}
        out = build(p, rng)
        w = _w(rng, out.shape)
        rep = gradcheck(lambda q: T.reduce_sum(build(q, rng) * w), p, step=1e-5, tol=1e-4)
        assert rep.passed, f"{name}: {rep}"


def test_absolute_and_clamp_away_from_kinks():
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = rng.uniform(0.1, 2, size=4) * rng.choice([-1, 1], size=4)
        p = {"x": leaf(x)}
        w = _w(rng, (4,))
        assert gradcheck(lambda q: T.reduce_sum(T.absolute(q["x"]) * w), p).passed
        assert gradcheck(lambda q: T.reduce_sum(T.clamp_min(q["x"], 0.05) * w), p).passed


def test_log_softmax_matches_log_of_softmax():
    x = np.array([[0.1, -3.0, 2.5], [7.0, 7.0, -1.0]])
    assert np.allclose(T.log_softmax(Tensor(x), 1).data, np.log(T.softmax(Tensor(x), 1).data), atol=1e-14)


def test_item_and_scalar_shapes():
    assert T.reduce_sum(Tensor([1.0, 2.0])).item() == 3.0
    assert math.isclose(Tensor([[4.0]]).item(), 4.0)
