import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gatera_lab import autodiff as ad
from gatera_lab.autodiff import Tape, Tensor, backward, finite_difference_grad, relative_error
from gatera_lab.errors import ContractError, DomainError


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_col():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    from gatera_lab.errors import DimensionError

    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_hadamard_examples():
    assert ad.hadamard(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data.tolist() == [8.0, 15.0]
    a = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_array_equal(ad.hadamard(Tensor(a), Tensor(np.ones_like(a))).data, a)


def test_hadamard_broadcast_matches_expansion():
    rng = np.random.default_rng(2)
    col, mat = rng.normal(size=(4, 1)), rng.normal(size=(4, 6))
    expanded = np.repeat(col, 6, axis=1)
    np.testing.assert_allclose(ad.hadamard(Tensor(col), Tensor(mat)).data, expanded * mat, atol=0, rtol=0)


def test_broadcast_gradient_reduces_to_input_shape():
    rng = np.random.default_rng(3)
    col = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    mat = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    with Tape():
        backward(ad.tsum(ad.hadamard(col, mat)))
    np.testing.assert_allclose(col.grad, mat.data.sum(axis=1, keepdims=True))
    np.testing.assert_allclose(mat.grad, np.repeat(col.data, 6, axis=1))


def test_elementwise_unit_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


@pytest.mark.parametrize("z", [-2.0, 0.0, 3.0])
def test_sigmoid_derivative_fd(z):
    s = 1.0 / (1.0 + np.exp(-z))
    fd = finite_difference_grad(lambda t: ad.sigmoid(t).sum(), Tensor([z]))
    assert abs(fd.data[0] - s * (1 - s)) < 1e-9
    x = Tensor([z], requires_grad=True)
    with Tape():
        backward(ad.sigmoid(x).sum())
    assert abs(x.grad[0] - s * (1 - s)) < 1e-15


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-1.0]))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = ad.scalar_mul(x, 2.0)
        with pytest.raises(ContractError):
            backward(y)


def test_backward_sum_and_square():
    rng = np.random.default_rng(4)
    data = rng.normal(size=(2, 3, 4))
    x = Tensor(data, requires_grad=True)
    with Tape():
        backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones_like(data))
    y = Tensor(data, requires_grad=True)
    with Tape():
        backward(ad.tsum(ad.hadamard(y, y)))
    np.testing.assert_allclose(y.grad, 2 * data, rtol=0, atol=1e-15)


def test_no_grad_tensor_never_accumulates():
    c = Tensor(np.ones(3))
    x = Tensor(np.arange(3.0), requires_grad=True)
    with Tape():
        backward(ad.tsum(ad.hadamard(c, x)))
    assert c.grad is None and x.grad is not None


def test_two_consumers_accumulate():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape():
        y = ad.sigmoid(x)
        loss = ad.tsum(ad.add(ad.hadamard(y, x), ad.exp(x)))
        backward(loss)
    s = 1 / (1 + np.exp(-x.data))
    expected = s * (1 - s) * x.data + s + np.exp(x.data)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-14)


def test_grads_accumulate_across_calls():
    x = Tensor([2.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            backward(ad.tsum(ad.scalar_mul(x, 3.0)))
    assert x.grad[0] == 6.0
    x.zero_grad()
    assert x.grad is None


def test_no_tape_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = ad.sigmoid(x)
    assert y.tape_node is None


def test_fd_examples():
    np.testing.assert_allclose(finite_difference_grad(lambda t: t.sum(), Tensor(np.zeros((2, 3)))).data, 1.0, atol=1e-9)
    fd = finite_difference_grad(lambda t: ad.tsum(ad.hadamard(t, t)), Tensor([1.0, 2.0]), eps=1e-5)
    np.testing.assert_allclose(fd.data, [2.0, 4.0], atol=1e-8, rtol=0)


def test_composite_gated_hadamard_matches_fd():
    """(g(x) AB + 1) * W0 applied to x, every parameter against central differences."""
    rng = np.random.default_rng(5)
    d_in, d_out, r = 5, 4, 2
    W0 = Tensor(rng.normal(size=(d_out, d_in)))
    x = Tensor(rng.normal(size=(3, d_in)))
    target = rng.normal(size=(3, d_out))
    params = {
        "A": Tensor(rng.normal(size=(d_out, r)), requires_grad=True),
        "B": Tensor(rng.normal(size=(r, d_in)), requires_grad=True),
        "Wg": Tensor(rng.normal(size=(1, d_in)), requires_grad=True),
        "bg": Tensor(rng.normal(size=(1,)), requires_grad=True),
    }

    def loss_fn(p):
        g = ad.sigmoid(ad.matmul(x, ad.transpose(p["Wg"])) + p["bg"])  # [T,1]
        ab = ad.matmul(p["A"], p["B"])
        g3 = ad.reshape(g, (3, 1, 1))
        w = ad.hadamard(ad.add_scalar(ad.hadamard(g3, ab), 1.0), W0)  # [T,d_out,d_in]
        y = ad.reshape(ad.matmul(w, ad.reshape(x, (3, d_in, 1))), (3, d_out))
        diff = ad.sub(y, Tensor(target))
        return ad.tsum(ad.hadamard(diff, diff))

    with Tape():
        backward(loss_fn(params))
    for name, p in params.items():
        def f(v, name=name):
            q = dict(params)
            q[name] = v
            return loss_fn(q)

        fd = finite_difference_grad(f, p)
        assert relative_error(p.grad, fd) < 1e-6, name


def _random_graph(rng, variant):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)

    def loss_fn(xv, wv):
        h = ad.matmul(xv, wv)
        if variant == 0:
            h = ad.sigmoid(h)
        elif variant == 1:
            h = ad.softmax(h)
        elif variant == 2:
            h = ad.exp(ad.scalar_mul(h, 0.3))
        else:
            h = ad.log_softmax(h)
        return ad.mean(ad.hadamard(h, ad.add_scalar(ad.transpose(ad.transpose(h)), 1.0)))

    return x, w, loss_fn


def test_fd_agrees_with_backward_on_100_graphs():
    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(100):
        x, w, loss_fn = _random_graph(rng, i % 4)
        with Tape():
            backward(loss_fn(x, w))
        fx = finite_difference_grad(lambda v: loss_fn(v, w), x)
        fw = finite_difference_grad(lambda v: loss_fn(x, v), w)
        worst = max(worst, relative_error(np.concatenate([x.grad.ravel(), w.grad.ravel()]),
                                          np.concatenate([fx.data.ravel(), fw.data.ravel()])))
    assert worst < 1e-6


def test_layer_norm_and_embedding_gradients():
    rng = np.random.default_rng(7)
    table = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    gamma = Tensor(rng.normal(size=(4,)), requires_grad=True)
    beta = Tensor(rng.normal(size=(4,)), requires_grad=True)
    ids = np.array([[1, 3, 1], [5, 0, 2]])
    w = rng.normal(size=(2, 3, 4))

    def loss_fn(t, g, b):
        return ad.tsum(ad.hadamard(ad.layer_norm(ad.embedding(t, ids), g, b), Tensor(w)))

    with Tape():
        backward(loss_fn(table, gamma, beta))
    for p, f in (
        (table, lambda v: loss_fn(v, gamma, beta)),
        (gamma, lambda v: loss_fn(table, v, beta)),
        (beta, lambda v: loss_fn(table, gamma, v)),
    ):
        assert relative_error(p.grad, finite_difference_grad(f, p)) < 1e-7


# -- property tests ---------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6), elements=finite))
def test_softmax_rows_sum_to_one(a):
    out = ad.softmax(Tensor(a)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_sigmoid_open_interval_for_moderate_inputs(a):
    out = ad.sigmoid(Tensor(np.clip(a, -30, 30))).data
    assert np.all(out > 0) and np.all(out < 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_associative(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=s)) for s in ((m, k), (k, n), (n, p)))
    left = ad.matmul(ad.matmul(a, b), c).data
    right = ad.matmul(a, ad.matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-12, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-3, 3)))
def test_grad_shape_matches_data(a):
    x = Tensor(a, requires_grad=True)
    with Tape():
        backward(ad.mean(ad.exp(x)))
    assert x.grad.shape == x.data.shape
    np.testing.assert_allclose(x.grad, np.exp(a) / a.size, rtol=1e-14)


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
