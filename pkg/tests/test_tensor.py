import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from maformer import kernels
from maformer import tensor as T
from maformer.gradcheck import finite_diff_grad, rel_error
from maformer.tensor import DimensionError, Tape, Tensor


def grad_of(fn, x):
    tape = Tape()
    t = tape.watch(np.array(x, dtype=np.float64))
    out = fn(t)
    tape.backward(out)
    return t.grad


def check(fn, x, tol=1e-6):
    a = grad_of(fn, x)
    n = finite_diff_grad(fn, x)
    assert rel_error(a, n) < tol


# forward examples ---------------------------------------------------------

def test_matmul_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_softmax_example():
    y = T.softmax(Tensor([[0.0, 0.0]]), axis=-1).data
    assert np.allclose(y, [[0.5, 0.5]])


def test_layer_norm_example():
    x = Tensor([[1.0, 2.0, 3.0]])
    y = T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0).data
    assert np.allclose(y, [[-1.2247449, 0.0, 1.2247449]], atol=1e-6)


def test_gelu_matches_erf_form():
    from math import erf, sqrt
    xs = np.linspace(-4, 4, 17)
    ref = np.array([0.5 * v * (1 + erf(v / sqrt(2))) for v in xs])
    assert np.allclose(T.gelu(Tensor(xs)).data, ref, atol=1e-12)


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(Tensor(np.zeros((4, 5))), [0, 1, 2, 3])
    assert loss.item() == pytest.approx(np.log(5))


def test_rejects_nan_and_inf():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_reshape_size_error():
    with pytest.raises(DimensionError):
        T.reshape(Tensor(np.ones(6)), (4, 2))


def test_tape_counts_matmul_macs():
    tape = Tape()
    a = tape.watch(np.ones((2, 3, 4)))
    T.matmul(a, np.ones((4, 5)))
    assert tape.macs == 2 * 3 * 4 * 5


def test_backward_requires_scalar():
    tape = Tape()
    a = tape.watch(np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(T.mul(a, 2.0))


def test_softmax_jacobian_row():
    g = grad_of(lambda t: T.take(T.softmax(t, axis=-1), np.array([0]), axis=0), np.zeros(2))
    assert np.allclose(g, [0.25, -0.25])


def test_shared_subexpression_sums_paths():
    """d/dx of f(x) + f(x) built from one shared node equals twice d/dx f(x)."""
    w = np.array([0.3, -1.2, 2.0])
    x0 = np.array([0.5, -0.1, 0.8])

    def f(t):
        return T.sum_(T.mul(T.gelu(T.mul(t, w)), T.softmax(t)))

    def shared(t):
        y = f(t)
        return T.add(y, y)

    assert np.allclose(grad_of(shared, x0), 2 * grad_of(f, x0), atol=1e-14)


def test_gradient_accumulates_over_fanout():
    g = grad_of(lambda t: T.sum_(T.add(T.mul(t, t), t)), np.array([1.0, -2.0]))
    assert np.allclose(g, [3.0, -3.0])


# gradients against finite differences -------------------------------------

R = np.random.default_rng(3)
W = R.standard_normal((4, 3))
C1 = R.standard_normal((3, 4))
C2 = R.standard_normal((3, 4))
C3 = R.standard_normal((4, 2, 3))
C4 = R.standard_normal((2, 6))
C5 = R.standard_normal((4, 6))
C6 = R.standard_normal((3, 4))
C7 = R.standard_normal((2, 2, 3))
C8 = R.standard_normal((2, 3, 2))


@pytest.mark.parametrize("name,fn,shape", [
    ("add_broadcast", lambda t: T.sum_(T.mul(T.add(t, np.arange(3.0)), t)), (2, 3)),
    ("sub", lambda t: T.sum_(T.mul(T.sub(1.0, t), t)), (5,)),
    ("div", lambda t: T.sum_(T.div(t, T.add(T.mul(t, t), 1.0))), (4,)),
    ("matmul", lambda t: T.sum_(T.mul(T.matmul(t, W), T.matmul(t, W))), (2, 5, 4)),
    ("linear", lambda t: T.sum_(T.gelu(T.linear(t, W, np.ones(3)))), (3, 4)),
    ("gelu", lambda t: T.sum_(T.mul(T.gelu(t), np.arange(6.0))), (6,)),
    ("softmax", lambda t: T.sum_(T.mul(T.softmax(t, axis=-1), C1)), (3, 4)),
    ("softmax_axis0", lambda t: T.sum_(T.mul(T.softmax(t, axis=0), C2)), (3, 4)),
    ("mean", lambda t: T.sum_(T.mul(T.mean(t, axis=1), T.mean(t, axis=1))), (2, 3, 2)),
    ("permute", lambda t: T.sum_(T.mul(T.permute(t, (2, 0, 1)), C3)), (2, 3, 4)),
    ("concat", lambda t: T.sum_(T.mul(T.concat([t, T.mul(t, t)], axis=1), C4)), (2, 3)),
    ("slice", lambda t: T.sum_(T.mul(t[:, 1:3], t[:, 0:2])), (3, 4)),
    ("pad", lambda t: T.sum_(T.mul(T.pad(t, ((1, 0), (0, 2))), C5)), (3, 4)),
    ("roll", lambda t: T.sum_(T.mul(T.roll(t, (1, -2), (0, 1)), C6)), (3, 4)),
    ("take_2d_index", lambda t: T.sum_(T.mul(T.take(t, np.array([[0, 2], [2, 1]]), axis=0),
                                            C7)), (3, 3)),
    ("interp", lambda t: T.sum_(T.mul(T.interp_linear_tokens(t, 3), C8)), (2, 7, 2)),
    ("cross_entropy", lambda t: T.cross_entropy(t, [1, 0, 3]), (3, 4)),
])
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients(name, fn, shape, seed):
    check(fn, np.random.default_rng(seed).uniform(-1, 1, shape), tol=1e-4)


def test_layer_norm_gradients():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((3, 5))
    g0 = rng.standard_normal(5)
    b0 = rng.standard_normal(5)
    w = rng.standard_normal((3, 5))
    check(lambda t: T.sum_(T.mul(T.layer_norm(t, g0, b0), w)), x0)
    check(lambda t: T.sum_(T.mul(T.layer_norm(x0, t, b0), w)), g0)
    check(lambda t: T.sum_(T.mul(T.layer_norm(x0, g0, t), w)), b0)


# properties ----------------------------------------------------------------

floats = st.floats(-20, 20, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=floats),
       st.floats(-50, 50))
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    y = T.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert np.allclose(T.softmax(Tensor(x + c), axis=-1).data, y, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
                  elements=floats), st.permutations([0, 1, 2]))
def test_reshape_permute_roundtrip(x, perm):
    t = T.reshape(T.reshape(Tensor(x), (x.size,)), x.shape)
    p = T.permute(t, tuple(perm))
    back = T.permute(p, tuple(np.argsort(perm)))
    assert np.array_equal(back.data, x)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=floats), hnp.arrays(np.float64, (3, 4), elements=floats),
       st.floats(-3, 3), st.floats(-3, 3))
def test_linear_is_linear(a, b, alpha, beta):
    lhs = T.linear(Tensor(alpha * a + beta * b), W).data
    rhs = alpha * T.linear(Tensor(a), W).data + beta * T.linear(Tensor(b), W).data
    assert np.allclose(lhs, rhs, atol=1e-9)


# kernel backends -----------------------------------------------------------

def test_numba_and_numpy_kernels_agree():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 7))
    g = rng.standard_normal((6, 7))
    gamma, beta = rng.standard_normal(7), rng.standard_normal(7)
    y1, m1, r1 = kernels.np_layer_norm_fwd(x, gamma, beta, 1e-5)
    y2, m2, r2 = kernels.nb_layer_norm_fwd(x, gamma, beta, 1e-5)
    assert np.allclose(y1, y2, atol=1e-12)
    for a, b in zip(kernels.np_layer_norm_bwd(g, x, gamma, m1, r1),
                    kernels.nb_layer_norm_bwd(g, x, gamma, m2, r2)):
        assert np.allclose(a, b, atol=1e-12)
    s1, s2 = kernels.np_softmax_fwd(x), kernels.nb_softmax_fwd(x)
    assert np.allclose(s1, s2, atol=1e-14)
    assert np.allclose(kernels.np_softmax_bwd(s1, g), kernels.nb_softmax_bwd(s2, g), atol=1e-13)
    assert np.allclose(kernels.np_gelu_fwd(x), kernels.nb_gelu_fwd(x), atol=1e-12)
    assert np.allclose(kernels.np_gelu_bwd(x, g), kernels.nb_gelu_bwd(x, g), atol=1e-12)
    idx = np.array([0, 2, 0, 1])
    src = rng.standard_normal((4, 3))
    o1, o2 = np.zeros((3, 3)), np.zeros((3, 3))
    kernels.np_scatter_add_rows(o1, idx, src)
    kernels.nb_scatter_add_rows(o2, idx, src)
    assert np.allclose(o1, o2)


def test_backend_flag(monkeypatch):
    monkeypatch.setenv("MAFORMER_NUMBA", "0")
    assert kernels._want_numba() is False
    monkeypatch.setenv("MAFORMER_NUMBA", "1")
    assert kernels._want_numba() is True
