import numpy as np
import pytest

from maformer import tensor as T
from maformer.config import ConfigError, gld_out_len
from maformer.gld import GldSpec, conv_downsample, gld_forward
from maformer.params import ParameterStore
from maformer.tensor import Tape, Tensor


def gld_params(L, out, rng, bias=True):
    return ParameterStore({"weight": rng.standard_normal((L, out)) / np.sqrt(L),
                           "bias": rng.standard_normal(out) if bias else np.zeros(out)}).bind()


@pytest.mark.parametrize("L,expected", [(4, 2), (64, 32), (3136, 1568), (7, 3)])
def test_output_length(L, expected, rng):
    spec = GldSpec(0.5, L)
    assert spec.out_len == expected == gld_out_len(L, 0.5)
    if L <= 64:
        y = gld_forward(Tensor(rng.standard_normal((2, L, 3))), spec, gld_params(L, expected, rng))
        assert y.shape == (2, expected, 3)


def test_no_global_tokens_is_an_error():
    with pytest.raises(ConfigError):
        GldSpec(0.5, 1).out_len


def test_output_length_3136_forward(rng):
    spec = GldSpec(0.5, 3136)
    y = gld_forward(Tensor(rng.standard_normal((1, 3136, 2))), spec, gld_params(3136, 1568, rng))
    assert y.shape == (1, 1568, 2)


def test_linear_without_bias(rng):
    spec = GldSpec(0.5, 16)
    p = gld_params(16, 8, rng, bias=False)
    a, b = rng.standard_normal((2, 1, 16, 4))
    lhs = gld_forward(Tensor(2.5 * a - 1.5 * b), spec, p).data
    rhs = 2.5 * gld_forward(Tensor(a), spec, p).data - 1.5 * gld_forward(Tensor(b), spec, p).data
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_affine_with_bias(rng):
    spec = GldSpec(0.5, 16)
    p = gld_params(16, 8, rng)
    a, b = rng.standard_normal((2, 1, 16, 4))
    t = 0.3
    lhs = gld_forward(Tensor(t * a + (1 - t) * b), spec, p).data
    rhs = t * gld_forward(Tensor(a), spec, p).data + (1 - t) * gld_forward(Tensor(b), spec, p).data
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_positional_path_is_interpolation(rng):
    """With a zero projection GLD reduces to linear resampling of the token axis."""
    L, out = 9, 4
    x = rng.standard_normal((1, L, 2))
    p = ParameterStore({"weight": np.zeros((L, out)), "bias": np.zeros(out)}).bind()
    y = gld_forward(Tensor(x), GldSpec(0.5, L), p).data
    pos = np.linspace(0, L - 1, out)
    ref = np.stack([np.interp(pos, np.arange(L), x[0, :, c]) for c in range(2)], axis=1)
    assert np.allclose(y[0], ref, atol=1e-12)


@pytest.mark.parametrize("L", [4, 64])
def test_global_reach(L, rng):
    """Every global token depends on every input token."""
    out = L // 2
    p = gld_params(L, out, rng)
    x0 = rng.standard_normal((1, L, 2))
    for j in range(out):
        tape = Tape()
        x = tape.watch(x0)
        y = gld_forward(x, GldSpec(0.5, L), p)
        tape.backward(T.sum_(T.take(y, np.array([j]), axis=1)))
        assert np.all(np.abs(x.grad[0]).sum(axis=-1) > 0)


def test_resolution_mismatch(rng):
    with pytest.raises(ConfigError, match="L=16"):
        gld_forward(Tensor(rng.standard_normal((1, 12, 2))), GldSpec(0.5, 16), gld_params(16, 8, rng))


def test_conv_downsample_against_direct_convolution(rng):
    H, W, C = 4, 3, 2
    kernel, stride = (2, 2), (2, 1)
    x = rng.standard_normal((1, H * W, C))
    w = rng.standard_normal((kernel[0] * kernel[1] * C, C))
    b = rng.standard_normal(C)
    y, (Ho, Wo) = conv_downsample(Tensor(x), (H, W), ParameterStore({"weight": w, "bias": b}).bind(),
                                  kernel, stride)
    assert (Ho, Wo) == (2, 2)
    m = x[0].reshape(H, W, C)
    wk = w.reshape(kernel[0], kernel[1], C, C)
    ref = np.zeros((Ho, Wo, C))
    for i in range(Ho):
        for j in range(Wo):
            for dy in range(kernel[0]):
                for dx in range(kernel[1]):
                    ref[i, j] += m[i * stride[0] + dy, j * stride[1] + dx] @ wk[dy, dx]
            ref[i, j] += b
    assert np.allclose(y.data[0], ref.reshape(-1, C), atol=1e-12)


def test_conv_downsample_halves_tokens(rng):
    C = 4
    p = ParameterStore({"weight": rng.standard_normal((2 * C, C)), "bias": np.zeros(C)}).bind()
    y, hw = conv_downsample(Tensor(rng.standard_normal((1, 64, C))), (8, 8), p)
    assert hw == (4, 8) and y.shape == (1, 32, C)
