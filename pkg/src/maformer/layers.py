"""Small composite layers shared by the blocks and the backbone."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


def norm(x: Tensor, params, eps=1e-5) -> Tensor:
    return T.layer_norm(x, params["weight"], params["bias"], eps)


def dense(x: Tensor, params) -> Tensor:
    return T.linear(x, params["weight"], params.get("bias"))


def mlp(x: Tensor, params) -> Tensor:
    """linear -> GELU -> linear."""
    return dense(T.gelu(dense(x, params.sub("fc1"))), params.sub("fc2"))


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth on a residual branch ``x[B, ...]``; identity when ``rng`` is None."""
    if rng is None or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape[0]) < keep).astype(x.dtype) / keep
    return T.mul(x, mask.reshape((-1,) + (1,) * (x.ndim - 1)))


def conv_output_size(size: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col_index(hw, kernel, stride, padding=(0, 0)):
    """Flat indices into the padded map for every (output position, kernel offset)."""
    H, W = hw
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    Hp, Wp = H + 2 * ph, W + 2 * pw
    Ho, Wo = conv_output_size(H, kh, sh, ph), conv_output_size(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"kernel {kernel} does not fit map {H}x{W}")
    oy, ox = np.meshgrid(np.arange(Ho) * sh, np.arange(Wo) * sw, indexing="ij")
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    rows = oy.reshape(-1, 1) + ky.reshape(1, -1)
    cols = ox.reshape(-1, 1) + kx.reshape(1, -1)
    return rows * Wp + cols, (Ho, Wo), (Hp, Wp)


def conv2d_tokens(x: Tensor, hw, params, kernel, stride, padding=(0, 0)):
    """2-D convolution on a token map ``(B, H*W, C)`` via gather + matmul.

    The weight is stored as ``(kh*kw*C_in, C_out)`` with kernel offsets
    major and input channels minor. Returns ``(tokens, (Ho, Wo))``.
    """
    B, L, C = x.shape
    H, W = hw
    if L != H * W:
        raise DimensionError(f"tokens {x.shape} do not match map {H}x{W}")
    idx, out_hw, padded_hw = im2col_index(hw, kernel, stride, padding)
    if padded_hw != (H, W):
        m = T.reshape(x, (B, H, W, C))
        m = T.pad(m, ((0, 0), (padding[0],) * 2, (padding[1],) * 2, (0, 0)))
        x = T.reshape(m, (B, padded_hw[0] * padded_hw[1], C))
    cols = T.take(x, idx, axis=1)
    cols = T.reshape(cols, (B, idx.shape[0], idx.shape[1] * C))
    return dense(cols, params), out_hw


def patchify(x: Tensor, hw, patch: int) -> Tensor:
    """Non-overlapping ``patch x patch`` neighbourhoods concatenated channel-wise.

    ``(B, H*W, C)`` -> ``(B, (H/p)*(W/p), p*p*C)``; the concatenation order is
    row offset, then column offset, then channel.
    """
    B, L, C = x.shape
    H, W = hw
    if H % patch or W % patch:
        raise DimensionError(f"map {H}x{W} is not divisible by patch size {patch}")
    m = T.reshape(x, (B, H // patch, patch, W // patch, patch, C))
    m = T.permute(m, (0, 1, 3, 2, 4, 5))
    return T.reshape(m, (B, (H // patch) * (W // patch), patch * patch * C))
