"""Global Learning with Down-sampling and its convolutional ablation baseline."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .config import ConfigError, gld_out_len
from .layers import conv2d_tokens
from .tensor import Tensor


@dataclass(frozen=True)
class GldSpec:
    """Global branch description bound to an input length ``in_len``."""

    ratio: float = 0.5
    in_len: int = 1
    kind: str = "gld"

    @property
    def out_len(self) -> int:
        return gld_out_len(self.in_len, self.ratio)


def gld_forward(x: Tensor, spec: GldSpec, params) -> Tensor:
    """Down-sample ``x[B, L, C]`` to ``spec.out_len`` global tokens.

    Two linear paths are summed: a parameter-free positional path that
    linearly interpolates along the token axis, and a fully connected layer
    that mixes all ``L`` tokens per channel (weight ``(L, out_len)`` plus bias).
    """
    if x.ndim != 3:
        raise ConfigError(f"GLD expects (B, L, C) tokens, got {x.shape}")
    B, L, C = x.shape
    if L != spec.in_len:
        raise ConfigError(f"GLD built for resolution L={spec.in_len}, got L={L}")
    out_len = spec.out_len
    pos = T.interp_linear_tokens(x, out_len)
    xt = T.permute(x, (0, 2, 1))  # (B, C, L)
    fc = T.linear(xt, params["weight"], params["bias"])
    fc = T.permute(fc, (0, 2, 1))
    return T.add(pos, fc)


def conv_downsample(x: Tensor, hw, params, kernel=(2, 1), stride=(2, 1)):
    """Strided convolution ``C -> C`` used in place of GLD for the ablation.

    Returns ``(tokens, (Ho, Wo))``. The default ``(2, 1)`` stride halves the
    token count, matching a 0.5 down-sampling ratio.
    """
    H, W = hw
    if x.ndim != 3 or x.shape[1] != H * W:
        raise ConfigError(f"conv down-sampling needs an {H}x{W} map, got tokens {x.shape}")
    if H < kernel[0] or W < kernel[1]:
        raise ConfigError(f"map {H}x{W} is smaller than the {kernel} kernel")
    return conv2d_tokens(x, hw, params, tuple(kernel), tuple(stride))
