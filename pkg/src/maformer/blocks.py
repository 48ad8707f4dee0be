"""MAF block (local aggregation + global branch + fusion attention) and ViT block."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .attention import (
    SHIFTED_WINDOW,
    WindowSpec,
    local_window_attention,
    mhsa,
)
from .config import ConfigError
from .gld import GldSpec, conv_downsample, gld_forward
from .layers import conv_output_size, drop_path, mlp, norm
from .tensor import Tensor

MAF = "maf"
LOCAL_ENHANCED = "local_enhanced"


@dataclass(frozen=True)
class MafBlockSpec:
    channels: int
    hw: tuple
    window: WindowSpec
    num_heads: int
    global_kind: str = "gld"  # "gld" | "conv" | "none"
    gld_ratio: float = 0.5
    gld_in_len: int | None = None  # length fed to GLD; defaults to H*W
    conv_kernel: tuple = (2, 1)
    conv_stride: tuple = (2, 1)
    mlp_ratio: float = 4.0
    variant: str = MAF
    drop_path: float = 0.0
    strict_eq1: bool = False
    chained: bool = False  # GLD reads the previous block's global tokens
    eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in (MAF, LOCAL_ENHANCED):
            raise ConfigError(f"unknown fusion variant {self.variant!r}")
        if self.global_kind not in ("gld", "conv", "none"):
            raise ConfigError(f"unknown global kind {self.global_kind!r}")
        if not float(self.mlp_ratio * self.channels).is_integer():
            raise ConfigError(f"mlp_ratio*C = {self.mlp_ratio * self.channels} is not integral")

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.channels)

    @property
    def gld(self) -> GldSpec:
        H, W = self.hw
        return GldSpec(self.gld_ratio, self.gld_in_len or H * W, self.global_kind)

    @property
    def global_len(self) -> int:
        if self.global_kind == "gld":
            return self.gld.out_len
        if self.global_kind == "conv":
            H, W = self.hw
            return (conv_output_size(H, self.conv_kernel[0], self.conv_stride[0])
                    * conv_output_size(W, self.conv_kernel[1], self.conv_stride[1]))
        return 0


@dataclass(frozen=True)
class VitBlockSpec:
    channels: int
    num_heads: int
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    eps: float = 1e-5

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.channels)


# --------------------------------------------------------------------------
# parameter layouts: (name, shape, init) with init in {"normal", "zeros", "ones"}
# --------------------------------------------------------------------------

def _ln(name, c):
    return [(f"{name}.weight", (c,), "ones"), (f"{name}.bias", (c,), "zeros")]


def _lin(name, i, o, bias=True):
    out = [(f"{name}.weight", (i, o), "normal")]
    if bias:
        out.append((f"{name}.bias", (o,), "zeros"))
    return out


def _attn(name, c):
    return [p for k in ("q", "k", "v", "proj") for p in _lin(f"{name}.{k}", c, c)]


def _mlp(name, c, hidden):
    return _lin(f"{name}.fc1", c, hidden) + _lin(f"{name}.fc2", hidden, c)


def local_aggregation_layout(spec: MafBlockSpec):
    c = spec.channels
    out = _ln("norm1", c) + _attn("attn", c)
    w = spec.window.resolve(spec.hw)
    if w.kind == SHIFTED_WINDOW and w.rel_pos_bias:
        out.append(("attn.rel_pos_table", ((2 * w.window_size - 1) ** 2, spec.num_heads), "normal"))
    if not spec.strict_eq1:
        out += _ln("norm2", c)
    return out + _mlp("mlp", c, spec.hidden)


def maf_block_layout(spec: MafBlockSpec):
    c = spec.channels
    out = local_aggregation_layout(spec)
    if spec.global_kind == "none":
        return out
    if spec.global_kind == "gld":
        g = spec.gld
        out += _lin("gld", g.in_len, g.out_len)
    else:
        kh, kw = spec.conv_kernel
        out += _lin("conv", kh * kw * c, c)
    out += _ln("fuse_norm_l", c) + _ln("fuse_norm_g", c) + _attn("fusion", c)
    out += _ln("norm3", c) + _mlp("mlp2", c, spec.hidden)
    return out


def vit_block_layout(spec: VitBlockSpec):
    c = spec.channels
    return _ln("norm1", c) + _attn("attn", c) + _ln("norm2", c) + _mlp("mlp", c, spec.hidden)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def local_aggregation(x: Tensor, spec: MafBlockSpec, params, rng=None) -> Tensor:
    """Window attention sub-layer then MLP sub-layer, each with a residual."""
    a = local_window_attention(norm(x, params.sub("norm1"), spec.eps), spec.hw, spec.window,
                               params.sub("attn"), spec.num_heads)
    x = T.add(x, drop_path(a, spec.drop_path, rng))
    h = x if spec.strict_eq1 else norm(x, params.sub("norm2"), spec.eps)
    return T.add(x, drop_path(mlp(h, params.sub("mlp")), spec.drop_path, rng))


def maf_fusion(x_local: Tensor, x_global: Tensor, num_heads: int, params) -> Tensor:
    """Cross-attention: queries from local tokens, keys/values from global tokens."""
    if x_local.shape[-1] != x_global.shape[-1]:
        raise ConfigError(f"local ({x_local.shape[-1]}) and global ({x_global.shape[-1]}) channels differ")
    if x_global.shape[1] < 1:
        raise ConfigError("fusion needs at least one global token")
    return mhsa(x_local, x_global, x_global, params, num_heads)


def global_branch(source: Tensor, spec: MafBlockSpec, params) -> Tensor:
    if spec.global_kind == "gld":
        return gld_forward(source, spec.gld, params.sub("gld"))
    tokens, _ = conv_downsample(source, spec.hw, params.sub("conv"), spec.conv_kernel, spec.conv_stride)
    return tokens


def maf_block_forward(x: Tensor, spec: MafBlockSpec, params, rng=None,
                      global_in: Tensor | None = None, return_global: bool = False):
    """Full MAF block; output shape equals input shape.

    ``variant="maf"`` feeds the block input to the global branch,
    ``"local_enhanced"`` feeds the local branch output. With ``spec.chained``
    and a ``global_in`` the global branch reads that stream instead.
    """
    x_l = local_aggregation(x, spec, params, rng)
    if spec.global_kind == "none":
        return (x_l, None) if return_global else x_l
    if spec.chained and global_in is not None:
        source = global_in
    else:
        source = x if spec.variant == MAF else x_l
    x_g = global_branch(source, spec, params)
    fused = maf_fusion(norm(x_l, params.sub("fuse_norm_l"), spec.eps),
                       norm(x_g, params.sub("fuse_norm_g"), spec.eps),
                       spec.num_heads, params.sub("fusion"))
    out = T.add(x_l, drop_path(fused, spec.drop_path, rng))
    h = mlp(norm(out, params.sub("norm3"), spec.eps), params.sub("mlp2"))
    out = T.add(out, drop_path(h, spec.drop_path, rng))
    return (out, x_g) if return_global else out


def vit_block_forward(x: Tensor, spec: VitBlockSpec, params, rng=None) -> Tensor:
    """Pre-norm full self-attention block with an MLP."""
    h = norm(x, params.sub("norm1"), spec.eps)
    a = mhsa(h, h, h, params.sub("attn"), spec.num_heads)
    x = T.add(x, drop_path(a, spec.drop_path, rng))
    h = mlp(norm(x, params.sub("norm2"), spec.eps), params.sub("mlp"))
    return T.add(x, drop_path(h, spec.drop_path, rng))
