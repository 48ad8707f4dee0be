"""Multi-head attention and the two local window schemes.

``shifted_window``: square windows, alternately displaced by half a window.
``cross_shaped``: the channel dim is halved; the first half attends within
horizontal stripes, the second within vertical stripes, and the halves are
concatenated again before the output projection.

Maps that do not divide evenly are zero-padded at the bottom/right; padded
keys are masked with ``-inf`` and padded outputs cropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import DimensionError, Tensor

SHIFTED_WINDOW = "shifted_window"
CROSS_SHAPED = "cross_shaped"
ATTENTION_KINDS = (SHIFTED_WINDOW, CROSS_SHAPED)


@dataclass(frozen=True)
class WindowSpec:
    kind: str = CROSS_SHAPED
    window_size: int = 7
    stripe_width: int = 1
    shift: int = 0
    rel_pos_bias: bool = False

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.window_size <= 0 or self.stripe_width <= 0 or self.shift < 0:
            raise ConfigError(f"invalid window spec {self}")

    def resolve(self, hw) -> "WindowSpec":
        """Clamp window/stripe sizes to a map of size ``hw``.

        A window at least as large as the map collapses to the map itself and
        disables shifting.
        """
        H, W = hw
        if self.kind == SHIFTED_WINDOW:
            if min(H, W) <= self.window_size:
                return WindowSpec(self.kind, min(H, W), self.stripe_width, 0, self.rel_pos_bias)
            return self
        sw = min(self.stripe_width, H, W)
        return WindowSpec(self.kind, self.window_size, sw, 0, self.rel_pos_bias)


@dataclass(frozen=True)
class MultiHeadSpec:
    num_heads: int
    head_dim: int

    @classmethod
    def for_channels(cls, channels: int, num_heads: int) -> "MultiHeadSpec":
        if num_heads <= 0 or channels % num_heads:
            raise ConfigError(f"{channels} channels are not divisible into {num_heads} heads")
        return cls(num_heads, channels // num_heads)


# --------------------------------------------------------------------------
# partition helpers
# --------------------------------------------------------------------------

def _check_tokens(x: Tensor, hw):
    H, W = hw
    if x.ndim != 3 or x.shape[1] != H * W:
        raise DimensionError(f"expected (B, {H}*{W}, C) tokens, got {x.shape}")


def window_partition(x: Tensor, hw, window_size: int) -> Tensor:
    """``(B, H*W, C)`` -> ``(B*nW, w*w, C)``; windows in row-major order per image."""
    if window_size <= 0:
        raise ValueError(f"window_size must be positive, got {window_size}")
    _check_tokens(x, hw)
    H, W = hw
    w = window_size
    if H % w or W % w:
        raise DimensionError(f"map {H}x{W} is not divisible by window {w}")
    B, _, C = x.shape
    x = T.reshape(x, (B, H // w, w, W // w, w, C))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * (H // w) * (W // w), w * w, C))


def window_reverse(windows: Tensor, hw, window_size: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    H, W = hw
    w = window_size
    if w <= 0 or H % w or W % w:
        raise DimensionError(f"map {H}x{W} is not divisible by window {w}")
    nw = (H // w) * (W // w)
    if windows.ndim != 3 or windows.shape[1] != w * w or windows.shape[0] % nw:
        raise DimensionError(f"windows {windows.shape} inconsistent with map {H}x{W}, window {w}")
    B = windows.shape[0] // nw
    C = windows.shape[2]
    x = T.reshape(windows, (B, H // w, W // w, w, w, C))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H * W, C))


def _h_stripes(x4: Tensor, sw: int) -> Tensor:
    B, H, W, C = x4.shape
    return T.reshape(x4, (B * (H // sw), sw * W, C))


def _h_unstripes(s: Tensor, B, H, W) -> Tensor:
    return T.reshape(s, (B, H, W, s.shape[-1]))


def _v_stripes(x4: Tensor, sw: int) -> Tensor:
    B, H, W, C = x4.shape
    x = T.reshape(x4, (B, H, W // sw, sw, C))
    x = T.permute(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (B * (W // sw), H * sw, C))


def _v_unstripes(s: Tensor, B, H, W, sw) -> Tensor:
    C = s.shape[-1]
    x = T.reshape(s, (B, W // sw, H, sw, C))
    x = T.permute(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (B, H, W, C))


def cross_shaped_split(x: Tensor, hw, stripe_width: int):
    """Split channels in half and cut each half into stripes.

    Returns ``(horizontal, vertical)``: ``(B*H/sw, sw*W, C/2)`` and
    ``(B*W/sw, H*sw, C/2)``.
    """
    _check_tokens(x, hw)
    H, W = hw
    B, _, C = x.shape
    if C % 2:
        raise ValueError(f"cross-shaped attention needs an even channel count, got {C}")
    if stripe_width <= 0 or H % stripe_width or W % stripe_width:
        raise DimensionError(f"map {H}x{W} is not divisible by stripe width {stripe_width}")
    x4 = T.reshape(x, (B, H, W, C))
    half = C // 2
    return (_h_stripes(x4[..., :half], stripe_width),
            _v_stripes(x4[..., half:], stripe_width))


def cross_shaped_merge(horizontal: Tensor, vertical: Tensor, hw, stripe_width: int, batch: int) -> Tensor:
    """Inverse of :func:`cross_shaped_split`."""
    H, W = hw
    a = _h_unstripes(horizontal, batch, H, W)
    b = _v_unstripes(vertical, batch, H, W, stripe_width)
    x4 = T.concat([a, b], axis=-1)
    return T.reshape(x4, (batch, H * W, x4.shape[-1]))


# --------------------------------------------------------------------------
# attention kernel
# --------------------------------------------------------------------------

def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                       mask=None, bias: Tensor | None = None) -> Tensor:
    """Per-head ``softmax(q k^T / sqrt(d)) v`` with heads re-concatenated.

    ``q``: ``(N, Tq, C)``; ``k``, ``v``: ``(N, Tk, C)``. ``mask`` is an additive
    constant broadcastable to ``(N, heads, Tq, Tk)`` (0 or ``-inf``); ``bias``
    a learnable additive term of the same broadcast shape.
    """
    N, Tq, C = q.shape
    Tk = k.shape[1]
    if k.shape[-1] != C or v.shape[-1] != C or v.shape[1] != Tk:
        raise DimensionError(f"attention operands disagree: q{q.shape} k{k.shape} v{v.shape}")
    spec = MultiHeadSpec.for_channels(C, num_heads)
    h, d = spec.num_heads, spec.head_dim
    qh = T.permute(T.reshape(q, (N, Tq, h, d)), (0, 2, 1, 3))
    kt = T.permute(T.reshape(k, (N, Tk, h, d)), (0, 2, 3, 1))
    vh = T.permute(T.reshape(v, (N, Tk, h, d)), (0, 2, 1, 3))
    scores = T.mul(T.matmul(qh, kt), 1.0 / math.sqrt(d))
    if bias is not None:
        scores = T.add(scores, bias)
    if mask is not None:
        scores = T.add(scores, T.as_tensor(np.asarray(mask, dtype=scores.dtype)))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, vh)
    return T.reshape(T.permute(out, (0, 2, 1, 3)), (N, Tq, C))


def mhsa(q_in: Tensor, k_in: Tensor, v_in: Tensor, params, num_heads: int, mask=None) -> Tensor:
    """Projected multi-head attention: q/k/v linears, kernel, output projection."""
    if q_in.shape[-1] != k_in.shape[-1] or k_in.shape[-1] != v_in.shape[-1]:
        raise ConfigError(f"channel mismatch: {q_in.shape[-1]}, {k_in.shape[-1]}, {v_in.shape[-1]}")
    MultiHeadSpec.for_channels(q_in.shape[-1], num_heads)
    q = T.linear(q_in, params["q.weight"], params["q.bias"])
    k = T.linear(k_in, params["k.weight"], params["k.bias"])
    v = T.linear(v_in, params["v.weight"], params["v.bias"])
    out = scaled_dot_product(q, k, v, num_heads, mask)
    return T.linear(out, params["proj.weight"], params["proj.bias"])


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------

def _key_mask(allowed: np.ndarray) -> np.ndarray:
    m = np.where(allowed, 0.0, -np.inf)
    return m


def shifted_window_mask(hw, window_size: int, shift: int):
    """Additive mask ``(nW, 1, w*w, w*w)`` for the padded (and rolled) map, or None.

    Tokens attend only to keys from the same pre-shift region and never to
    padding. Every query keeps at least itself.
    """
    H, W = hw
    w, s = window_size, shift
    Hp, Wp = -(-H // w) * w, -(-W // w) * w
    if s == 0 and Hp == H and Wp == W:
        return None
    label = np.zeros((Hp, Wp), dtype=np.int64)
    if s:
        cnt = 0
        for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
                label[hs, ws] = cnt
                cnt += 1
    padded = np.zeros((Hp, Wp), dtype=bool)
    padded[H:, :] = True
    padded[:, W:] = True
    if s:
        padded = np.roll(padded, (-s, -s), (0, 1))

    def parts(a):
        return a.reshape(Hp // w, w, Wp // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)

    lw, pw = parts(label), parts(padded)
    allowed = (lw[:, :, None] == lw[:, None, :]) & ~pw[:, None, :]
    allowed |= np.eye(w * w, dtype=bool)[None]
    return _key_mask(allowed)[:, None]


def _stripe_pad_mask(n_stripes: int, tokens: int, padded: np.ndarray):
    """``padded`` marks padded keys per stripe ``(n_stripes, tokens)``."""
    if not padded.any():
        return None
    allowed = ~padded[:, None, :] | np.eye(tokens, dtype=bool)[None]
    allowed = np.broadcast_to(allowed, (n_stripes, tokens, tokens))
    return _key_mask(allowed)[:, None]


def relative_position_index(window_size: int) -> np.ndarray:
    w = window_size
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


# --------------------------------------------------------------------------
# local window attention
# --------------------------------------------------------------------------

def local_window_attention(x: Tensor, hw, spec: WindowSpec, params, num_heads: int) -> Tensor:
    """Self-attention confined to windows or stripes; output shape equals input shape."""
    _check_tokens(x, hw)
    spec = spec.resolve(hw)
    MultiHeadSpec.for_channels(x.shape[-1], num_heads)
    q = T.linear(x, params["q.weight"], params["q.bias"])
    k = T.linear(x, params["k.weight"], params["k.bias"])
    v = T.linear(x, params["v.weight"], params["v.bias"])
    if spec.kind == SHIFTED_WINDOW:
        out = _shifted_window_core(q, k, v, hw, spec, num_heads, params)
    else:
        out = _cross_shaped_core(q, k, v, hw, spec, num_heads)
    return T.linear(out, params["proj.weight"], params["proj.bias"])


def _to_padded_map(t: Tensor, hw, Hp, Wp, shift):
    B, _, C = t.shape
    H, W = hw
    m = T.reshape(t, (B, H, W, C))
    m = T.pad(m, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
    if shift:
        m = T.roll(m, (-shift, -shift), (1, 2))
    return T.reshape(m, (B, Hp * Wp, C))


def _shifted_window_core(q, k, v, hw, spec: WindowSpec, num_heads, params):
    H, W = hw
    B, _, C = q.shape
    w, s = spec.window_size, spec.shift
    Hp, Wp = -(-H // w) * w, -(-W // w) * w
    qw, kw, vw = (window_partition(_to_padded_map(t, hw, Hp, Wp, s), (Hp, Wp), w) for t in (q, k, v))
    mask = shifted_window_mask(hw, w, s)
    if mask is not None:
        mask = np.tile(mask, (B, 1, 1, 1))
    bias = None
    if spec.rel_pos_bias:
        table = params["rel_pos_table"]
        idx = relative_position_index(w).reshape(-1)
        bias = T.take(table, idx, axis=0)
        bias = T.permute(T.reshape(bias, (w * w, w * w, num_heads)), (2, 0, 1))
    out = scaled_dot_product(qw, kw, vw, num_heads, mask, bias)
    out = window_reverse(out, (Hp, Wp), w)
    out = T.reshape(out, (B, Hp, Wp, C))
    if s:
        out = T.roll(out, (s, s), (1, 2))
    out = out[:, :H, :W, :]
    return T.reshape(out, (B, H * W, C))


def branch_heads(num_heads: int) -> int:
    return max(num_heads // 2, 1)


def _cross_shaped_core(q, k, v, hw, spec: WindowSpec, num_heads):
    H, W = hw
    B, _, C = q.shape
    if C % 2:
        raise ConfigError(f"cross-shaped attention needs an even channel count, got {C}")
    half = C // 2
    nh = branch_heads(num_heads)
    MultiHeadSpec.for_channels(half, nh)
    sw = spec.stripe_width
    Hp, Wp = -(-H // sw) * sw, -(-W // sw) * sw
    maps = [T.reshape(t, (B, H, W, C)) for t in (q, k, v)]

    # horizontal stripes: rows padded to Hp
    hq, hk, hv = (_h_stripes(T.pad(m[..., :half], ((0, 0), (0, Hp - H), (0, 0), (0, 0))), sw)
                  for m in maps)
    pad_rows = np.zeros((Hp, W), dtype=bool)
    pad_rows[H:] = True
    hmask = _stripe_pad_mask(Hp // sw, sw * W, pad_rows.reshape(Hp // sw, sw * W))
    if hmask is not None:
        hmask = np.tile(hmask, (B, 1, 1, 1))
    ho = scaled_dot_product(hq, hk, hv, nh, hmask)
    ho = _h_unstripes(ho, B, Hp, W)[:, :H]

    # vertical stripes: columns padded to Wp
    vq, vk, vv = (_v_stripes(T.pad(m[..., half:], ((0, 0), (0, 0), (0, Wp - W), (0, 0))), sw)
                  for m in maps)
    pad_cols = np.zeros((H, Wp), dtype=bool)
    pad_cols[:, W:] = True
    vpad = pad_cols.reshape(H, Wp // sw, sw).transpose(1, 0, 2).reshape(Wp // sw, H * sw)
    vmask = _stripe_pad_mask(Wp // sw, H * sw, vpad)
    if vmask is not None:
        vmask = np.tile(vmask, (B, 1, 1, 1))
    vo = scaled_dot_product(vq, vk, vv, nh, vmask)
    vo = _v_unstripes(vo, B, H, Wp, sw)[:, :, :W]

    out = T.concat([ho, vo], axis=-1)
    return T.reshape(out, (B, H * W, C))
