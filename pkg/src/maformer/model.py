"""Full backbone: patch embedding, four stages with patch merging, pooled head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    MafBlockSpec,
    VitBlockSpec,
    maf_block_forward,
    maf_block_layout,
    vit_block_forward,
    vit_block_layout,
)
from .config import ConfigError, ModelConfig
from .layers import dense, norm, patchify
from .params import ParameterStore, Scope
from .tensor import DimensionError, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class StagePlan:
    index: int  # 1-based
    hw: tuple
    channels: int
    blocks: tuple  # MafBlockSpec | VitBlockSpec


def build_plan(config: ModelConfig) -> list[StagePlan]:
    heads = config.heads()
    rates = config.drop_path_rates()
    plans = []
    k = 0
    for s in range(1, 5):
        hw = config.stage_resolution(s)
        c = config.stage_dims[s - 1]
        blocks = []
        gld_len = hw[0] * hw[1]
        for b in range(config.stage_depths[s - 1]):
            if config.is_maf_stage(s):
                spec = MafBlockSpec(
                    channels=c, hw=hw, window=config.window_spec(s, b), num_heads=heads[s - 1],
                    global_kind=config.global_kind, gld_ratio=config.gld_ratio,
                    gld_in_len=gld_len, conv_kernel=tuple(config.conv_kernel),
                    conv_stride=tuple(config.conv_stride), mlp_ratio=config.mlp_ratio,
                    variant=config.fusion_variant, drop_path=rates[k],
                    strict_eq1=config.strict_eq1, chained=config.gld_chained, eps=config.ln_eps)
                if config.gld_chained and config.global_kind == "gld":
                    gld_len = spec.gld.out_len
            else:
                spec = VitBlockSpec(c, heads[s - 1], config.mlp_ratio, rates[k], config.ln_eps)
            blocks.append(spec)
            k += 1
        plans.append(StagePlan(s, hw, c, tuple(blocks)))
    return plans


def param_layout(config: ModelConfig):
    """Ordered ``(name, shape, init)`` triples for every learnable tensor."""
    out = []
    cin, c1 = config.in_channels, config.stage_dims[0]

    def add(prefix, items):
        out.extend((f"{prefix}.{n}", shape, init) for n, shape, init in items)

    if config.patch_embed == "single":
        add("patch_embed", [("proj.weight", (16 * cin, c1), "normal"), ("proj.bias", (c1,), "zeros")])
    else:
        h = c1 // 2
        add("patch_embed", [("proj1.weight", (4 * cin, h), "normal"), ("proj1.bias", (h,), "zeros"),
                            ("proj2.weight", (4 * h, c1), "normal"), ("proj2.bias", (c1,), "zeros")])
    add("patch_embed", [("norm.weight", (c1,), "ones"), ("norm.bias", (c1,), "zeros")])
    for plan in build_plan(config):
        s = plan.index
        if s > 1:
            cp = config.stage_dims[s - 2]
            add(f"merge{s}", [("norm.weight", (4 * cp,), "ones"), ("norm.bias", (4 * cp,), "zeros"),
                              ("reduction.weight", (4 * cp, plan.channels), "normal"),
                              ("reduction.bias", (plan.channels,), "zeros")])
        for b, spec in enumerate(plan.blocks):
            layout = maf_block_layout(spec) if isinstance(spec, MafBlockSpec) else vit_block_layout(spec)
            add(f"stage{s}.block{b}", layout)
    c4 = config.stage_dims[3]
    add("norm", [("weight", (c4,), "ones"), ("bias", (c4,), "zeros")])
    add("head", [("weight", (c4, config.num_classes), "normal"), ("bias", (config.num_classes,), "zeros")])
    return out


def trunc_normal(rng: np.random.Generator, shape, std=INIT_STD, bound=2.0) -> np.ndarray:
    """Normal(0, std) truncated to ``[-bound*std, bound*std]`` by resampling."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Deterministic initialisation: truncated-normal weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    store = ParameterStore(seed=seed)
    for name, shape, init in param_layout(config):
        if init == "normal":
            arr = trunc_normal(rng, shape)
        elif init == "zeros":
            arr = np.zeros(shape)
        else:
            arr = np.ones(shape)
        store.add(name, arr.astype(dtype))
    return store


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def image_to_tokens(image: Tensor) -> Tensor:
    B, C, H, W = image.shape
    return T.reshape(T.permute(image, (0, 2, 3, 1)), (B, H * W, C))


def patch_embed(image: Tensor, config: ModelConfig, params) -> tuple[Tensor, tuple]:
    """``(B, C_in, H, W)`` -> ``(B, H/4 * W/4, C1)`` tokens and their map size."""
    if image.ndim != 4:
        raise DimensionError(f"image must be (B, C, H, W), got {image.shape}")
    B, C, H, W = image.shape
    if H % 4 or W % 4:
        raise ConfigError(f"image {H}x{W} is not divisible by the stride-4 patch embedding")
    x = image_to_tokens(image)
    if config.patch_embed == "single":
        x = dense(patchify(x, (H, W), 4), params.sub("proj"))
    else:
        x = T.gelu(dense(patchify(x, (H, W), 2), params.sub("proj1")))
        x = dense(patchify(x, (H // 2, W // 2), 2), params.sub("proj2"))
    x = norm(x, params.sub("norm"), config.ln_eps)
    return x, (H // 4, W // 4)


def patch_merge(x: Tensor, hw, params, eps=1e-5) -> tuple[Tensor, tuple]:
    """2x2 neighbourhood concat (4C) -> LayerNorm -> linear to the next stage width."""
    H, W = hw
    if H % 2 or W % 2:
        raise ConfigError(f"patch merging needs an even map, got {H}x{W}")
    x = patchify(x, hw, 2)
    x = norm(x, params.sub("norm"), eps)
    return dense(x, params.sub("reduction")), (H // 2, W // 2)


def forward_features(image: Tensor, config: ModelConfig, params: Scope, rng=None):
    """Run the four stages; returns the list of per-stage outputs ``(tokens, hw)``."""
    if tuple(image.shape[1:]) != (config.in_channels, *config.img_size):
        raise ConfigError(f"image shape {image.shape[1:]} does not match config "
                          f"({config.in_channels}, {config.img_size[0]}, {config.img_size[1]})")
    x, hw = patch_embed(image, config, params.sub("patch_embed"))
    outs = []
    for plan in build_plan(config):
        s = plan.index
        if s > 1:
            x, hw = patch_merge(x, hw, params.sub(f"merge{s}"), config.ln_eps)
        if hw != plan.hw or x.shape[-1] != plan.channels:
            raise DimensionError(f"stage {s}: got {hw}x{x.shape[-1]}, expected {plan.hw}x{plan.channels}")
        g = None
        for b, spec in enumerate(plan.blocks):
            p = params.sub(f"stage{s}.block{b}")
            if isinstance(spec, MafBlockSpec):
                x, g = maf_block_forward(x, spec, p, rng, global_in=g, return_global=True)
            else:
                x = vit_block_forward(x, spec, p, rng)
        outs.append((x, hw))
    return outs


def forward(image, config: ModelConfig, params, rng=None) -> Tensor:
    """Logits ``(B, num_classes)``: stages, final LayerNorm, token mean-pool, linear head.

    ``params`` is a :class:`Scope` (from :meth:`ParameterStore.bind`) or a
    store, in which case it is bound without a tape. ``rng`` enables
    drop-path (training mode); ``None`` is inference.
    """
    if isinstance(params, ParameterStore):
        params = params.bind()
    image = T.as_tensor(image)
    x, _ = forward_features(image, config, params, rng)[-1]
    x = norm(x, params.sub("norm"), config.ln_eps)
    x = T.mean(x, axis=1)
    if x.shape[-1] != config.stage_dims[3]:
        raise DimensionError(f"head expects {config.stage_dims[3]} features, got {x.shape[-1]}")
    return dense(x, params.sub("head"))
