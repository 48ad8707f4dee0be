"""Closed-form parameter and multiply-accumulate counts.

Counts are derived from layer formulas, not from the parameter layout, so the
equality ``count_params(cfg).total_params == init_params(cfg).num_elements()``
is a genuine cross-check.

MAC convention (reported as "FLOPs (MAC convention)"): every matrix product
``(m, k) @ (k, n)`` costs ``m*k*n``. That covers linear layers, the two
attention products (scores and value mixing) including padded window
positions, the GLD token-axis projection and convolutions lowered to matmul.
Normalisation, softmax, activations, interpolation and residual additions are
not counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .attention import SHIFTED_WINDOW
from .config import ModelConfig, gld_out_len
from .layers import conv_output_size

MAC_CONVENTION = ("MACs: 1 per multiply-accumulate in every matrix product (linear layers, "
                  "attention scores and value mixing incl. padded positions, GLD projection, "
                  "convolutions); norms, softmax, activations, interpolation and residuals excluded")


@dataclass
class CostRow:
    path: str
    params: int
    macs: int = 0


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    input_size: tuple | None = None
    batch: int = 1

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_text(self) -> str:
        w = max([len(r.path) for r in self.rows] + [6])
        lines = [f"# {MAC_CONVENTION}",
                 f"{'module':<{w}}  {'params':>12}  {'FLOPs (MAC convention)':>24}"]
        for r in self.rows:
            lines.append(f"{r.path:<{w}}  {r.params:>12,d}  {r.macs:>24,d}")
        lines.append(f"{'total':<{w}}  {self.total_params:>12,d}  {self.total_macs:>24,d}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"convention": MAC_CONVENTION,
                "input_size": list(self.input_size) if self.input_size else None,
                "batch": self.batch,
                "rows": [{"path": r.path, "params": r.params, "macs": r.macs} for r in self.rows],
                "total_params": self.total_params, "total_macs": self.total_macs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# parameter formulas -------------------------------------------------------

def linear_params(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def norm_params(c: int) -> int:
    return 2 * c


def attention_params(c: int) -> int:
    return 4 * linear_params(c, c)


def mlp_params(c: int, hidden: int) -> int:
    return linear_params(c, hidden) + linear_params(hidden, c)


# mac formulas -------------------------------------------------------------

def linear_macs(tokens: int, i: int, o: int) -> int:
    return tokens * i * o


def attention_core_macs(groups: int, tq: int, tk: int, c: int) -> int:
    """Scores plus value mixing for ``groups`` independent attention problems."""
    return 2 * groups * tq * tk * c


def _ceil_to(n, m):
    return -(-n // m) * m


def local_attention_core_macs(batch, hw, c, kind, window, stripe):
    H, W = hw
    if kind == SHIFTED_WINDOW:
        w = min(window, H, W) if min(H, W) <= window else window
        Hp, Wp = _ceil_to(H, w), _ceil_to(W, w)
        return attention_core_macs(batch * (Hp // w) * (Wp // w), w * w, w * w, c)
    sw = min(stripe, H, W)
    Hp, Wp = _ceil_to(H, sw), _ceil_to(W, sw)
    half = c // 2
    return (attention_core_macs(batch * (Hp // sw), sw * W, sw * W, half)
            + attention_core_macs(batch * (Wp // sw), H * sw, H * sw, half))


def _resolved_window(config, stage, hw):
    w = config.window_sizes[stage - 1]
    H, W = hw
    return min(H, W) if min(H, W) <= w else w


# --------------------------------------------------------------------------

def _analyze(config: ModelConfig, batch: int = 1) -> CostReport:
    rep = CostReport(input_size=tuple(config.img_size), batch=batch)
    H, W = config.img_size
    cin = config.in_channels
    dims = config.stage_dims
    heads = config.heads()
    B = batch

    t4 = (H // 4) * (W // 4)
    c1 = dims[0]
    if config.patch_embed == "single":
        p = linear_params(16 * cin, c1)
        m = linear_macs(B * t4, 16 * cin, c1)
    else:
        h = c1 // 2
        p = linear_params(4 * cin, h) + linear_params(4 * h, c1)
        m = linear_macs(B * (H // 2) * (W // 2), 4 * cin, h) + linear_macs(B * t4, 4 * h, c1)
    rep.rows.append(CostRow("patch_embed", p + norm_params(c1), m))

    for s in range(1, 5):
        hs, ws = config.stage_resolution(s)
        tokens = hs * ws
        c = dims[s - 1]
        hidden = int(config.mlp_ratio * c)
        if s > 1:
            cp = dims[s - 2]
            rep.rows.append(CostRow(f"merge{s}", norm_params(4 * cp) + linear_params(4 * cp, c),
                                    linear_macs(B * tokens, 4 * cp, c)))
        g_len = tokens
        for b in range(config.stage_depths[s - 1]):
            path = f"stage{s}.block{b}"
            if not config.is_maf_stage(s):
                p = 2 * norm_params(c) + attention_params(c) + mlp_params(c, hidden)
                m = (4 * linear_macs(B * tokens, c, c) + attention_core_macs(B, tokens, tokens, c)
                     + 2 * linear_macs(B * tokens, c, hidden))
                rep.rows.append(CostRow(path, p, m))
                continue
            kind = config.attention_kinds[s - 1]
            # local aggregation
            p = norm_params(c) + attention_params(c) + mlp_params(c, hidden)
            if not config.strict_eq1:
                p += norm_params(c)
            if kind == SHIFTED_WINDOW and config.rel_pos_bias:
                w = _resolved_window(config, s, (hs, ws))
                p += (2 * w - 1) ** 2 * heads[s - 1]
            m = (4 * linear_macs(B * tokens, c, c)
                 + local_attention_core_macs(B, (hs, ws), c, kind, config.window_sizes[s - 1],
                                             config.stripe_widths[s - 1])
                 + 2 * linear_macs(B * tokens, c, hidden))
            rep.rows.append(CostRow(f"{path}.local", p, m))
            if config.global_kind == "none":
                continue
            if config.global_kind == "gld":
                out_len = gld_out_len(g_len, config.gld_ratio)
                gp = linear_params(g_len, out_len)
                gm = linear_macs(B * c, g_len, out_len)
                lg = out_len
                if config.gld_chained:
                    g_len = out_len
            else:
                kh, kw = config.conv_kernel
                sh, sw = config.conv_stride
                lg = conv_output_size(hs, kh, sh) * conv_output_size(ws, kw, sw)
                gp = linear_params(kh * kw * c, c)
                gm = linear_macs(B * lg, kh * kw * c, c)
            rep.rows.append(CostRow(f"{path}.global", gp, gm))
            fp = 2 * norm_params(c) + attention_params(c)
            fm = (2 * linear_macs(B * tokens, c, c) + 2 * linear_macs(B * lg, c, c)
                  + attention_core_macs(B, tokens, lg, c))
            rep.rows.append(CostRow(f"{path}.fusion", fp, fm))
            rep.rows.append(CostRow(f"{path}.mlp2", norm_params(c) + mlp_params(c, hidden),
                                    2 * linear_macs(B * tokens, c, hidden)))
    c4 = dims[3]
    rep.rows.append(CostRow("norm", norm_params(c4), 0))
    rep.rows.append(CostRow("head", linear_params(c4, config.num_classes),
                            linear_macs(B, c4, config.num_classes)))
    return rep


def count_params(config: ModelConfig) -> CostReport:
    """Per-module parameter counts (``macs`` are filled too, at the config's image size)."""
    return _analyze(config)


def count_macs(config: ModelConfig, input_size=None, batch: int = 1) -> CostReport:
    """Per-module MACs at ``input_size``.

    The GLD projection is bound to a resolution, so a different input size is
    analysed as the model rebuilt for that size.
    """
    if input_size is not None:
        if isinstance(input_size, int):
            input_size = [input_size, input_size]
        config = replace(config, img_size=list(input_size))
    return _analyze(config, batch)


def stage_table(config: ModelConfig) -> list[dict]:
    rows = []
    for s in range(1, 5):
        rows.append({"stage": s, "resolution": list(config.stage_resolution(s)),
                     "channels": config.stage_dims[s - 1], "depth": config.stage_depths[s - 1],
                     "heads": config.heads()[s - 1],
                     "block": ("MAF/" + config.attention_kinds[s - 1]) if config.is_maf_stage(s) else "ViT"})
    return rows


def stage_table_text(config: ModelConfig) -> str:
    lines = [f"{'stage':>5}  {'resolution':>10}  {'channels':>8}  {'depth':>5}  {'heads':>5}  block"]
    for r in stage_table(config):
        res = f"{r['resolution'][0]}x{r['resolution'][1]}"
        lines.append(f"{r['stage']:>5}  {res:>10}  {r['channels']:>8}  {r['depth']:>5}  {r['heads']:>5}  {r['block']}")
    return "\n".join(lines)
