"""Model configuration, validation and JSON (de)serialisation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


GLOBAL_KINDS = ("gld", "conv", "none")
FUSION_VARIANTS = ("maf", "local_enhanced")
PATCH_EMBEDS = ("single", "two_stage")
PRESETS = ("maformer_s", "maformer_b", "maformer_l")


@dataclass
class ModelConfig:
    name: str = "custom"
    img_size: list = field(default_factory=lambda: [224, 224])
    in_channels: int = 3
    stage_dims: list = field(default_factory=lambda: [64, 128, 320, 512])
    stage_depths: list = field(default_factory=lambda: [3, 5, 8, 3])
    num_heads: list | None = None
    maf_stages: list = field(default_factory=lambda: [1, 2])
    attention_kinds: list = field(default_factory=lambda: ["cross_shaped"] * 4)
    window_sizes: list = field(default_factory=lambda: [7, 7, 7, 7])
    stripe_widths: list = field(default_factory=lambda: [1, 2, 7, 7])
    rel_pos_bias: bool = False
    gld_ratio: float = 0.5
    global_kind: str = "gld"
    conv_kernel: list = field(default_factory=lambda: [2, 1])
    conv_stride: list = field(default_factory=lambda: [2, 1])
    fusion_variant: str = "maf"
    gld_chained: bool = False
    strict_eq1: bool = False
    mlp_ratio: float = 4.0
    num_classes: int = 1000
    drop_path_rate: float = 0.0
    patch_embed: str = "single"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    def validate(self):
        def need(cond, fld, msg):
            if not cond:
                raise ConfigError(f"{fld}: {msg}")

        for fld in ("stage_dims", "stage_depths", "attention_kinds", "window_sizes", "stripe_widths"):
            need(isinstance(getattr(self, fld), list) and len(getattr(self, fld)) == 4,
                 fld, "must be a list of 4 entries")
        need(isinstance(self.img_size, list) and len(self.img_size) == 2, "img_size", "must be [H, W]")
        H, W = self.img_size
        need(all(isinstance(v, int) and v > 0 for v in (H, W)), "img_size", "must be positive integers")
        need(H % 32 == 0 and W % 32 == 0, "img_size",
             f"{H}x{W} must be divisible by 32 (stride-4 embed plus three 2x merges)")
        need(isinstance(self.in_channels, int) and self.in_channels > 0, "in_channels", "must be positive")
        need(all(isinstance(c, int) and c > 0 for c in self.stage_dims), "stage_dims", "must be positive ints")
        need(all(isinstance(d, int) and d >= 0 for d in self.stage_depths), "stage_depths",
             "must be non-negative ints")
        heads = self.heads()
        need(len(heads) == 4, "num_heads", "must have 4 entries")
        for i, (c, h) in enumerate(zip(self.stage_dims, heads)):
            need(isinstance(h, int) and h > 0 and c % h == 0, "num_heads",
                 f"stage {i + 1}: {c} channels not divisible by {h} heads")
        need(all(s in (1, 2, 3, 4) for s in self.maf_stages), "maf_stages", "stages are numbered 1..4")
        from .attention import ATTENTION_KINDS, branch_heads
        for i, k in enumerate(self.attention_kinds):
            need(k in ATTENTION_KINDS, "attention_kinds", f"stage {i + 1}: unknown kind {k!r}")
        need(all(isinstance(v, int) and v > 0 for v in self.window_sizes), "window_sizes", "must be positive")
        need(all(isinstance(v, int) and v > 0 for v in self.stripe_widths), "stripe_widths", "must be positive")
        for s in self.maf_stages:
            if self.attention_kinds[s - 1] == "cross_shaped":
                c, h = self.stage_dims[s - 1], heads[s - 1]
                need(c % 2 == 0 and (c // 2) % branch_heads(h) == 0, "stage_dims",
                     f"stage {s}: cross-shaped needs C/2 divisible by {branch_heads(h)} branch heads")
        need(0.0 < self.gld_ratio <= 1.0, "gld_ratio", "must be in (0, 1]")
        need(self.global_kind in GLOBAL_KINDS, "global_kind", f"one of {GLOBAL_KINDS}")
        need(self.fusion_variant in FUSION_VARIANTS, "fusion_variant", f"one of {FUSION_VARIANTS}")
        need(self.patch_embed in PATCH_EMBEDS, "patch_embed", f"one of {PATCH_EMBEDS}")
        need(len(self.conv_kernel) == 2 and len(self.conv_stride) == 2, "conv_kernel",
             "kernel and stride are [kh, kw]")
        need(not (self.gld_chained and self.global_kind == "conv"), "gld_chained",
             "the chained global stream is only defined for global_kind='gld'")
        for c in self.stage_dims:
            need(float(self.mlp_ratio * c).is_integer(), "mlp_ratio", f"mlp_ratio*{c} must be integral")
        need(isinstance(self.num_classes, int) and self.num_classes > 0, "num_classes", "must be positive")
        need(0.0 <= self.drop_path_rate < 1.0, "drop_path_rate", "must be in [0, 1)")
        if self.patch_embed == "two_stage":
            need(self.stage_dims[0] % 2 == 0, "patch_embed", "two_stage embed needs an even stage-1 dim")

    # ------------------------------------------------------------------
    def heads(self) -> list:
        if self.num_heads is not None:
            return list(self.num_heads)
        return [max(1, c // 32) for c in self.stage_dims]

    def stage_resolution(self, stage: int):
        """Token-map size of 1-based ``stage``: (H/2^(s+1), W/2^(s+1))."""
        f = 2 ** (stage + 1)
        return self.img_size[0] // f, self.img_size[1] // f

    def is_maf_stage(self, stage: int) -> bool:
        return stage in self.maf_stages

    def window_spec(self, stage: int, block: int):
        from .attention import SHIFTED_WINDOW, WindowSpec
        i = stage - 1
        kind = self.attention_kinds[i]
        w = self.window_sizes[i]
        shift = w // 2 if (kind == SHIFTED_WINDOW and block % 2 == 1) else 0
        return WindowSpec(kind, w, self.stripe_widths[i], shift, self.rel_pos_bias)

    def mlp_hidden(self, channels: int) -> int:
        return int(self.mlp_ratio * channels)

    def gld_out_len(self, length: int) -> int:
        return gld_out_len(length, self.gld_ratio)

    def drop_path_rates(self) -> list:
        total = sum(self.stage_depths)
        if total <= 1:
            return [0.0] * total
        return [self.drop_path_rate * i / (total - 1) for i in range(total)]

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        kw = {}
        for k, v in d.items():
            if k in ("gld_ratio", "mlp_ratio", "drop_path_rate", "ln_eps"):
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise ConfigError(f"{k}: expected a number, got {v!r}")
                v = float(v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        path = Path(path)
        text = path.read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if isinstance(d, dict) and "model" in d and isinstance(d["model"], dict):
            d = d["model"]
        return cls.from_dict(d)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


def gld_out_len(length: int, ratio: float) -> int:
    n = math.floor(ratio * length + 1e-9)
    if n < 1:
        raise ConfigError(f"gld_ratio {ratio} leaves no global tokens for L={length}")
    return n


def preset(name: str) -> ModelConfig:
    """Load one of the shipped S/B/L presets."""
    key = name.lower().replace("-", "_")
    if not key.startswith("maformer_"):
        key = "maformer_" + key
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("maformer").joinpath("presets", key + ".json").read_text()
    return ModelConfig.from_dict(json.loads(text))


def resolve_config(ref) -> ModelConfig:
    """Accept a ModelConfig, a preset name, or a path to a JSON file."""
    if isinstance(ref, ModelConfig):
        return ref
    if isinstance(ref, dict):
        return ModelConfig.from_dict(ref)
    s = str(ref)
    if Path(s).exists():
        return ModelConfig.load(s)
    return preset(s)
