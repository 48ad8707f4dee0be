import time

import numpy as np
import pytest

from conftest import tiny_config
from maformer.analysis import MAC_CONVENTION, count_macs, count_params, stage_table
from maformer.config import ModelConfig, preset
from maformer.model import forward, init_params
from maformer.tensor import Tape


def random_config(seed: int) -> ModelConfig:
    r = np.random.default_rng(seed)
    heads = [int(h) for h in r.choice([1, 2], size=4)]
    dims = [int(2 * h * r.integers(1, 4)) for h in heads]
    kinds = [str(k) for k in r.choice(["shifted_window", "cross_shaped"], size=4)]
    img = [int(v) for v in r.choice([32, 64], size=2)]
    maf = sorted(int(s) for s in r.choice([1, 2, 3, 4], size=int(r.integers(0, 5)), replace=False))
    return ModelConfig(
        img_size=img, stage_dims=dims, stage_depths=[int(d) for d in r.integers(1, 3, size=4)],
        num_heads=heads, maf_stages=maf, attention_kinds=kinds,
        window_sizes=[int(w) for w in r.integers(2, 5, size=4)],
        stripe_widths=[int(w) for w in r.integers(1, 4, size=4)],
        rel_pos_bias=bool(r.random() < 0.5),
        global_kind=str(r.choice(["gld", "conv", "none"])),
        fusion_variant=str(r.choice(["maf", "local_enhanced"])),
        gld_chained=bool(r.random() < 0.3), strict_eq1=bool(r.random() < 0.3),
        patch_embed=str(r.choice(["single", "two_stage"])),
        mlp_ratio=float(r.choice([1.0, 2.0, 4.0])), num_classes=int(r.integers(2, 6)))


@pytest.mark.parametrize("seed", range(20))
def test_analytic_counts_match_materialised_and_instrumented(seed):
    cfg = random_config(seed)
    params = init_params(cfg, 0, np.float64)
    report = count_macs(cfg, batch=2)
    assert report.total_params == params.num_elements()
    tape = Tape()
    forward(np.zeros((2, 3, *cfg.img_size)), cfg, params.bind(tape))
    assert report.total_macs == tape.macs


def test_rows_sum_to_totals(tiny):
    r = count_params(tiny)
    assert r.total_params == sum(row.params for row in r.rows)
    d = r.to_dict()
    assert d["total_params"] == r.total_params and d["convention"] == MAC_CONVENTION


def test_preset_counts_fast():
    t = time.perf_counter()
    for name in ("s", "b", "l"):
        count_params(preset(name))
    assert time.perf_counter() - t < 1.0


def test_monotone_in_depth_and_width(tiny):
    base = count_params(tiny).total_params
    deeper = count_params(tiny_config(stage_depths=[1, 2, 1, 1])).total_params
    wider = count_params(tiny_config(stage_dims=[8, 16, 8, 8])).total_params
    assert deeper > base and wider > base


def test_none_has_fewer_params_than_gld_and_conv(tiny):
    none = count_params(tiny_config(global_kind="none")).total_params
    assert none < count_params(tiny).total_params
    assert none < count_params(tiny_config(global_kind="conv")).total_params


def test_macs_linear_in_batch(tiny):
    assert count_macs(tiny, batch=3).total_macs == 3 * count_macs(tiny).total_macs


def test_macs_scale_with_area_for_windowed_model():
    """With only windowed attention and no global branch, doubling the side quadruples the work."""
    cfg = tiny_config(img_size=[64, 64], maf_stages=[1, 2, 3, 4], global_kind="none",
                      attention_kinds=["shifted_window"] * 4, window_sizes=[2, 2, 2, 2])
    head = count_macs(cfg).rows[-1].macs
    small = count_macs(cfg).total_macs - head
    large = count_macs(cfg, 128).total_macs - head
    assert large == 4 * small


def test_s_preset_macs_within_factor_two_of_reported():
    macs = count_macs(preset("s")).total_macs
    assert 4.5e9 / 2 <= macs <= 4.5e9 * 2


def test_stage_table(tiny):
    rows = stage_table(preset("s"))
    assert [r["channels"] for r in rows] == [64, 128, 320, 512]
    assert [r["resolution"] for r in rows] == [[56, 56], [28, 28], [14, 14], [7, 7]]
    assert rows[0]["block"].startswith("MAF") and rows[3]["block"] == "ViT"


def test_vit_stage_attention_is_quadratic_in_tokens():
    """Doubling the side multiplies the ViT block linears by 4 and its attention core by 16."""
    small_cfg = tiny_config(maf_stages=[], img_size=[32, 32])
    c, hidden = 8, 32
    for size in (32, 64):
        rows = {r.path: r.macs for r in count_macs(small_cfg, size).rows}
        tokens = (size // 32) ** 2  # stage 4
        linear = tokens * (4 * c * c + 2 * c * hidden)
        core = 2 * tokens * tokens * c
        assert rows["stage4.block0"] == linear + core
    a = {r.path: r.macs for r in count_macs(small_cfg, 64).rows}["stage1.block0"]
    b = {r.path: r.macs for r in count_macs(small_cfg, 128).rows}["stage1.block0"]
    t = (64 // 4) ** 2
    lin, att = t * (4 * c * c + 2 * c * hidden), 2 * t * t * c
    assert a == lin + att and b == 4 * lin + 16 * att
