import csv
import io
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compfuse.config import PipelineConfig
from compfuse.cost import (
    CSV_COLUMNS,
    STAGE_KEYS,
    VARIANTS,
    analytic_flops,
    compare_variants,
    measured_flops,
    to_csv,
    to_table,
    variant_config,
)

CFG = PipelineConfig()


def totals(cfg, n_t):
    return {r.variant: r for r in compare_variants(cfg, n_t)}


def test_variant_ordering_of_totals_and_params():
    r = totals(CFG, 16)
    assert r["compress"].total < r["cross"].total < r["decoder"].total < r["combined"].total
    p = [r[v].total_params for v in ("compress", "cross", "decoder", "combined")]
    assert p == sorted(p) and len(set(p)) == 4


def test_shorter_decoder_sequence_is_cheaper():
    # same decoder at 64+7 vs 256+7 rows
    c = analytic_flops(variant_config(CFG, "compress"), 7).stages["decode_prefill"]
    b = analytic_flops(variant_config(CFG, "baseline"), 7).stages["decode_prefill"]
    assert c < b


def test_baseline_and_compress_share_prefix_stages():
    r = totals(CFG, 16)
    for k in ("encode", "project"):
        assert r["baseline"].stages[k] == r["compress"].stages[k]


def test_total_is_sum_of_stages():
    for r in compare_variants(CFG, 5):
        assert r.total == sum(r.stages.values()) and all(v >= 0 for v in r.stages.values())


@pytest.mark.parametrize("n_t", [0, 7, 16])
@pytest.mark.parametrize("variant", VARIANTS)
def test_measured_equals_analytic(variant, n_t):
    cfg = variant_config(CFG, variant)
    a, m = analytic_flops(cfg, n_t), measured_flops(cfg, n_t)
    assert a.stages == m.stages
    assert a.params == m.params


def test_measured_equals_analytic_multihead_conv():
    cfg = PipelineConfig(d_t=32, d_v=16, llm_heads=4, ve_heads=2, fusion_heads=2, compressor="conv2d", llm_layers=3)
    for v in VARIANTS:
        c = variant_config(cfg, v)
        assert analytic_flops(c, 5).stages == measured_flops(c, 5).stages


def test_maxpool_compress_is_free():
    assert analytic_flops(CFG.replace(compressor="maxpool2d"), 4).stages["compress"] == 0
    assert measured_flops(CFG.replace(compressor="maxpool2d"), 4).stages["compress"] == 0


def test_empty_text_has_no_fusion_cost():
    assert all(r.stages["fuse"] == 0 for r in compare_variants(CFG, 0))


def test_doubling_text_is_superlinear_in_prefill():
    f = lambda n: analytic_flops(CFG, n).stages["decode_prefill"]  # noqa: E731
    # quadratic attention term: second differences are positive
    assert f(32) - f(16) > f(16) - f(0) > 0


@settings(max_examples=40)
@given(
    d=st.sampled_from([8, 16, 32, 64]),
    layers=st.integers(1, 3),
    n_t=st.integers(0, 60),
    comp=st.sampled_from(["mlp", "conv2d", "maxpool2d"]),
)
def test_monotone_in_width_depth_and_text(d, layers, n_t, comp):
    cfg = PipelineConfig(d_t=d, llm_layers=layers, compressor=comp)
    base = analytic_flops(cfg, n_t).total
    assert analytic_flops(cfg.replace(d_t=2 * d), n_t).total > base
    assert analytic_flops(cfg.replace(llm_layers=layers + 1), n_t).total > base
    assert analytic_flops(cfg, n_t + 1).total > base
    if n_t > 0:
        r = totals(cfg, n_t)
        assert r["compress"].total <= r["cross"].total <= r["decoder"].total <= r["combined"].total


def test_decode_half_and_overhead():
    r = totals(CFG, 16)
    assert r["combined"].stages["decode_prefill"] <= 0.5 * r["baseline"].stages["decode_prefill"]
    assert (r["combined"].total - r["compress"].total) / r["compress"].total < 0.10


def test_kv_step_cheaper_than_reprefill():
    r = analytic_flops(CFG, 16)
    assert r.decode_step_kv < r.decode_step_nokv


def test_csv_and_table_formats():
    reports = compare_variants(CFG, 16)
    rows = list(csv.DictReader(io.StringIO(to_csv(reports))))
    assert list(rows[0].keys()) == list(CSV_COLUMNS)
    assert [r["variant"] for r in rows] == list(VARIANTS)
    for r in rows:
        assert int(r["total"]) == sum(int(r[k]) for k in STAGE_KEYS)
    assert float(rows[0]["total_ratio"]) == 1.0
    table = to_table(reports)
    assert len(table.strip().splitlines()) == 2 + 5


def test_report_is_fast():
    t = time.perf_counter()
    compare_variants(CFG, 16)
    assert time.perf_counter() - t < 1.0
