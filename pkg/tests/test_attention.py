import numpy as np
import pytest

from hierattn.attention import (
    AttentionInputs,
    dense_attention,
    dense_flops,
    flop_report,
    kernel_bench,
    tiled_attention,
)
from hierattn.blockmask import InteractionRules, TileState, build_block_mask, build_token_mask
from hierattn.curve_layout import AnchorSpec, GridSpec, WindowSpec, build_layout
from hierattn.errors import MaskError, SizeError

from oracles import naive_attention


def layout(side, window, halo=0, rho=None, text=0):
    grid = GridSpec(side, side)
    anchor = AnchorSpec.for_grid(grid, rho) if rho else None
    return build_layout(grid, WindowSpec(window, halo), anchor, text_len=text)


def test_single_key_returns_value():
    x = AttentionInputs.random(1, 8, 0)
    out = dense_attention(x, np.ones((1, 1), bool))
    assert np.array_equal(out, x.v)


def test_uniform_logits_average_values():
    rng = np.random.default_rng(0)
    k = np.tile(rng.standard_normal((1, 8)), (6, 1))
    x = AttentionInputs(rng.standard_normal((6, 8)), k, rng.standard_normal((6, 4)), precision="float64")
    out = dense_attention(x, np.ones((6, 6), bool))
    assert np.allclose(out, x.v.mean(axis=0, keepdims=True).repeat(6, 0), atol=1e-14)


def test_dense_matches_three_loop_reference():
    L = layout(8, 4, 0, None, 0)  # 64 tokens, 4x4 windows
    T = build_token_mask(L, InteractionRules())
    x = AttentionInputs.random(64, 16, 3, "float64")
    ref = naive_attention(x.q.tolist(), x.k.tolist(), x.v.tolist(), T.tolist())
    assert np.abs(dense_attention(x, T) - ref).max() <= 1e-12
    B = build_block_mask(L, InteractionRules(), 16, 16)
    assert np.abs(tiled_attention(x, B) - ref).max() <= 1e-12


def test_fully_masked_row_raises():
    x = AttentionInputs.random(4, 8, 0)
    m = np.ones((4, 4), bool)
    m[2] = False
    with pytest.raises(MaskError):
        dense_attention(x, m)
    L = layout(4, 2, 0, None, 0)
    B = build_block_mask(L, InteractionRules(x_local=False), 4, 4)
    with pytest.raises(MaskError):
        tiled_attention(AttentionInputs.random(16, 8, 0), B)


def test_shape_errors():
    with pytest.raises(SizeError):
        AttentionInputs(np.zeros((3, 4)), np.zeros((3, 5)), np.zeros((3, 4)))
    x = AttentionInputs.random(4, 8, 0)
    with pytest.raises(SizeError):
        dense_attention(x, np.ones((3, 3), bool))
    L = layout(4, 2, 0, None, 0)
    with pytest.raises(SizeError):
        tiled_attention(x, build_block_mask(L, InteractionRules(), 4, 4))


def test_all_full_mask_matches_dense():
    L = build_layout(GridSpec(16, 16), WindowSpec(16, 0), None, text_len=0)
    B = build_block_mask(L, InteractionRules.full(), 64, 32)
    assert (B.tiles == TileState.FULL).all()
    x = AttentionInputs.random(256, 32, 1)
    assert np.abs(tiled_attention(x, B) - dense_attention(x, np.ones((256, 256), bool))).max() <= 1e-5


@pytest.mark.parametrize("precision,tol", [("float32", 1e-5), ("float64", 1e-10)])
def test_default_mask_at_1k_scale(precision, tol):
    L = layout(64, 16, 2, 4, 0)
    assert L.seq_len == 4352
    rules = InteractionRules()
    T = build_token_mask(L, rules)
    B = build_block_mask(L, rules)
    x = AttentionInputs.random(L.seq_len, 64, 2, precision)
    assert np.abs(tiled_attention(x, B) - dense_attention(x, T)).max() <= tol


@pytest.mark.parametrize("seed", range(6))
def test_random_layouts_match_dense(seed):
    rng = np.random.default_rng(seed)
    side = int(rng.choice([8, 16]))
    window = int(rng.choice([2, 4]))
    halo = int(rng.integers(0, window))
    text = int(rng.integers(0, 6))
    rho = int(rng.choice([2, 4]))
    L = layout(side, window, halo, rho, text)
    rules = InteractionRules(lr_self_scope=str(rng.choice(["local", "global"])))
    T = build_token_mask(L, rules)
    qt, kt = int(rng.choice([8, 16, 32])), int(rng.choice([8, 16]))
    B = build_block_mask(L, rules, qt, kt)
    x = AttentionInputs.random(L.seq_len, 16, seed, "float64")
    assert np.abs(tiled_attention(x, B) - dense_attention(x, T)).max() <= 1e-10


def test_flipping_empty_tile_changes_output():
    L = layout(16, 4, 1, 4, 2)
    rules = InteractionRules()
    B = build_block_mask(L, rules, 16, 16)
    x = AttentionInputs.random(L.seq_len, 16, 4)
    base = tiled_attention(x, B)
    i, j = map(int, np.argwhere(B.tiles == TileState.EMPTY)[0])
    flipped = tiled_attention(x, B.with_tile_state(i, j, TileState.FULL))
    assert (np.abs(flipped - base).max(axis=1) > 0).any()
    changed = np.flatnonzero(np.abs(flipped - base).max(axis=1) > 0)
    assert changed.min() >= i * 16 and changed.max() < (i + 1) * 16


def test_skip_is_bitwise_identical_to_visit_and_mask():
    for prec in ("float32", "float64"):
        L = layout(32, 8, 2, 4, 3)
        B = build_block_mask(L, InteractionRules(), 32, 16)
        x = AttentionInputs.random(L.seq_len, 16, 5, prec)
        assert np.array_equal(tiled_attention(x, B, skip=True), tiled_attention(x, B, skip=False))


def test_deterministic_across_runs_and_threads():
    L = layout(32, 8, 2, 4, 3)
    B = build_block_mask(L, InteractionRules(), 32, 16)
    x = AttentionInputs.random(L.seq_len, 16, 6)
    a = tiled_attention(x, B)
    assert np.array_equal(a, tiled_attention(x, B))
    assert np.array_equal(a, tiled_attention(x, B, threads=4))


def test_exported_weights_are_normalized():
    L = layout(16, 4, 1, 4, 2)
    rules = InteractionRules()
    B = build_block_mask(L, rules, 16, 16)
    x = AttentionInputs.random(L.seq_len, 16, 7)
    out, w = tiled_attention(x, B, return_weights=True)
    assert np.abs(w.sum(axis=1) - 1).max() <= 1e-6
    T = build_token_mask(L, rules)
    assert not w[~T].any()
    _, wd = dense_attention(x, T, return_weights=True)
    assert np.abs(w - wd).max() < 1e-6
    assert np.abs(w @ x.v - out).max() < 1e-5


def test_flop_report_closed_forms():
    L = build_layout(GridSpec(64, 64), WindowSpec(64, 0), None, text_len=0)
    B = build_block_mask(L, InteractionRules.full())
    assert flop_report(B, 64) == 4 * 4096**2 * 64 == dense_flops(4096, 64)
    Lw = layout(64, 16, 0, None, 0)
    Bw = build_block_mask(Lw, InteractionRules())
    assert flop_report(Bw, 64) * 4096 // 256 == flop_report(B, 64)
    Lw = layout(64, 32, 0, None, 0)
    Bw = build_block_mask(Lw, InteractionRules())
    assert flop_report(Bw, 64) * 4 == flop_report(B, 64)


def test_window_reduction_at_4k_is_256():
    L = build_layout(GridSpec(256, 256), WindowSpec(16, 0), None, text_len=0)
    B = build_block_mask(L, InteractionRules())
    assert dense_flops(65536, 64) // flop_report(B, 64) == 256
    assert dense_flops(65536, 64) % flop_report(B, 64) == 0


def test_bench_without_empty_tiles_is_flat():
    L = build_layout(GridSpec(16, 16), WindowSpec(16, 0), None, text_len=0)
    B = build_block_mask(L, InteractionRules.full(), 32, 32)
    x = AttentionInputs.random(256, 32, 0)
    r = kernel_bench(x, B, repetitions=7)
    assert r.skipped_tiles == 0
    assert abs(r.speedup - 1) <= 0.10
    doc = r.to_dict()
    for key in ("S", "d", "q_tile", "k_tile", "visited_tiles", "skipped_tiles", "median_skip_s",
                "min_skip_s", "median_dense_tiled_s", "speedup", "ops_estimate"):
        assert key in doc


def test_bench_requires_three_reps():
    L = layout(4, 2, 0, None, 0)
    B = build_block_mask(L, InteractionRules(), 4, 4)
    with pytest.raises(SizeError):
        kernel_bench(AttentionInputs.random(16, 8, 0), B, repetitions=2)
