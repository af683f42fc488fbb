import dataclasses
import json
import zlib

import numpy as np
import pytest

from hierattn.blockmask import (
    InteractionRules,
    TileState,
    build_block_mask,
    build_token_mask,
    load_block_mask,
    save_block_mask,
    tile_stats,
    verify_block_mask,
    write_stats_json,
)
from hierattn.curve_layout import SEG_LR, SEG_TEXT, SEG_X, AnchorSpec, GridSpec, WindowSpec, build_layout
from hierattn.errors import ConfigError, SizeError

from oracles import brute_token_mask


def layout(side, window, halo=0, rho=None, text=0):
    grid = GridSpec(side, side)
    anchor = AnchorSpec.for_grid(grid, rho) if rho else None
    return build_layout(grid, WindowSpec(window, halo), anchor, text_len=text)


SMALL_CASES = [
    (4, 2, 0, None, 2),
    (4, 2, 1, None, 0),
    (8, 2, 1, 2, 3),
    (8, 4, 2, 4, 1),
    (8, 4, 1, 2, 0),
    (16, 4, 2, 4, 5),
    (8, 2, 1, 4, 2),  # window smaller than the ratio
]

RULE_VARIANTS = [
    InteractionRules(),
    InteractionRules(lr_self_scope="global"),
    InteractionRules.no_guidance(),
    InteractionRules(x_to_lr_region=False, x_to_lr_all=True, text_to_lr=True),
    InteractionRules(x_neighbor_halo=False, x_to_text=False),
    InteractionRules.full(),
    InteractionRules.none(),
]


@pytest.mark.parametrize("case", SMALL_CASES)
@pytest.mark.parametrize("rules", RULE_VARIANTS)
def test_token_mask_matches_scalar_rules(case, rules):
    L = layout(*case)
    assert np.array_equal(build_token_mask(L, rules), brute_token_mask(L, rules))


def test_window_example_without_guidance():
    L = layout(4, 2, 0, None, 2)
    M = build_token_mask(L, InteractionRules())
    assert M.shape == (18, 18)
    assert M[:2].all()  # text attends every token
    x = slice(*L.x_range)
    assert (M[x, :2]).all()
    assert (M[x].sum(axis=1) == 4 + 2).all()
    for q in range(*L.x_range):
        mates = np.flatnonzero(M[q, 2:]) + 2
        assert set(L.window_id[mates]) == {L.window_id[q]}


def test_halo_geometry_example():
    L = layout(4, 2, 1)
    M = build_token_mask(L, InteractionRules())
    q = int(L.x_perm[0, 0])
    keys = {(int(L.grid_x[k]), int(L.grid_y[k])) for k in np.flatnonzero(M[q])}
    own = {(0, 0), (1, 0), (0, 1), (1, 1)}
    ring = {(2, 0), (2, 1), (0, 2), (1, 2)}
    assert keys == own | ring
    # an interior-facing corner of the top-right window sees rings from left and below
    q = int(L.x_perm[1, 2])
    keys = {(int(L.grid_x[k]), int(L.grid_y[k])) for k in np.flatnonzero(M[q])}
    assert keys == {(2, 0), (3, 0), (2, 1), (3, 1), (1, 0), (1, 1), (2, 2), (3, 2)}


def test_full_rules_single_segment_are_dense():
    L = build_layout(GridSpec(4, 4), WindowSpec(4, 0), None, text_len=0)
    assert build_token_mask(L, InteractionRules.full()).all()
    L = build_layout(GridSpec(1, 1), WindowSpec(1, 0), None, text_len=5)
    assert build_token_mask(L, InteractionRules.full()).all()


def test_rules_validation():
    with pytest.raises(ConfigError):
        InteractionRules(x_to_lr_region=True, x_to_lr_all=True)
    with pytest.raises(ConfigError):
        InteractionRules(lr_self_scope="ring")


def test_oracle_cap():
    L = layout(8, 4, 0, None, 0)
    with pytest.raises(SizeError):
        build_token_mask(L, InteractionRules(), cap=32)


@pytest.mark.parametrize("case", SMALL_CASES)
@pytest.mark.parametrize("tiles", [(1, 1), (4, 4), (16, 8), (7, 5), (128, 64)])
def test_block_mask_expands_to_token_mask(case, tiles):
    L = layout(*case)
    for rules in RULE_VARIANTS[:4]:
        T = build_token_mask(L, rules)
        B = build_block_mask(L, rules, *tiles)
        assert np.array_equal(B.expand(), T)
        assert verify_block_mask(B, T).ok
        assert np.array_equal(B.row_counts(), T.sum(axis=1))


def test_unit_tiles_have_no_partials():
    L = layout(8, 2, 1, 2, 3)
    rules = InteractionRules()
    B = build_block_mask(L, rules, 1, 1)
    assert (B.tiles != TileState.PARTIAL).all()
    assert np.array_equal(B.tiles == TileState.FULL, build_token_mask(L, rules))


def test_default_granularity():
    L = layout(8, 2, 1, 2, 3)
    B = build_block_mask(L, InteractionRules())
    assert (B.q_tile, B.k_tile) == (128, 64)


def test_1k_non_empty_tiles_match_oracle_scan():
    L = layout(64, 16, 0, 4, 0)
    rules = InteractionRules()
    T = build_token_mask(L, rules)
    B = build_block_mask(L, rules, 16, 16)
    scan = T.reshape(L.seq_len // 16, 16, L.seq_len // 16, 16).any(axis=(1, 3))
    assert tile_stats(B).non_empty == int(scan.sum())
    assert np.array_equal(B.tiles != TileState.EMPTY, scan)


def test_tile_state_semantics():
    L = layout(16, 4, 2, 4, 5)
    rules = InteractionRules()
    T = build_token_mask(L, rules)
    B = build_block_mask(L, rules, 16, 8)
    for i in range(B.n_q):
        for j in range(B.n_k):
            qa, qb, ka, kb = B.tile_extent(i, j)
            region = T[qa:qb, ka:kb]
            state = B.state(i, j)
            if state == TileState.FULL:
                assert region.all()
            elif state == TileState.EMPTY:
                assert not region.any()
            else:
                assert region.any() and not region.all()
                assert np.array_equal(B.tile_bits(i, j), region)


def test_fixed_key_budget_per_x_query():
    text = 3
    for side, l, rho in [(32, 8, 4), (64, 16, 4), (16, 8, 2)]:
        L = layout(side, l, 0, rho, text)
        counts = build_token_mask(L, InteractionRules()).sum(axis=1)
        x = counts[slice(*L.x_range)]
        assert (x == l * l + (l // rho) ** 2 + text).all()


def test_stats_all_full():
    L = build_layout(GridSpec(4, 4), WindowSpec(4, 0), None, text_len=0)
    s = tile_stats(build_block_mask(L, InteractionRules.full(), 4, 4))
    assert s.attended_bit_fraction == 1.0
    assert s.empty == 0 and s.partial == 0 and s.full == 16


def test_stats_pure_window_fraction():
    L = layout(32, 8, 0, None, 0)
    s = tile_stats(build_block_mask(L, InteractionRules(x_to_text=False)))
    assert s.attended_bit_fraction == pytest.approx(64 / 1024)
    assert s.estimated_ops == 1024 * 64 * 2 * 64
    assert s.mean_log_keys == pytest.approx(np.log(64))


def test_non_empty_tile_growth_at_fixed_window():
    # 4096 -> 16384 X tokens, l=16, pure windows plus guidance
    counts = []
    for side in (64, 128):
        L = layout(side, 16, 0, 4, 0)
        counts.append(tile_stats(build_block_mask(L, InteractionRules())).non_empty)
    assert 3.8 <= counts[1] / counts[0] <= 4.3


def test_non_empty_tile_growth_with_halo():
    # boundary windows lack neighbors, so small grids grow a little faster than 4x
    counts = []
    for side in (64, 128):
        L = layout(side, 16, 2, 4, 0)
        counts.append(tile_stats(build_block_mask(L, InteractionRules())).non_empty)
    assert 3.8 <= counts[1] / counts[0] <= 4.6


def test_allowed_bits_grow_linearly():
    bits = []
    for side in (32, 64, 128):
        L = layout(side, 16, 0, 4, 4)
        bits.append(build_block_mask(L, InteractionRules()).allowed_bits())
    for a, b in zip(bits, bits[1:]):
        assert 3.8 <= b / a <= 4.3


FLAG_NAMES = [
    f.name for f in dataclasses.fields(InteractionRules)
    if f.type in ("bool", bool) and f.name not in ("x_to_lr_all", "x_to_lr_region")
]


@pytest.mark.parametrize("flag", FLAG_NAMES)
def test_enabling_a_flag_never_clears_bits(flag):
    L = layout(8, 2, 1, 2, 2)
    rng = np.random.default_rng(zlib.crc32(flag.encode()))
    for _ in range(5):
        base = {name: bool(rng.integers(2)) for name in FLAG_NAMES}
        base[flag] = False
        lo = InteractionRules(**base)
        hi = lo.with_overrides(**{flag: True})
        a, b = build_token_mask(L, lo), build_token_mask(L, hi)
        assert not (a & ~b).any()


def test_widening_guidance_and_scope_never_clears_bits():
    L = layout(8, 2, 1, 2, 2)
    region = build_token_mask(L, InteractionRules())
    everything = build_token_mask(L, InteractionRules(x_to_lr_region=False, x_to_lr_all=True))
    off = build_token_mask(L, InteractionRules.no_guidance())
    glob = build_token_mask(L, InteractionRules(lr_self_scope="global"))
    assert not (off & ~region).any()
    assert not (region & ~everything).any()
    assert not (region & ~glob).any()


def test_mask_storage_dominance_at_4k_analog():
    L = layout(256, 16, 2, 4, 0)
    B = build_block_mask(L, InteractionRules())
    assert B.dense_bit_bytes() >= 4096 * B.storage_bytes()


def test_verify_detects_flipped_tile():
    L = layout(16, 4, 1, 4, 3)
    rules = InteractionRules()
    T = build_token_mask(L, rules)
    B = build_block_mask(L, rules, 16, 16)
    empties = np.argwhere(B.tiles == TileState.EMPTY)
    i, j = map(int, empties[len(empties) // 2])
    bad = B.with_tile_state(i, j, TileState.FULL)
    rep = verify_block_mask(bad, T)
    qa, qb, ka, kb = B.tile_extent(i, j)
    assert rep.discrepancies == (qb - qa) * (kb - ka)
    assert rep.bad_tiles == [(i, j, rep.discrepancies)]
    # a clipped edge tile flags only its in-range bits
    last = B.n_q - 1
    jj = int(np.flatnonzero(B.tiles[last] == TileState.EMPTY)[0])
    rep = verify_block_mask(B.with_tile_state(last, jj, TileState.FULL), T)
    qa, qb, ka, kb = B.tile_extent(last, jj)
    assert rep.discrepancies == (qb - qa) * (kb - ka) < 16 * 16


def test_empty_rules_verify_against_false_matrix():
    L = layout(8, 2, 1, 2, 2)
    B = build_block_mask(L, InteractionRules.none(), 16, 16)
    assert verify_block_mask(B, np.zeros((L.seq_len, L.seq_len), bool)).ok
    assert B.allowed_bits() == 0


def test_verify_dimension_mismatch():
    L = layout(8, 2, 1, 2, 2)
    B = build_block_mask(L, InteractionRules(), 16, 16)
    with pytest.raises(SizeError):
        verify_block_mask(B, np.zeros((3, 3), bool))


def test_export_round_trip(tmp_path):
    L = layout(16, 4, 2, 4, 5)
    rules = InteractionRules()
    B = build_block_mask(L, rules, 16, 8)
    path = tmp_path / "m.bin"
    save_block_mask(B, path)
    data = path.read_bytes()
    assert data[:4] == b"HBMK"
    n_partial = int((B.tiles == TileState.PARTIAL).sum())
    assert len(data) == 4 + 2 + 8 + 4 + 4 + B.num_tiles + n_partial * 16
    B2 = load_block_mask(path)
    assert np.array_equal(B2.tiles, B.tiles)
    assert np.array_equal(B2.expand(), B.expand())
    stats_path = tmp_path / "m.json"
    write_stats_json(tile_stats(B), stats_path, rules="default")
    doc = json.loads(stats_path.read_text())
    assert doc["non_empty"] == int((B.tiles != TileState.EMPTY).sum())
    assert doc["rules"] == "default"


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + bytes(30))
    with pytest.raises(ConfigError):
        load_block_mask(p)


def test_segments_in_default_rules():
    L = layout(8, 4, 1, 2, 2)
    M = build_token_mask(L, InteractionRules())
    seg = L.segment
    text, x, lr = seg == SEG_TEXT, seg == SEG_X, seg == SEG_LR
    assert M[np.ix_(text, text)].all() and M[np.ix_(text, x)].all()
    assert not M[np.ix_(text, lr)].any()
    assert not M[np.ix_(lr, x)].any()
    assert M[np.ix_(lr, text)].all()
