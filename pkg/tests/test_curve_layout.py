import numpy as np
import pytest
from hypothesis import given, strategies as st

from hierattn.curve_layout import (
    SEG_LR,
    SEG_TEXT,
    SEG_X,
    AnchorSpec,
    GridSpec,
    WindowSpec,
    anchor_positions,
    build_layout,
    hilbert_index,
    hilbert_indices,
    hilbert_point,
    hilbert_points,
    window_of,
)
from hierattn.errors import BoundsError, ConfigError

from oracles import recursive_hilbert


def test_recursive_oracle_is_a_hilbert_curve():
    for k in range(1, 5):
        cells = recursive_hilbert(k)
        assert len(set(cells)) == 4**k
        steps = np.abs(np.diff(np.array(cells), axis=0)).sum(axis=1)
        assert (steps == 1).all()


def test_order1_convention():
    assert hilbert_point(0, 1) == (0, 0)
    assert hilbert_point(2, 1) == (1, 1)
    assert [hilbert_point(i, 1) for i in range(4)] == [(0, 0), (0, 1), (1, 1), (1, 0)]


@pytest.mark.parametrize("k", range(0, 7))
def test_matches_recursive_oracle(k):
    x, y = hilbert_points(np.arange(4**k), k)
    assert list(zip(x.tolist(), y.tolist())) == recursive_hilbert(k)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_last_index_is_a_corner(k):
    n = 1 << k
    assert hilbert_point(4**k - 1, k) in {(0, 0), (0, n - 1), (n - 1, 0), (n - 1, n - 1)}
    assert hilbert_point(4**k - 1, k) == recursive_hilbert(k)[-1]


def test_order2_table():
    oracle = recursive_hilbert(2)
    for d, (x, y) in enumerate(oracle):
        assert hilbert_point(d, 2) == (x, y)
        assert hilbert_index(x, y, 2) == d


@given(st.integers(0, 6).flatmap(lambda k: st.tuples(st.just(k), st.integers(0, 4**k - 1))))
def test_inverse_composition(kd):
    k, d = kd
    assert hilbert_index(*hilbert_point(d, k), k) == d


def test_origin_maps_to_zero():
    for k in range(7):
        assert hilbert_index(0, 0, k) == 0


def test_bounds_errors():
    with pytest.raises(BoundsError):
        hilbert_point(4, 1)
    with pytest.raises(BoundsError):
        hilbert_point(-1, 2)
    with pytest.raises(BoundsError):
        hilbert_index(2, 0, 1)
    with pytest.raises(BoundsError):
        hilbert_indices(np.array([0]), np.array([-1]), 3)


@pytest.mark.parametrize("k", range(1, 7))
def test_aligned_blocks_are_contiguous(k):
    n = 1 << k
    d = np.empty((n, n), dtype=np.int64)
    x, y = hilbert_points(np.arange(n * n), k)
    d[y, x] = np.arange(n * n)
    for j in range(k + 1):
        b = 1 << j
        blocks = d.reshape(n // b, b, n // b, b).transpose(0, 2, 1, 3).reshape(-1, b * b)
        assert ((blocks.max(axis=1) - blocks.min(axis=1)) == b * b - 1).all()


# --- layout -----------------------------------------------------------------


def test_1k_layout_sizes():
    L = build_layout(GridSpec(64, 64), WindowSpec(16, 2), AnchorSpec(16, 16, 4), text_len=0)
    assert L.num_x == 4096
    assert L.window_ranges.shape == (16, 2)
    assert (np.diff(L.window_ranges, axis=1) == 256).all()
    assert L.num_lr == 256
    assert L.seq_len == 4096 + 256


def test_4k_grid_token_count():
    assert GridSpec.from_pixels(4096, 4096).num_tokens == 65536
    L = build_layout(GridSpec(256, 256), WindowSpec(16, 2))
    assert L.num_x == 65536


def test_tiny_layout_sequence():
    L = build_layout(GridSpec(2, 2), WindowSpec(2, 0), None, text_len=1)
    assert L.segment.tolist() == [SEG_TEXT, SEG_X, SEG_X, SEG_X, SEG_X]
    cells = list(zip(L.grid_x[1:].tolist(), L.grid_y[1:].tolist()))
    assert cells == recursive_hilbert(1)
    assert cells == [(0, 0), (0, 1), (1, 1), (1, 0)]


def test_layout_dump_golden():
    L = build_layout(GridSpec(2, 2), WindowSpec(2, 0), None, text_len=1)
    assert L.dump() == (
        "seq_idx, segment, grid_x, grid_y, pos_x, pos_y, window_id\n"
        "0, text, -1, -1, -, -, -1\n"
        "1, x, 0, 0, 0, 0, 0\n"
        "2, x, 0, 1, 0, 1, 0\n"
        "3, x, 1, 1, 1, 1, 0\n"
        "4, x, 1, 0, 1, 0, 0\n"
    )


def test_layout_dump_with_guidance_positions():
    L = build_layout(GridSpec(4, 4), WindowSpec(2, 0), AnchorSpec(2, 2, 2), text_len=0)
    lines = L.dump().splitlines()
    assert len(lines) == 1 + 16 + 4
    # guidance cell (x=1, y=0) sits at scaled position (2, 0)
    lr_rows = [ln.split(", ") for ln in lines[17:]]
    assert ["lr", "1", "0", "2", "0"] in [r[1:6] for r in lr_rows]


@pytest.mark.parametrize("side,window,text", [(8, 2, 3), (16, 4, 0), (32, 8, 5), (64, 16, 2)])
def test_layout_invariants(side, window, text):
    grid = GridSpec(side, side)
    anchor = AnchorSpec.for_grid(grid, 2)
    L = build_layout(grid, WindowSpec(window, 1), anchor, text_len=text)
    S = L.seq_len
    assert S == text + side * side + anchor.num_tokens
    # segments partition the sequence
    assert L.text_range == (0, text)
    assert L.x_range == (text, text + side * side)
    assert L.lr_range == (text + side * side, S)
    # perms are bijections onto their ranges
    assert sorted(L.x_perm.ravel().tolist()) == list(range(*L.x_range))
    assert sorted(L.lr_perm.ravel().tolist()) == list(range(*L.lr_range))
    # each window is one contiguous run of side^2 tokens
    for w, (a, b) in enumerate(L.window_ranges):
        assert b - a == window * window
        assert (L.window_id[a:b] == w).all()
    # guidance positions are ratio * grid coordinate
    lr = slice(*L.lr_range)
    assert np.array_equal(L.positions[lr, 0], L.grid_y[lr] * 2)
    assert np.array_equal(L.positions[lr, 1], L.grid_x[lr] * 2)
    assert np.isnan(L.positions[: text]).all()


def test_anchor_coincidence():
    grid = GridSpec(32, 32)
    L = build_layout(grid, WindowSpec(8, 0), AnchorSpec.for_grid(grid, 4))
    x_pos = {tuple(p) for p in L.positions[slice(*L.x_range)].astype(int).tolist()}
    lr_pos = L.positions[slice(*L.lr_range)].astype(int).tolist()
    assert all(tuple(p) in x_pos for p in lr_pos)
    assert len({tuple(p) for p in lr_pos}) == len(lr_pos)


def test_raster_round_trip():
    grid = GridSpec(8, 8)
    L = build_layout(grid, WindowSpec(4, 0), AnchorSpec.for_grid(grid, 2), text_len=2)
    vals = np.arange(64 * 3).reshape(8, 8, 3)
    seq = L.x_to_sequence(vals)
    assert np.array_equal(L.x_from_sequence(seq), vals)
    xs, ys = L.grid_x[slice(*L.x_range)], L.grid_y[slice(*L.x_range)]
    assert np.array_equal(seq, vals[ys, xs])
    lvals = np.arange(16).reshape(4, 4)
    assert np.array_equal(L.lr_from_sequence(L.lr_to_sequence(lvals)), lvals)


def test_anchor_positions():
    a = AnchorSpec(4, 6, 4)
    pos = anchor_positions(a)
    assert tuple(pos[0]) == (0, 0)
    assert tuple(pos[3 * 6 + 5]) == (12, 20)
    assert pos[:, 0].max() < 16 and pos[:, 1].max() < 24


def test_window_of():
    grid = GridSpec(64, 64)
    w = WindowSpec(16, 0)
    assert window_of(0, 0, w, grid) == 0
    assert window_of(15, 15, w, grid) == 0
    assert window_of(0, 16, w, grid) == 4
    assert window_of(16, 0, w, grid) == 1
    with pytest.raises(BoundsError):
        window_of(64, 0, w, grid)
    L = build_layout(grid, w)
    for i in range(*L.x_range):
        assert L.window_id[i] == window_of(int(L.grid_x[i]), int(L.grid_y[i]), w, grid)


def test_config_errors():
    with pytest.raises(ConfigError):
        GridSpec(12, 16)
    with pytest.raises(ConfigError):
        WindowSpec(12)
    with pytest.raises(ConfigError):
        WindowSpec(4, 4)
    with pytest.raises(ConfigError):
        build_layout(GridSpec(8, 8), WindowSpec(16, 0))
    with pytest.raises(ConfigError):
        build_layout(GridSpec(16, 16), WindowSpec(4, 0), AnchorSpec(4, 4, 2))
    with pytest.raises(ConfigError):
        AnchorSpec(4, 4, 0)


def test_padding_marks_inactive_cells():
    grid = GridSpec(12, 16, pad=True)
    assert (grid.padded_rows, grid.padded_cols) == (16, 16)
    L = build_layout(grid, WindowSpec(4, 0))
    assert L.num_x == 12 * 16
    assert (L.grid_y[slice(*L.x_range)] < 12).all()
    # windows stay contiguous; windows entirely in the padding are empty
    sizes = np.diff(L.window_ranges, axis=1).ravel()
    assert sizes.sum() == 12 * 16
    assert sorted(set(sizes.tolist())) == [0, 16]


def test_rectangular_grid():
    L = build_layout(GridSpec(8, 16), WindowSpec(4, 0), AnchorSpec(4, 8, 2))
    assert L.num_x == 128 and L.num_lr == 32
    assert (np.diff(L.window_ranges, axis=1) == 16).all()
