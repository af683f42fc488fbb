"""Token ordering and geometry for the joined [text | X | X_lr] sequence.

High-resolution tokens (X) and guidance tokens (X_lr) are each laid out in
Hilbert-curve order so that every aligned ``side x side`` window of X is one
contiguous run of sequence indices. Guidance tokens carry positions scaled by
the resolution ratio so each one sits on a high-resolution lattice site.

Coordinates are ``(x, y)`` = ``(column, row)`` throughout; 2D positions used
for rotary encoding are stored as ``(row, col)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BoundsError, ConfigError

SEG_TEXT = 0
SEG_X = 1
SEG_LR = 2
SEGMENT_NAMES = {SEG_TEXT: "text", SEG_X: "x", SEG_LR: "lr"}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


# --------------------------------------------------------------------------
# Hilbert curve
# --------------------------------------------------------------------------


def hilbert_points(indices, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized curve position -> (x, y) for an order-``order`` curve."""
    t = np.asarray(indices, dtype=np.int64).copy()
    n = 1 << order
    if t.size and (t.min() < 0 or t.max() >= n * n):
        raise BoundsError(f"curve index out of range [0, {n * n}) for order {order}")
    x = np.zeros_like(t)
    y = np.zeros_like(t)
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        flip = (ry == 0) & (rx == 1)
        x = np.where(flip, s - 1 - x, x)
        y = np.where(flip, s - 1 - y, y)
        swap = ry == 0
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        x = x + s * rx
        y = y + s * ry
        t //= 4
        s *= 2
    return x, y


def hilbert_indices(xs, ys, order: int) -> np.ndarray:
    """Vectorized (x, y) -> curve position; inverse of :func:`hilbert_points`."""
    x = np.asarray(xs, dtype=np.int64).copy()
    y = np.asarray(ys, dtype=np.int64).copy()
    n = 1 << order
    if x.size and (min(x.min(), y.min()) < 0 or max(x.max(), y.max()) >= n):
        raise BoundsError(f"coordinate outside {n}x{n} grid for order {order}")
    d = np.zeros_like(x)
    s = n // 2
    while s > 0:
        rx = ((x & s) > 0).astype(np.int64)
        ry = ((y & s) > 0).astype(np.int64)
        d += s * s * ((3 * rx) ^ ry)
        flip = (ry == 0) & (rx == 1)
        x = np.where(flip, n - 1 - x, x)
        y = np.where(flip, n - 1 - y, y)
        swap = ry == 0
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        s //= 2
    return d


def hilbert_point(index: int, order: int) -> tuple[int, int]:
    """Grid coordinate ``(x, y)`` visited at ``index`` on the order-k curve."""
    if order < 0:
        raise BoundsError("order must be >= 0")
    if not 0 <= index < 4**order:
        raise BoundsError(f"index {index} out of range [0, {4 ** order})")
    x, y = hilbert_points(np.array([index]), order)
    return int(x[0]), int(y[0])


def hilbert_index(x: int, y: int, order: int) -> int:
    """Curve position of grid cell ``(x, y)``."""
    if order < 0:
        raise BoundsError("order must be >= 0")
    n = 1 << order
    if not (0 <= x < n and 0 <= y < n):
        raise BoundsError(f"({x}, {y}) outside {n}x{n} grid")
    return int(hilbert_indices(np.array([x]), np.array([y]), order)[0])


def curve_order(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Cells of a ``rows x cols`` grid in curve order, as (x, y) arrays.

    The curve runs over the smallest enclosing power-of-two square; cells
    outside the grid are dropped, which keeps aligned power-of-two blocks
    contiguous.
    """
    side = _next_pow2(max(rows, cols))
    order = side.bit_length() - 1
    x, y = hilbert_points(np.arange(side * side), order)
    keep = (x < cols) & (y < rows)
    return x[keep], y[keep]


# --------------------------------------------------------------------------
# Specs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """High-resolution latent token grid.

    ``rows``/``cols`` are token counts (pixels / ``downsample``). With
    ``pad=True`` a non-power-of-two axis is padded up; padded cells get no
    token.
    """

    rows: int
    cols: int
    downsample: int = 16
    pad: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.downsample < 1:
            raise ConfigError("downsample must be >= 1")
        if not self.pad and not (_is_pow2(self.rows) and _is_pow2(self.cols)):
            raise ConfigError(
                f"grid {self.rows}x{self.cols} is not power-of-two; enable padding"
            )

    @property
    def padded_rows(self) -> int:
        return _next_pow2(self.rows)

    @property
    def padded_cols(self) -> int:
        return _next_pow2(self.cols)

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    @classmethod
    def from_pixels(cls, height: int, width: int, downsample: int = 16, pad: bool = False):
        return cls(height // downsample, width // downsample, downsample, pad)


@dataclass(frozen=True)
class WindowSpec:
    side: int = 16
    halo: int = 2

    def __post_init__(self):
        if not _is_pow2(self.side):
            raise ConfigError(f"window side {self.side} must be a power of two")
        if not 0 <= self.halo < self.side:
            raise ConfigError(f"halo {self.halo} must satisfy 0 <= halo < side")


@dataclass(frozen=True)
class AnchorSpec:
    lr_rows: int
    lr_cols: int
    ratio: int = 4

    def __post_init__(self):
        if self.lr_rows < 1 or self.lr_cols < 1:
            raise ConfigError("guidance grid must be at least 1x1")
        if int(self.ratio) != self.ratio or self.ratio < 1:
            raise ConfigError(f"ratio must be an integer >= 1, got {self.ratio}")

    @property
    def num_tokens(self) -> int:
        return self.lr_rows * self.lr_cols

    def check_grid(self, grid: GridSpec) -> None:
        if self.ratio * self.lr_rows != grid.rows or self.ratio * self.lr_cols != grid.cols:
            raise ConfigError(
                f"anchor {self.lr_rows}x{self.lr_cols} * {self.ratio} does not match "
                f"grid {grid.rows}x{grid.cols}"
            )

    @classmethod
    def for_grid(cls, grid: GridSpec, ratio: int = 4) -> "AnchorSpec":
        if grid.rows % ratio or grid.cols % ratio:
            raise ConfigError(f"ratio {ratio} does not divide grid {grid.rows}x{grid.cols}")
        return cls(grid.rows // ratio, grid.cols // ratio, ratio)


def anchor_positions(anchor: AnchorSpec) -> np.ndarray:
    """Scaled ``(row, col)`` positions of guidance tokens in raster order."""
    m, n = np.meshgrid(np.arange(anchor.lr_rows), np.arange(anchor.lr_cols), indexing="ij")
    pos = np.stack([m.ravel(), n.ravel()], axis=1) * anchor.ratio
    return pos.astype(np.float64)


def window_of(x: int, y: int, window: WindowSpec, grid: GridSpec) -> int:
    """Window id of token ``(x, y)``: row-major over the window grid."""
    if not (0 <= x < grid.cols and 0 <= y < grid.rows):
        raise BoundsError(f"({x}, {y}) outside {grid.rows}x{grid.cols} grid")
    per_row = grid.padded_cols // window.side
    return (y // window.side) * per_row + (x // window.side)


# --------------------------------------------------------------------------
# Layout
# --------------------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TokenLayout:
    """Joined sequence ``[text | X | X_lr]`` with per-token geometry.

    Per-token arrays have length ``seq_len``. Grid coordinates and window ids
    are ``-1`` where they do not apply; text positions are NaN (no rotation).
    """

    text_len: int
    grid: GridSpec
    window: WindowSpec
    anchor: Optional[AnchorSpec]
    x_range: tuple[int, int]
    lr_range: tuple[int, int]
    x_perm: np.ndarray  # (rows, cols) -> sequence index
    lr_perm: np.ndarray  # (lr_rows, lr_cols) -> sequence index
    segment: np.ndarray
    grid_x: np.ndarray
    grid_y: np.ndarray
    positions: np.ndarray  # (S, 2) as (row, col)
    window_id: np.ndarray
    window_ranges: np.ndarray  # (n_windows, 2) [start, end)
    lr_window_side: int
    lr_window_id: np.ndarray
    lr_window_ranges: np.ndarray
    windows_per_row: int = field(default=1)

    @property
    def seq_len(self) -> int:
        return int(self.segment.shape[0])

    @property
    def ratio(self) -> int:
        return self.anchor.ratio if self.anchor is not None else 1

    @property
    def text_range(self) -> tuple[int, int]:
        return (0, self.text_len)

    @property
    def num_x(self) -> int:
        return self.x_range[1] - self.x_range[0]

    @property
    def num_lr(self) -> int:
        return self.lr_range[1] - self.lr_range[0]

    def x_to_sequence(self, grid_values: np.ndarray) -> np.ndarray:
        """Raster ``(rows, cols, ...)`` values -> X-segment rows in sequence order."""
        flat = grid_values.reshape(self.grid.rows * self.grid.cols, *grid_values.shape[2:])
        out = np.empty_like(flat)
        out[self.x_perm.ravel() - self.x_range[0]] = flat
        return out

    def x_from_sequence(self, seq_values: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`x_to_sequence`."""
        flat = seq_values[self.x_perm.ravel() - self.x_range[0]]
        return flat.reshape(self.grid.rows, self.grid.cols, *seq_values.shape[1:])

    def lr_to_sequence(self, grid_values: np.ndarray) -> np.ndarray:
        flat = grid_values.reshape(self.num_lr, *grid_values.shape[2:])
        out = np.empty_like(flat)
        out[self.lr_perm.ravel() - self.lr_range[0]] = flat
        return out

    def lr_from_sequence(self, seq_values: np.ndarray) -> np.ndarray:
        a = self.anchor
        flat = seq_values[self.lr_perm.ravel() - self.lr_range[0]]
        return flat.reshape(a.lr_rows, a.lr_cols, *seq_values.shape[1:])

    def dump(self) -> str:
        """Line-oriented table used by golden-file tests."""
        lines = ["seq_idx, segment, grid_x, grid_y, pos_x, pos_y, window_id"]
        for i in range(self.seq_len):
            seg = int(self.segment[i])
            if seg == SEG_TEXT:
                px = py = "-"
            else:
                py, px = (str(int(v)) for v in self.positions[i])
            wid = self.window_id[i] if seg == SEG_X else self.lr_window_id[i]
            lines.append(
                f"{i}, {SEGMENT_NAMES[seg]}, {self.grid_x[i]}, {self.grid_y[i]}, "
                f"{px}, {py}, {wid}"
            )
        return "\n".join(lines) + "\n"


def build_layout(
    grid: GridSpec,
    window: WindowSpec,
    anchor: Optional[AnchorSpec] = None,
    text_len: int = 0,
) -> TokenLayout:
    """Assemble ``[text | X (Hilbert) | X_lr (Hilbert)]`` with geometry."""
    if text_len < 0:
        raise ConfigError("text_len must be >= 0")
    prow, pcol = grid.padded_rows, grid.padded_cols
    if prow % window.side or pcol % window.side:
        raise ConfigError(
            f"window side {window.side} does not divide grid {prow}x{pcol}"
        )
    if anchor is not None:
        anchor.check_grid(grid)
        if not (_is_pow2(anchor.lr_rows) and _is_pow2(anchor.lr_cols)):
            raise ConfigError("guidance grid must be power-of-two per axis")

    xs, ys = curve_order(prow, pcol)
    active = (xs < grid.cols) & (ys < grid.rows)
    xs, ys = xs[active], ys[active]
    n_x = xs.size
    x_start = text_len
    x_seq = np.arange(x_start, x_start + n_x)
    x_perm = np.full((grid.rows, grid.cols), -1, dtype=np.int64)
    x_perm[ys, xs] = x_seq

    wpr = pcol // window.side
    n_windows = (prow // window.side) * wpr
    wid = (ys // window.side) * wpr + xs // window.side

    if anchor is not None:
        lxs, lys = curve_order(anchor.lr_rows, anchor.lr_cols)
        n_lr = lxs.size
        lr_side = min(window.side, anchor.lr_rows, anchor.lr_cols)
    else:
        lxs = lys = np.zeros(0, dtype=np.int64)
        n_lr = 0
        lr_side = 1
    lr_start = x_start + n_x
    lr_seq = np.arange(lr_start, lr_start + n_lr)
    if anchor is not None:
        lr_perm = np.full((anchor.lr_rows, anchor.lr_cols), -1, dtype=np.int64)
        lr_perm[lys, lxs] = lr_seq
        lr_wpr = anchor.lr_cols // lr_side
        lwid = (lys // lr_side) * lr_wpr + lxs // lr_side
        n_lr_windows = (anchor.lr_rows // lr_side) * lr_wpr
    else:
        lr_perm = np.zeros((0, 0), dtype=np.int64)
        lwid = np.zeros(0, dtype=np.int64)
        n_lr_windows = 0

    S = text_len + n_x + n_lr
    segment = np.empty(S, dtype=np.int8)
    segment[:text_len] = SEG_TEXT
    segment[x_start:lr_start] = SEG_X
    segment[lr_start:] = SEG_LR
    gx = np.full(S, -1, dtype=np.int64)
    gy = np.full(S, -1, dtype=np.int64)
    gx[x_start:lr_start], gy[x_start:lr_start] = xs, ys
    gx[lr_start:], gy[lr_start:] = lxs, lys
    positions = np.full((S, 2), np.nan)
    positions[x_start:lr_start, 0] = ys
    positions[x_start:lr_start, 1] = xs
    r = anchor.ratio if anchor is not None else 1
    positions[lr_start:, 0] = lys * r
    positions[lr_start:, 1] = lxs * r
    window_id = np.full(S, -1, dtype=np.int64)
    window_id[x_start:lr_start] = wid
    lr_window_id = np.full(S, -1, dtype=np.int64)
    lr_window_id[lr_start:] = lwid

    window_ranges = _ranges(wid, n_windows, x_start)
    lr_window_ranges = _ranges(lwid, n_lr_windows, lr_start)

    return TokenLayout(
        text_len=text_len,
        grid=grid,
        window=window,
        anchor=anchor,
        x_range=(x_start, lr_start),
        lr_range=(lr_start, S),
        x_perm=_frozen(x_perm),
        lr_perm=_frozen(lr_perm),
        segment=_frozen(segment),
        grid_x=_frozen(gx),
        grid_y=_frozen(gy),
        positions=_frozen(positions),
        window_id=_frozen(window_id),
        window_ranges=_frozen(window_ranges),
        lr_window_side=lr_side,
        lr_window_id=_frozen(lr_window_id),
        lr_window_ranges=_frozen(lr_window_ranges),
        windows_per_row=wpr,
    )


def _ranges(ids: np.ndarray, count: int, offset: int) -> np.ndarray:
    """[start, end) of each id's run; ids must form contiguous runs."""
    out = np.zeros((count, 2), dtype=np.int64)
    if ids.size == 0:
        return out
    order = np.arange(ids.size)
    starts = np.full(count, ids.size, dtype=np.int64)
    ends = np.zeros(count, dtype=np.int64)
    np.minimum.at(starts, ids, order)
    np.maximum.at(ends, ids, order + 1)
    empty = starts == ids.size
    starts[empty] = 0
    ends[empty] = 0
    counts = np.bincount(ids, minlength=count)
    if np.any((ends - starts) != counts):
        raise ConfigError("window tokens are not contiguous in curve order")
    out[:, 0] = starts + offset
    out[:, 1] = ends + offset
    out[empty] = offset
    return out
