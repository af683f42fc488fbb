"""Interaction rules, the dense token-mask oracle, and tri-state block masks.

A :class:`BlockMask` tiles the ``S x S`` attention matrix into
``q_tile x k_tile`` tiles, each EMPTY (skipped), FULL (no per-element test)
or PARTIAL (explicit bit pattern). Only non-empty tiles are stored, in CSR
form, and identical partial patterns share one payload.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .curve_layout import SEG_LR, SEG_TEXT, SEG_X, TokenLayout
from .errors import ConfigError, SizeError

DEFAULT_Q_TILE = 128
DEFAULT_K_TILE = 64
ORACLE_CAP = 16384

MASK_MAGIC = b"HBMK"
MASK_VERSION = 1


class TileState(enum.IntEnum):
    EMPTY = 0
    PARTIAL = 1
    FULL = 2


@dataclass(frozen=True)
class InteractionRules:
    """Which segment pairs may interact.

    Defaults: text attends text and X; X attends its window, a halo ring of
    4-adjacent windows, text, and the guidance block covering its window;
    guidance attends text and guidance tokens in its own guidance window.
    """

    text_to_text: bool = True
    text_to_x: bool = True
    text_to_lr: bool = False
    x_to_text: bool = True
    x_local: bool = True
    x_neighbor_halo: bool = True
    x_to_lr_region: bool = True
    x_to_lr_all: bool = False
    lr_to_text: bool = True
    lr_self: bool = True
    lr_self_scope: Literal["global", "local"] = "local"

    def __post_init__(self):
        if self.x_to_lr_region and self.x_to_lr_all:
            raise ConfigError("enable at most one of x_to_lr_region / x_to_lr_all")
        if self.lr_self_scope not in ("global", "local"):
            raise ConfigError(f"lr_self_scope must be 'global' or 'local', got {self.lr_self_scope!r}")

    @classmethod
    def no_guidance(cls, **kw) -> "InteractionRules":
        return cls(x_to_lr_region=False, x_to_lr_all=False, **kw)

    @classmethod
    def full(cls) -> "InteractionRules":
        """Every flag on; with a single window this is dense attention."""
        return cls(text_to_lr=True, x_to_lr_region=False, x_to_lr_all=True, lr_self_scope="global")

    @classmethod
    def none(cls) -> "InteractionRules":
        return cls(
            text_to_text=False, text_to_x=False, x_to_text=False, x_local=False,
            x_neighbor_halo=False, x_to_lr_region=False, lr_to_text=False, lr_self=False,
        )

    def with_overrides(self, **kw) -> "InteractionRules":
        return replace(self, **kw)


# --------------------------------------------------------------------------
# per-token attributes and the rule evaluator
# --------------------------------------------------------------------------


class _Attrs:
    """Flat per-token arrays the rule evaluator broadcasts over."""

    def __init__(self, layout: TokenLayout):
        self.layout = layout
        side = layout.window.side
        self.side = side
        self.halo = layout.window.halo
        seg = layout.segment
        self.seg = seg
        is_x = seg == SEG_X
        gx = np.where(is_x, layout.grid_x, 0)
        gy = np.where(is_x, layout.grid_y, 0)
        self.wr = np.where(is_x, gy // side, -10)
        self.wc = np.where(is_x, gx // side, -10)
        self.lrow = gy % side
        self.lcol = gx % side
        self.win = layout.window_id
        # guidance block covering each X token's window
        r = layout.ratio
        self.m_lo = self.wr * side // r
        self.m_hi = -((-(self.wr + 1) * side) // r)
        self.n_lo = self.wc * side // r
        self.n_hi = -((-(self.wc + 1) * side) // r)
        is_lr = seg == SEG_LR
        self.lm = np.where(is_lr, layout.grid_y, -1)
        self.ln = np.where(is_lr, layout.grid_x, -1)
        self.lwin = layout.lr_window_id


def _allowed(at: _Attrs, rules: InteractionRules, qi: np.ndarray, ki: np.ndarray) -> np.ndarray:
    """Boolean ``(len(qi), len(ki))`` block of the token mask."""
    sq = at.seg[qi][:, None]
    sk = at.seg[ki][None, :]
    k_text = sk == SEG_TEXT
    k_x = sk == SEG_X
    k_lr = sk == SEG_LR
    out = np.zeros((qi.size, ki.size), dtype=bool)

    q_text = sq == SEG_TEXT
    if q_text.any():
        t = np.zeros_like(out)
        if rules.text_to_text:
            t |= k_text
        if rules.text_to_x:
            t |= k_x
        if rules.text_to_lr:
            t |= k_lr
        out |= q_text & t

    q_x = sq == SEG_X
    if q_x.any():
        x = np.zeros_like(out)
        if rules.x_to_text:
            x |= k_text
        if rules.x_local or (rules.x_neighbor_halo and at.halo > 0):
            wq = at.win[qi][:, None]
            wk = at.win[ki][None, :]
            loc = np.zeros_like(out)
            if rules.x_local:
                loc |= wq == wk
            if rules.x_neighbor_halo and at.halo > 0:
                h, s = at.halo, at.side
                dr = at.wr[ki][None, :] - at.wr[qi][:, None]
                dc = at.wc[ki][None, :] - at.wc[qi][:, None]
                lr_ = at.lrow[ki][None, :]
                lc_ = at.lcol[ki][None, :]
                loc |= (dr == 0) & (
                    ((dc == 1) & (lc_ < h)) | ((dc == -1) & (lc_ >= s - h))
                )
                loc |= (dc == 0) & (
                    ((dr == 1) & (lr_ < h)) | ((dr == -1) & (lr_ >= s - h))
                )
            x |= k_x & loc
        if rules.x_to_lr_all:
            x |= k_lr
        elif rules.x_to_lr_region:
            lm = at.lm[ki][None, :]
            ln = at.ln[ki][None, :]
            reg = (
                (lm >= at.m_lo[qi][:, None]) & (lm < at.m_hi[qi][:, None])
                & (ln >= at.n_lo[qi][:, None]) & (ln < at.n_hi[qi][:, None])
            )
            x |= k_lr & reg
        out |= q_x & x

    q_lr = sq == SEG_LR
    if q_lr.any():
        g = np.zeros_like(out)
        if rules.lr_to_text:
            g |= k_text
        if rules.lr_self and rules.lr_self_scope == "global":
            g |= k_lr
        elif rules.lr_self:
            g |= k_lr & (at.lwin[qi][:, None] == at.lwin[ki][None, :])
        out |= q_lr & g
    return out


def build_token_mask(layout: TokenLayout, rules: InteractionRules, cap: int = ORACLE_CAP) -> np.ndarray:
    """Dense ``S x S`` boolean mask; ``[q, k]`` is True iff q may attend k."""
    S = layout.seq_len
    if S > cap:
        raise SizeError(f"sequence length {S} exceeds oracle cap {cap}")
    at = _Attrs(layout)
    idx = np.arange(S)
    out = np.empty((S, S), dtype=bool)
    step = max(1, 2**22 // max(S, 1))
    for a in range(0, S, step):
        out[a:a + step] = _allowed(at, rules, idx[a:a + step], idx)
    return out


# --------------------------------------------------------------------------
# block mask
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BlockMask:
    """Tri-state tile mask in CSR form.

    Row ``i`` of the tile grid owns entries ``row_ptr[i]:row_ptr[i+1]`` of
    ``col_idx``/``payload_id``; a payload id of -1 marks a FULL tile, any
    other id indexes ``patterns`` (packed ``q_tile x k_tile`` bits). Tiles
    not listed are EMPTY.
    """

    seq_len: int
    q_tile: int
    k_tile: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    payload_id: np.ndarray
    patterns: np.ndarray
    _unpacked: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_q(self) -> int:
        return -(-self.seq_len // self.q_tile)

    @property
    def n_k(self) -> int:
        return -(-self.seq_len // self.k_tile)

    @property
    def num_tiles(self) -> int:
        return self.n_q * self.n_k

    def pattern(self, pid: int) -> np.ndarray:
        """Unpacked ``(q_tile, k_tile)`` bool payload."""
        p = self._unpacked.get(pid)
        if p is None:
            n = self.q_tile * self.k_tile
            p = np.unpackbits(self.patterns[pid], count=n).astype(bool).reshape(self.q_tile, self.k_tile)
            p.setflags(write=False)
            self._unpacked[pid] = p
        return p

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[a:b], self.payload_id[a:b]

    def tile_extent(self, i: int, j: int) -> tuple[int, int, int, int]:
        return (
            i * self.q_tile, min(self.seq_len, (i + 1) * self.q_tile),
            j * self.k_tile, min(self.seq_len, (j + 1) * self.k_tile),
        )

    @cached_property
    def tiles(self) -> np.ndarray:
        """Dense ``(n_q, n_k)`` array of :class:`TileState` values."""
        t = np.zeros((self.n_q, self.n_k), dtype=np.uint8)
        rows = np.repeat(np.arange(self.n_q), np.diff(self.row_ptr))
        t[rows, self.col_idx] = np.where(self.payload_id < 0, TileState.FULL, TileState.PARTIAL)
        t.setflags(write=False)
        return t

    def state(self, i: int, j: int) -> TileState:
        return TileState(int(self.tiles[i, j]))

    def tile_bits(self, i: int, j: int) -> np.ndarray:
        """Bits of tile ``(i, j)`` clipped to the sequence."""
        qa, qb, ka, kb = self.tile_extent(i, j)
        cols, pids = self.row(i)
        hit = np.flatnonzero(cols == j)
        if hit.size == 0:
            return np.zeros((qb - qa, kb - ka), dtype=bool)
        pid = int(pids[hit[0]])
        if pid < 0:
            return np.ones((qb - qa, kb - ka), dtype=bool)
        return self.pattern(pid)[: qb - qa, : kb - ka].copy()

    def partial_tiles(self) -> Iterator[tuple[int, int, np.ndarray]]:
        """Yield ``(i, j, payload)`` for every PARTIAL tile, row-major."""
        for i in range(self.n_q):
            cols, pids = self.row(i)
            for j, pid in zip(cols, pids):
                if pid >= 0:
                    yield i, int(j), self.pattern(int(pid))

    def expand(self, cap: int = ORACLE_CAP) -> np.ndarray:
        """Dense ``S x S`` bool mask implied by the tile states."""
        S = self.seq_len
        if S > cap:
            raise SizeError(f"sequence length {S} exceeds expansion cap {cap}")
        out = np.zeros((S, S), dtype=bool)
        for i in range(self.n_q):
            cols, pids = self.row(i)
            for j, pid in zip(cols, pids):
                qa, qb, ka, kb = self.tile_extent(i, int(j))
                if pid < 0:
                    out[qa:qb, ka:kb] = True
                else:
                    out[qa:qb, ka:kb] = self.pattern(int(pid))[: qb - qa, : kb - ka]
        return out

    def row_counts(self) -> np.ndarray:
        """Allowed keys per query row."""
        counts = np.zeros(self.n_q * self.q_tile, dtype=np.int64)
        pat_rows = [None] * len(self.patterns)
        for i in range(self.n_q):
            cols, pids = self.row(i)
            qa = i * self.q_tile
            for j, pid in zip(cols, pids):
                _, _, ka, kb = self.tile_extent(i, int(j))
                if pid < 0:
                    counts[qa:qa + self.q_tile] += kb - ka
                else:
                    if pat_rows[pid] is None:
                        pat_rows[pid] = {}
                    key = kb - ka
                    rs = pat_rows[pid].get(key)
                    if rs is None:
                        rs = self.pattern(int(pid))[:, :key].sum(axis=1)
                        pat_rows[pid][key] = rs
                    counts[qa:qa + self.q_tile] += rs
        return counts[: self.seq_len]

    def allowed_bits(self) -> int:
        return int(self.row_counts().sum())

    def storage_bytes(self) -> int:
        """Bytes held by the tile structure (CSR arrays plus payloads)."""
        return int(self.row_ptr.nbytes + self.col_idx.nbytes + self.payload_id.nbytes + self.patterns.nbytes)

    def dense_bit_bytes(self) -> int:
        """Bytes of an ``S x S`` mask at one bit per entry."""
        return -(-self.seq_len * self.seq_len // 8)

    def with_tile_state(self, i: int, j: int, new: TileState) -> "BlockMask":
        """Copy with tile ``(i, j)`` forced EMPTY or FULL (fault injection)."""
        if new == TileState.PARTIAL:
            raise ConfigError("can only force a tile EMPTY or FULL")
        rows: list[list[tuple[int, int]]] = []
        for r in range(self.n_q):
            cols, pids = self.row(r)
            entries = [(int(c), int(p)) for c, p in zip(cols, pids) if not (r == i and c == j)]
            if r == i and new == TileState.FULL:
                entries.append((j, -1))
                entries.sort()
            rows.append(entries)
        return _from_rows(self.seq_len, self.q_tile, self.k_tile, rows, self.patterns)


def block_mask_from_dense(token_mask: np.ndarray, q_tile: int, k_tile: int) -> BlockMask:
    """Tile an arbitrary dense mask (small sizes; used for permuted layouts)."""
    S = token_mask.shape[0]
    if token_mask.shape != (S, S):
        raise SizeError(f"mask must be square, got {token_mask.shape}")
    n_q, n_k = -(-S // q_tile), -(-S // k_tile)
    pattern_ids: dict[bytes, int] = {}
    patterns: list[np.ndarray] = []
    rows = []
    for i in range(n_q):
        entries = []
        for j in range(n_k):
            tb = token_mask[i * q_tile:(i + 1) * q_tile, j * k_tile:(j + 1) * k_tile]
            if not tb.any():
                continue
            if tb.all():
                entries.append((j, -1))
                continue
            padded = np.zeros((q_tile, k_tile), dtype=bool)
            padded[: tb.shape[0], : tb.shape[1]] = tb
            packed = np.packbits(padded.ravel())
            pid = pattern_ids.setdefault(packed.tobytes(), len(patterns))
            if pid == len(patterns):
                patterns.append(packed)
            entries.append((j, pid))
        rows.append(entries)
    nbytes = -(-q_tile * k_tile // 8)
    pat = np.stack(patterns) if patterns else np.zeros((0, nbytes), dtype=np.uint8)
    return _from_rows(S, q_tile, k_tile, rows, pat)


def _from_rows(S, q_tile, k_tile, rows, patterns) -> BlockMask:
    n_k = -(-S // k_tile)
    row_ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    row_ptr[1:] = np.cumsum([len(r) for r in rows])
    col_dtype = np.uint16 if n_k <= np.iinfo(np.uint16).max else np.uint32
    cols = np.array([c for r in rows for c, _ in r], dtype=col_dtype)
    pids = np.array([p for r in rows for _, p in r], dtype=np.int32)
    for a in (row_ptr, cols, pids, patterns):
        a.setflags(write=False)
    return BlockMask(S, q_tile, k_tile, row_ptr, cols, pids, patterns)


def _candidate_ranges(layout: TokenLayout, rules: InteractionRules, a: int, b: int) -> list[tuple[int, int]]:
    """Key index ranges covering every key any query in ``[a, b)`` may attend."""
    seg = layout.segment[a:b]
    out: list[tuple[int, int]] = []
    text, xr, lr = layout.text_range, layout.x_range, layout.lr_range
    if (seg == SEG_TEXT).any():
        if rules.text_to_text:
            out.append(text)
        if rules.text_to_x:
            out.append(xr)
        if rules.text_to_lr:
            out.append(lr)
    if (seg == SEG_X).any():
        if rules.x_to_text:
            out.append(text)
        if rules.x_to_lr_all:
            out.append(lr)
        wins = np.unique(layout.window_id[a:b][seg == SEG_X])
        wpr = layout.windows_per_row
        n_wr = layout.grid.padded_rows // layout.window.side
        side, r = layout.window.side, layout.ratio
        for w in wins:
            wr, wc = divmod(int(w), wpr)
            if rules.x_local:
                out.append(tuple(layout.window_ranges[w]))
            if rules.x_neighbor_halo and layout.window.halo > 0:
                for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                    nr, nc = wr + dr, wc + dc
                    if 0 <= nr < n_wr and 0 <= nc < wpr:
                        out.append(tuple(layout.window_ranges[nr * wpr + nc]))
            if rules.x_to_lr_region and not rules.x_to_lr_all and layout.anchor is not None:
                m_lo, m_hi = wr * side // r, -((-(wr + 1) * side) // r)
                n_lo, n_hi = wc * side // r, -((-(wc + 1) * side) // r)
                block = layout.lr_perm[m_lo:m_hi, n_lo:n_hi]
                if block.size:
                    out.append((int(block.min()), int(block.max()) + 1))
    if (seg == SEG_LR).any():
        if rules.lr_to_text:
            out.append(text)
        if rules.lr_self and rules.lr_self_scope == "global":
            out.append(lr)
        elif rules.lr_self:
            for w in np.unique(layout.lr_window_id[a:b][seg == SEG_LR]):
                out.append(tuple(layout.lr_window_ranges[w]))
    return [(int(s), int(e)) for s, e in out if e > s]


def build_block_mask(
    layout: TokenLayout,
    rules: InteractionRules,
    q_tile: int = DEFAULT_Q_TILE,
    k_tile: int = DEFAULT_K_TILE,
) -> BlockMask:
    """Tile-granular mask consistent with :func:`build_token_mask`.

    Candidate key tiles per query tile come from segment and window ranges;
    only those are evaluated bit-by-bit, so construction cost tracks the
    number of non-empty tiles rather than ``S^2``.
    """
    if q_tile < 1 or k_tile < 1:
        raise ConfigError("tile sizes must be >= 1")
    S = layout.seq_len
    at = _Attrs(layout)
    n_q, n_k = -(-S // q_tile), -(-S // k_tile)
    pattern_ids: dict[bytes, int] = {}
    patterns: list[np.ndarray] = []
    rows: list[list[tuple[int, int]]] = []
    for i in range(n_q):
        a, b = i * q_tile, min(S, (i + 1) * q_tile)
        cand = np.zeros(n_k, dtype=bool)
        for s, e in _candidate_ranges(layout, rules, a, b):
            cand[s // k_tile:(e - 1) // k_tile + 1] = True
        tiles_j = np.flatnonzero(cand)
        entries: list[tuple[int, int]] = []
        if tiles_j.size:
            ki = (tiles_j[:, None] * k_tile + np.arange(k_tile)[None, :]).ravel()
            valid = ki < S
            bits = np.zeros((b - a, ki.size), dtype=bool)
            bits[:, valid] = _allowed(at, rules, np.arange(a, b), ki[valid])
            bits = bits.reshape(b - a, tiles_j.size, k_tile)
            kw = np.minimum(S - tiles_j * k_tile, k_tile)
            for t, j in enumerate(tiles_j):
                tb = bits[:, t, : kw[t]]
                n_on = int(tb.sum())
                if n_on == 0:
                    continue
                if n_on == tb.size:
                    entries.append((int(j), -1))
                    continue
                padded = np.zeros((q_tile, k_tile), dtype=bool)
                padded[: b - a, : kw[t]] = tb
                packed = np.packbits(padded.ravel())
                key = packed.tobytes()
                pid = pattern_ids.get(key)
                if pid is None:
                    pid = len(patterns)
                    pattern_ids[key] = pid
                    patterns.append(packed)
                entries.append((int(j), pid))
        rows.append(entries)
    nbytes = -(-q_tile * k_tile // 8)
    pat = np.stack(patterns) if patterns else np.zeros((0, nbytes), dtype=np.uint8)
    return _from_rows(S, q_tile, k_tile, rows, pat)


# --------------------------------------------------------------------------
# statistics and verification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TileStats:
    seq_len: int
    q_tile: int
    k_tile: int
    empty: int
    partial: int
    full: int
    allowed_bits: int
    attended_bit_fraction: float
    estimated_ops: int
    head_dim: int
    mean_keys_per_query: float
    max_keys_per_query: int
    mean_log_keys: float
    storage_bytes: int
    dense_bit_bytes: int

    @property
    def non_empty(self) -> int:
        return self.partial + self.full

    @property
    def visited_fraction(self) -> float:
        return self.non_empty / max(1, self.empty + self.non_empty)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["non_empty"] = self.non_empty
        d["visited_fraction"] = self.visited_fraction
        return d


def tile_stats(mask: BlockMask, head_dim: int = 64) -> TileStats:
    """Tile counts, attended fraction, and multiply-accumulate estimate.

    ``estimated_ops`` counts ``2 * head_dim`` multiply-accumulates per allowed
    bit (one for the logit, one for the value product). ``mean_log_keys`` is
    the mean natural log of keys per query, i.e. the information content of a
    uniform attention weight.
    """
    counts = mask.row_counts()
    allowed = int(counts.sum())
    tiles = mask.tiles
    full = int((tiles == TileState.FULL).sum())
    partial = int((tiles == TileState.PARTIAL).sum())
    S = mask.seq_len
    nz = counts[counts > 0]
    return TileStats(
        seq_len=S,
        q_tile=mask.q_tile,
        k_tile=mask.k_tile,
        empty=mask.num_tiles - full - partial,
        partial=partial,
        full=full,
        allowed_bits=allowed,
        attended_bit_fraction=allowed / (S * S) if S else 0.0,
        estimated_ops=allowed * 2 * head_dim,
        head_dim=head_dim,
        mean_keys_per_query=float(counts.mean()) if S else 0.0,
        max_keys_per_query=int(counts.max()) if S else 0,
        mean_log_keys=float(np.log(nz).mean()) if nz.size else 0.0,
        storage_bytes=mask.storage_bytes(),
        dense_bit_bytes=mask.dense_bit_bytes(),
    )


@dataclass(frozen=True)
class ConsistencyReport:
    discrepancies: int
    bad_tiles: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.discrepancies == 0


def verify_block_mask(block: BlockMask, token_mask: np.ndarray) -> ConsistencyReport:
    """Compare every bit implied by the tile states with ``token_mask``."""
    S = block.seq_len
    if token_mask.shape != (S, S):
        raise SizeError(f"token mask shape {token_mask.shape} != ({S}, {S})")
    total = 0
    bad = []
    for i in range(block.n_q):
        for j in range(block.n_k):
            qa, qb, ka, kb = block.tile_extent(i, j)
            n = int((block.tile_bits(i, j) != token_mask[qa:qb, ka:kb]).sum())
            if n:
                total += n
                bad.append((i, j, n))
    return ConsistencyReport(total, bad)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHQII")


def save_block_mask(block: BlockMask, path) -> None:
    """Binary export: header, row-major tile states, packed partial payloads."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MASK_MAGIC, MASK_VERSION, block.seq_len, block.q_tile, block.k_tile))
        f.write(np.ascontiguousarray(block.tiles).tobytes())
        for _, _, payload in block.partial_tiles():
            f.write(np.packbits(payload.ravel()).tobytes())


def load_block_mask(path) -> BlockMask:
    data = Path(path).read_bytes()
    magic, version, S, q_tile, k_tile = _HEADER.unpack_from(data)
    if magic != MASK_MAGIC:
        raise ConfigError(f"{path}: not a block mask file")
    if version != MASK_VERSION:
        raise ConfigError(f"{path}: unsupported mask version {version}")
    off = _HEADER.size
    n_q, n_k = -(-S // q_tile), -(-S // k_tile)
    tiles = np.frombuffer(data, dtype=np.uint8, count=n_q * n_k, offset=off).reshape(n_q, n_k)
    off += n_q * n_k
    nbytes = -(-q_tile * k_tile // 8)
    pattern_ids: dict[bytes, int] = {}
    patterns = []
    rows = []
    for i in range(n_q):
        entries = []
        for j in np.flatnonzero(tiles[i]):
            if tiles[i, j] == TileState.FULL:
                entries.append((int(j), -1))
                continue
            chunk = data[off:off + nbytes]
            if len(chunk) != nbytes:
                raise ConfigError(f"{path}: truncated payload")
            off += nbytes
            pid = pattern_ids.setdefault(chunk, len(patterns))
            if pid == len(patterns):
                patterns.append(np.frombuffer(chunk, dtype=np.uint8).copy())
            entries.append((int(j), pid))
        rows.append(entries)
    pat = np.stack(patterns) if patterns else np.zeros((0, nbytes), dtype=np.uint8)
    return _from_rows(S, q_tile, k_tile, rows, pat)


def write_stats_json(stats: TileStats, path, **extra) -> None:
    doc = stats.to_dict()
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def dense_equivalent_ratio(mask: BlockMask) -> float:
    return mask.dense_bit_bytes() / max(1, mask.storage_bytes())


__all__ = [
    "BlockMask", "ConsistencyReport", "block_mask_from_dense", "InteractionRules", "TileState", "TileStats",
    "build_block_mask", "build_token_mask", "tile_stats", "verify_block_mask",
    "save_block_mask", "load_block_mask", "write_stats_json", "dense_equivalent_ratio",
    "DEFAULT_Q_TILE", "DEFAULT_K_TILE", "ORACLE_CAP",
]
