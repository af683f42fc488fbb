"""Masked attention: a dense oracle and a tiled online-softmax kernel.

The tiled kernel walks query tiles independently. For each it streams over
key tiles keeping a running row max, denominator and output accumulator.
EMPTY tiles are never visited when skipping is on; FULL tiles skip the
element test; PARTIAL tiles apply their stored bit pattern.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np

from .blockmask import ORACLE_CAP, BlockMask
from .errors import MaskError, SizeError

Precision = Literal["float32", "float64"]
_EMPTY = -2


@dataclass
class AttentionInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scale: Optional[float] = None
    precision: Precision = "float32"

    def __post_init__(self):
        dt = np.dtype(self.precision)
        self.q = np.ascontiguousarray(self.q, dtype=dt)
        self.k = np.ascontiguousarray(self.k, dtype=dt)
        self.v = np.ascontiguousarray(self.v, dtype=dt)
        if self.q.ndim != 2 or self.k.shape != self.q.shape or self.v.shape[0] != self.q.shape[0]:
            raise SizeError(
                f"q/k/v shapes incompatible: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.q.shape[1])
        if not self.scale > 0:
            raise SizeError("scale must be > 0")

    @property
    def seq_len(self) -> int:
        return self.q.shape[0]

    @classmethod
    def random(cls, S: int, d: int, seed: int = 0, precision: Precision = "float32", dv: Optional[int] = None):
        rng = np.random.default_rng(seed)
        return cls(
            rng.standard_normal((S, d)),
            rng.standard_normal((S, d)),
            rng.standard_normal((S, dv or d)),
            precision=precision,
        )


def dense_attention(inputs: AttentionInputs, token_mask: np.ndarray, return_weights: bool = False):
    """Row-wise softmax over allowed logits, times V."""
    q, k, v = inputs.q, inputs.k, inputs.v
    S = q.shape[0]
    if token_mask.shape != (S, S):
        raise SizeError(f"mask shape {token_mask.shape} != ({S}, {S})")
    empty_rows = ~token_mask.any(axis=1)
    if empty_rows.any():
        raise MaskError(f"query row {int(np.flatnonzero(empty_rows)[0])} has no allowed key")
    s = (q @ k.T) * q.dtype.type(inputs.scale)
    s = np.where(token_mask, s, -np.inf)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    out = p @ v
    return (out, p) if return_weights else out


def _row_plan(block: BlockMask, i: int, skip: bool) -> tuple[np.ndarray, np.ndarray]:
    cols, pids = block.row(i)
    if skip:
        return cols.astype(np.int64), pids.astype(np.int64)
    full = np.full(block.n_k, _EMPTY, dtype=np.int64)
    full[cols.astype(np.int64)] = pids
    return np.arange(block.n_k), full


def _query_tile(i, q, k, v, block: BlockMask, scale, skip: bool):
    S = block.seq_len
    qa, qb = i * block.q_tile, min(S, (i + 1) * block.q_tile)
    nq = qb - qa
    qi = q[qa:qb]
    dt = q.dtype
    neg_inf = dt.type(-np.inf)
    m = np.full(nq, neg_inf, dtype=dt)
    den = np.zeros(nq, dtype=dt)
    acc = np.zeros((nq, v.shape[1]), dtype=dt)
    cols, pids = _row_plan(block, i, skip)
    for j, pid in zip(cols, pids):
        ka, kb = j * block.k_tile, min(S, (j + 1) * block.k_tile)
        s = qi @ k[ka:kb].T
        s *= scale
        if pid == _EMPTY:
            s.fill(neg_inf)
        elif pid >= 0:
            s = np.where(block.pattern(int(pid))[:nq, : kb - ka], s, neg_inf)
        m_new = np.maximum(m, s.max(axis=1))
        m_safe = np.where(np.isneginf(m_new), dt.type(0), m_new)
        p = np.exp(s - m_safe[:, None])
        alpha = np.exp(m - m_safe)
        den = alpha * den + p.sum(axis=1)
        acc = alpha[:, None] * acc + p @ v[ka:kb]
        m = m_new
    if (den == 0).any():
        raise MaskError(f"query row {qa + int(np.flatnonzero(den == 0)[0])} has no allowed key")
    return qa, qb, acc / den[:, None], m, den


def tiled_attention(
    inputs: AttentionInputs,
    block: BlockMask,
    skip: bool = True,
    threads: int = 1,
    return_weights: bool = False,
):
    """Online-softmax attention over the non-empty tiles of ``block``.

    With ``skip=False`` every tile is visited and EMPTY tiles are masked to
    ``-inf``; the result is bitwise identical to the skipping path. Query
    tiles are independent, so the output does not depend on ``threads``.
    """
    q, k, v = inputs.q, inputs.k, inputs.v
    S = q.shape[0]
    if block.seq_len != S:
        raise SizeError(f"mask covers {block.seq_len} tokens, inputs have {S}")
    scale = q.dtype.type(inputs.scale)
    out = np.empty((S, v.shape[1]), dtype=q.dtype)
    stats = np.empty((S, 2), dtype=q.dtype)

    def work(i):
        qa, qb, o, m, den = _query_tile(i, q, k, v, block, scale, skip)
        out[qa:qb] = o
        stats[qa:qb, 0] = m
        stats[qa:qb, 1] = den

    if threads > 1 and block.n_q > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, range(block.n_q)))
    else:
        for i in range(block.n_q):
            work(i)
    if not return_weights:
        return out
    return out, _weights(q, k, block, scale, stats)


def _weights(q, k, block: BlockMask, scale, stats) -> np.ndarray:
    """Normalized attention weights implied by the kernel's final row state."""
    S = block.seq_len
    if S > ORACLE_CAP:
        raise SizeError(f"weight export limited to S <= {ORACLE_CAP}")
    w = np.zeros((S, S), dtype=q.dtype)
    for i in range(block.n_q):
        qa, qb = i * block.q_tile, min(S, (i + 1) * block.q_tile)
        m, den = stats[qa:qb, 0], stats[qa:qb, 1]
        cols, pids = block.row(i)
        for j, pid in zip(cols, pids):
            ka, kb = j * block.k_tile, min(S, (j + 1) * block.k_tile)
            s = (q[qa:qb] @ k[ka:kb].T) * scale
            p = np.exp(s - m[:, None]) / den[:, None]
            if pid >= 0:
                p = np.where(block.pattern(int(pid))[: qb - qa, : kb - ka], p, 0)
            w[qa:qb, ka:kb] = p
    return w


def flop_report(block: BlockMask, d_head: int) -> int:
    """Multiply-accumulate estimate ``4 * allowed_bits * d_head`` (QK^T and PV)."""
    return 4 * block.allowed_bits() * d_head


def dense_flops(seq_len: int, d_head: int) -> int:
    return 4 * seq_len * seq_len * d_head


# --------------------------------------------------------------------------
# benchmarking
# --------------------------------------------------------------------------


@dataclass
class BenchResult:
    S: int
    d: int
    q_tile: int
    k_tile: int
    total_tiles: int
    visited_tiles: int
    skipped_tiles: int
    ops_estimate: int
    skip_times: list = field(default_factory=list)
    dense_times: list = field(default_factory=list)

    @property
    def wall_time_skip(self) -> float:
        return statistics.median(self.skip_times)

    @property
    def wall_time_dense_tiled(self) -> Optional[float]:
        return statistics.median(self.dense_times) if self.dense_times else None

    @property
    def speedup(self) -> Optional[float]:
        dense = self.wall_time_dense_tiled
        return None if dense is None else dense / self.wall_time_skip

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            median_skip_s=self.wall_time_skip,
            min_skip_s=min(self.skip_times),
            median_dense_tiled_s=self.wall_time_dense_tiled,
            min_dense_tiled_s=min(self.dense_times) if self.dense_times else None,
            speedup=self.speedup,
        )
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _time(fn, repetitions: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def kernel_bench(
    inputs: AttentionInputs,
    block: BlockMask,
    repetitions: int = 5,
    warmup: int = 1,
    threads: int = 1,
    dense: bool = True,
) -> BenchResult:
    """Median wall time of the skipping kernel and, optionally, the same
    kernel with skipping disabled."""
    if repetitions < 3:
        raise SizeError("repetitions must be >= 3")
    visited = int(np.diff(block.row_ptr).sum())
    res = BenchResult(
        S=block.seq_len,
        d=inputs.q.shape[1],
        q_tile=block.q_tile,
        k_tile=block.k_tile,
        total_tiles=block.num_tiles,
        visited_tiles=visited,
        skipped_tiles=block.num_tiles - visited,
        ops_estimate=flop_report(block, inputs.q.shape[1]),
    )
    res.skip_times = _time(lambda: tiled_attention(inputs, block, True, threads), repetitions, warmup)
    if dense:
        res.dense_times = _time(lambda: tiled_attention(inputs, block, False, threads), repetitions, warmup)
    return res
