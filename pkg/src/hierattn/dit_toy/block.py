"""Joint multi-modal attention block over ``[text | X | X_lr]``.

Text rows use their own projections, X rows the base image projections, and
guidance rows the base image projections plus a LoRA adapter. Attention runs
under the layout's block mask; the block adds the attention output and a
small ReLU feed-forward residually.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Literal, Optional

import numpy as np

from ..attention import AttentionInputs, dense_attention, tiled_attention
from ..blockmask import BlockMask
from ..curve_layout import TokenLayout
from ..errors import SizeError, StateError
from ..rope import RopeParams, rotate, rotate_transpose
from .lora import DEFAULT_RANK, LoraAdapter, lora_project, lora_project_backward

BASE_NAMES = ("wq_t", "wk_t", "wv_t", "wq", "wk", "wv")
LORA_NAMES = ("lora_q", "lora_k", "lora_v")
HEAD_NAMES = ("wo", "ff_w1", "ff_b1", "ff_w2", "ff_b2")


@dataclass
class MmaBlockParams:
    wq_t: np.ndarray
    wk_t: np.ndarray
    wv_t: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    lora_q: LoraAdapter
    lora_k: LoraAdapter
    lora_v: LoraAdapter
    ff_w1: np.ndarray
    ff_b1: np.ndarray
    ff_w2: np.ndarray
    ff_b2: np.ndarray
    heads: int = 4

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in BASE_NAMES + ("wo",):
            if getattr(self, name).shape != (d, d):
                raise SizeError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")
        if d % self.heads or (d // self.heads) % 4:
            raise SizeError(f"width {d} must split into {self.heads} heads of a multiple of 4")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @classmethod
    def init(cls, d: int, heads: int = 4, rank: int = DEFAULT_RANK, ff_mult: int = 2, rng=None, dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng

        def w(a, b, gain=1.0):
            return (gain * rng.standard_normal((a, b)) / np.sqrt(a)).astype(dtype)

        base = {n: w(d, d) for n in BASE_NAMES}
        return cls(
            **base,
            wo=w(d, d, 0.5),
            lora_q=LoraAdapter.init(d, d, rank, rng, dtype=dtype),
            lora_k=LoraAdapter.init(d, d, rank, rng, dtype=dtype),
            lora_v=LoraAdapter.init(d, d, rank, rng, dtype=dtype),
            ff_w1=w(d, ff_mult * d),
            ff_b1=np.zeros(ff_mult * d, dtype=dtype),
            ff_w2=w(ff_mult * d, d, 0.5),
            ff_b2=np.zeros(d, dtype=dtype),
            heads=heads,
        )

    def named(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every parameter (adapters as ``lora_q.down`` etc.)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, LoraAdapter):
                out[f"{f.name}.down"] = v.down
                out[f"{f.name}.up"] = v.up
            elif isinstance(v, np.ndarray):
                out[f.name] = v
        return out


@dataclass
class BlockCache:
    h: np.ndarray
    q_rot: np.ndarray
    k_rot: np.ndarray
    v: np.ndarray
    o: np.ndarray
    h1: np.ndarray
    z: np.ndarray
    r: np.ndarray
    token_mask: np.ndarray
    positions: np.ndarray
    segs: tuple
    scale: float
    extra: dict = field(default_factory=dict)


def _segments(layout: TokenLayout):
    return slice(*layout.text_range), slice(*layout.x_range), slice(*layout.lr_range)


def _project(h, segs, w_t, w, adapter):
    T, X, L = segs
    out = np.empty((h.shape[0], w.shape[1]), dtype=h.dtype)
    out[T] = h[T] @ w_t
    out[X] = h[X] @ w
    out[L] = lora_project(w, adapter, h[L])
    return out


def mma_forward(
    sequence: np.ndarray,
    layout: TokenLayout,
    block: BlockMask,
    rope: RopeParams,
    params: MmaBlockParams,
    attention: Literal["tiled", "dense"] = "tiled",
    return_cache: bool = False,
    threads: int = 1,
):
    """One joint attention block; returns the updated sequence."""
    h = np.asarray(sequence)
    S, d = h.shape
    if S != layout.seq_len or block.seq_len != S:
        raise SizeError(f"sequence {S}, layout {layout.seq_len}, mask {block.seq_len} disagree")
    if d != params.width:
        raise SizeError(f"sequence width {d} != block width {params.width}")
    if rope.head_dim != params.head_dim:
        raise SizeError(f"rope head_dim {rope.head_dim} != {params.head_dim}")
    segs = _segments(layout)
    q = _project(h, segs, params.wq_t, params.wq, params.lora_q)
    k = _project(h, segs, params.wk_t, params.wk, params.lora_k)
    v = _project(h, segs, params.wv_t, params.wv, params.lora_v)
    dh, nh = params.head_dim, params.heads
    pos = layout.positions
    precision = "float64" if h.dtype == np.float64 else "float32"
    q_rot = np.empty_like(q)
    k_rot = np.empty_like(k)
    o = np.empty_like(v)
    token_mask = block.expand() if (attention == "dense" or return_cache) else None
    for hh in range(nh):
        c = slice(hh * dh, (hh + 1) * dh)
        q_rot[:, c] = rotate(q[:, c], pos, rope)
        k_rot[:, c] = rotate(k[:, c], pos, rope)
        inp = AttentionInputs(q_rot[:, c], k_rot[:, c], v[:, c], precision=precision)
        if attention == "dense":
            o[:, c] = dense_attention(inp, token_mask)
        else:
            o[:, c] = tiled_attention(inp, block, threads=threads)
    h1 = h + o @ params.wo
    z = h1 @ params.ff_w1 + params.ff_b1
    r = np.maximum(z, 0)
    out = h1 + r @ params.ff_w2 + params.ff_b2
    if not return_cache:
        return out
    scale = 1.0 / np.sqrt(dh)
    return out, BlockCache(h, q_rot, k_rot, v, o, h1, z, r, token_mask, pos, segs, scale)


def _softmax_probs(q, k, mask, scale):
    s = (q @ k.T) * q.dtype.type(scale)
    s = np.where(mask, s, -np.inf)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p


def mma_backward(
    grad_out: np.ndarray,
    cache: Optional[BlockCache],
    params: MmaBlockParams,
    rope: RopeParams,
    trainable=("lora",),
):
    """Exact gradients of :func:`mma_forward`.

    ``trainable`` selects parameter groups: ``"lora"`` (adapter factors),
    ``"head"`` (output projection and feed-forward) and ``"base"`` (the
    six frozen projections). Returns ``(grads, grad_input)``.
    """
    if cache is None:
        raise StateError("mma_backward needs the cache from mma_forward(return_cache=True)")
    want = set(trainable)
    grads: dict[str, np.ndarray] = {}
    c = cache
    T, X, L = c.segs
    g = np.asarray(grad_out, dtype=c.h.dtype)

    # feed-forward residual
    dh1 = g.copy()
    if "head" in want:
        grads["ff_w2"] = c.r.T @ g
        grads["ff_b2"] = g.sum(axis=0)
    dz = (g @ params.ff_w2.T) * (c.z > 0)
    if "head" in want:
        grads["ff_w1"] = c.h1.T @ dz
        grads["ff_b1"] = dz.sum(axis=0)
    dh1 += dz @ params.ff_w1.T

    # attention residual
    dh = dh1.copy()
    if "head" in want:
        grads["wo"] = c.o.T @ dh1
    do = dh1 @ params.wo.T

    dq = np.empty_like(c.q_rot)
    dk = np.empty_like(c.k_rot)
    dv = np.empty_like(c.v)
    dhd = params.head_dim
    for hh in range(params.heads):
        cs = slice(hh * dhd, (hh + 1) * dhd)
        qh, kh, vh = c.q_rot[:, cs], c.k_rot[:, cs], c.v[:, cs]
        p = _softmax_probs(qh, kh, c.token_mask, c.scale)
        doh = do[:, cs]
        dv[:, cs] = p.T @ doh
        dp = doh @ vh.T
        ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        ds *= c.scale
        dq[:, cs] = rotate_transpose(ds @ kh, c.positions, rope)
        dk[:, cs] = rotate_transpose(ds.T @ qh, c.positions, rope)

    h = c.h
    for name, dy, w_t, w, ad in (
        ("q", dq, params.wq_t, params.wq, params.lora_q),
        ("k", dk, params.wk_t, params.wk, params.lora_k),
        ("v", dv, params.wv_t, params.wv, params.lora_v),
    ):
        dh[T] += dy[T] @ w_t.T
        dh[X] += dy[X] @ w.T
        d_down, d_up, dx_l, d_base_l = lora_project_backward(w, ad, h[L], dy[L], need_base="base" in want)
        dh[L] += dx_l
        if "lora" in want:
            grads[f"lora_{name}.down"] = d_down
            grads[f"lora_{name}.up"] = d_up
        if "base" in want:
            grads[f"w{name}_t"] = h[T].T @ dy[T]
            grads[f"w{name}"] = h[X].T @ dy[X] + d_base_l
    return grads, dh
