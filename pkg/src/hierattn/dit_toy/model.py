"""Two-block toy DiT over a ``[text | X | X_lr]`` joint sequence.

Inputs are raster-ordered token grids with ``channels`` values per token.
The model embeds them, reorders into the layout's sequence order, runs the
joint attention blocks and reads the velocity off the X rows.
"""

from __future__ import annotations

from typing import Literal, Optional

import numpy as np

from ..blockmask import BlockMask, InteractionRules, build_block_mask
from ..curve_layout import TokenLayout
from ..errors import ConfigError, SizeError
from ..rope import RopeParams
from .block import BASE_NAMES, MmaBlockParams, mma_backward, mma_forward
from .lora import DEFAULT_RANK

TIME_FEATURES = 16
GROUPS = ("lora", "head", "base")


def time_features(t: float, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1]."""
    freqs = np.exp(np.linspace(0.0, np.log(100.0), TIME_FEATURES // 2))
    a = float(t) * freqs
    return np.concatenate([np.sin(a), np.cos(a)]).astype(dtype)


def _scatter(perm, rng, rows):
    out = np.empty_like(rows)
    out[perm.ravel() - rng[0]] = rows
    return out


def _gather(perm, rng, seq_rows):
    return seq_rows[perm.ravel() - rng[0]]


def _group(name: str) -> str:
    leaf = name.split(".", 2)[2] if name.startswith("blocks.") else name
    if leaf.startswith("lora_"):
        return "lora"
    if leaf in BASE_NAMES:
        return "base"
    return "head"


class ToyDiT:
    """Velocity model ``f(x_t, t, text, x_lr)``.

    ``trainable`` defaults to LoRA mode: the six attention projections of
    every block stay frozen, adapters and all non-attention weights train.
    """

    def __init__(
        self,
        channels: int = 2,
        width: int = 32,
        heads: int = 4,
        depth: int = 2,
        vocab: int = 4,
        rank: int = DEFAULT_RANK,
        seed: int = 0,
        dtype=np.float64,
        rules: Optional[InteractionRules] = None,
        rope_base: float = 10000.0,
    ):
        self.channels, self.width, self.heads, self.depth, self.vocab = channels, width, heads, depth, vocab
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        self.rules = InteractionRules() if rules is None else rules
        self.rope = RopeParams(width // heads, base=rope_base)
        rng = np.random.default_rng(seed)
        dt = self.dtype
        self.text_emb = (0.5 * rng.standard_normal((vocab, width))).astype(dt)
        self.w_in = (rng.standard_normal((channels, width)) / np.sqrt(channels)).astype(dt)
        self.b_in = np.zeros(width, dt)
        self.w_time = (rng.standard_normal((TIME_FEATURES, width)) / np.sqrt(TIME_FEATURES)).astype(dt)
        self.blocks = [MmaBlockParams.init(width, heads, rank, rng=rng, dtype=dt) for _ in range(depth)]
        self.w_out = (0.1 * rng.standard_normal((width, channels)) / np.sqrt(width)).astype(dt)
        self.b_out = np.zeros(channels, dt)
        self._masks: dict = {}

    # parameters

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> live array map (updates write through)."""
        out = {n: getattr(self, n) for n in ("text_emb", "w_in", "b_in", "w_time", "w_out", "b_out")}
        for b, blk in enumerate(self.blocks):
            for n, a in blk.named().items():
                out[f"blocks.{b}.{n}"] = a
        return out

    @staticmethod
    def group_of(name: str) -> str:
        return _group(name)

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        live = self.parameters()
        if set(values) != set(live):
            raise SizeError(f"parameter names differ: {sorted(set(values) ^ set(live))[:4]}")
        for n, a in values.items():
            if live[n].shape != np.shape(a):
                raise SizeError(f"{n}: shape {np.shape(a)} != {live[n].shape}")
            live[n][...] = a

    # masks

    def mask_for(self, layout: TokenLayout) -> BlockMask:
        key = (layout.text_len, layout.grid, layout.window, layout.anchor, self.rules)
        if key not in self._masks:
            small = layout.seq_len <= 1024
            qt, kt = (16, 16) if small else (128, 64)
            self._masks[key] = build_block_mask(layout, self.rules, qt, kt)
        return self._masks[key]

    # forward / backward

    def _embed(self, x_t, t, text, x_lr, layout):
        dt = self.dtype
        x_t = np.asarray(x_t, dt).reshape(layout.num_x, self.channels)
        te = time_features(t, dt) @ self.w_time
        h = np.empty((layout.seq_len, self.width), dt)
        T = slice(*layout.text_range)
        text = np.asarray(text, dtype=np.int64).reshape(-1)
        if text.size != layout.text_len:
            raise SizeError(f"{text.size} text ids for text_len {layout.text_len}")
        h[T] = self.text_emb[text]
        h[slice(*layout.x_range)] = _scatter(layout.x_perm, layout.x_range, x_t @ self.w_in + self.b_in + te)
        if layout.num_lr:
            if x_lr is None:
                raise SizeError("layout has guidance tokens but no x_lr given")
            x_lr = np.asarray(x_lr, dt).reshape(layout.num_lr, self.channels)
            h[slice(*layout.lr_range)] = _scatter(layout.lr_perm, layout.lr_range, x_lr @ self.w_in + self.b_in + te)
        return h, x_t, x_lr, te

    def forward(
        self,
        x_t: np.ndarray,
        t: float,
        text,
        x_lr: Optional[np.ndarray],
        layout: TokenLayout,
        attention: Literal["tiled", "dense"] = "tiled",
        return_cache: bool = False,
    ):
        """Velocity for the X grid, raster order, shape ``(num_x, channels)``."""
        block = self.mask_for(layout)
        h, x_t, x_lr, _ = self._embed(x_t, t, text, x_lr, layout)
        caches = []
        for p in self.blocks:
            if return_cache:
                h, c = mma_forward(h, layout, block, self.rope, p, attention, return_cache=True)
                caches.append(c)
            else:
                h = mma_forward(h, layout, block, self.rope, p, attention)
        hx = _gather(layout.x_perm, layout.x_range, h[slice(*layout.x_range)])
        out = hx @ self.w_out + self.b_out
        if not return_cache:
            return out
        return out, dict(caches=caches, hx=hx, x_t=x_t, x_lr=x_lr, text=np.asarray(text).reshape(-1),
                         t=t, layout=layout)

    def backward(self, grad_out: np.ndarray, cache: dict, trainable=("lora", "head")) -> dict[str, np.ndarray]:
        """Gradients of ``sum(grad_out * forward(...))`` for the selected groups."""
        want = set(trainable)
        layout = cache["layout"]
        g = np.asarray(grad_out, self.dtype)
        grads: dict[str, np.ndarray] = {}
        if "head" in want:
            grads["w_out"] = cache["hx"].T @ g
            grads["b_out"] = g.sum(axis=0)
        dh = np.zeros((layout.seq_len, self.width), self.dtype)
        dh[slice(*layout.x_range)] = _scatter(layout.x_perm, layout.x_range, g @ self.w_out.T)
        for b in reversed(range(self.depth)):
            bg, dh = mma_backward(dh, cache["caches"][b], self.blocks[b], self.rope, trainable=tuple(want))
            for n, v in bg.items():
                grads[f"blocks.{b}.{n}"] = v
        if "head" in want:
            dx = _gather(layout.x_perm, layout.x_range, dh[slice(*layout.x_range)])
            grads["w_in"] = cache["x_t"].T @ dx
            grads["b_in"] = dx.sum(axis=0)
            d_te = dx.sum(axis=0)
            if layout.num_lr:
                dl = _gather(layout.lr_perm, layout.lr_range, dh[slice(*layout.lr_range)])
                grads["w_in"] += cache["x_lr"].T @ dl
                grads["b_in"] += dl.sum(axis=0)
                d_te = d_te + dl.sum(axis=0)
            grads["w_time"] = np.outer(time_features(cache["t"], self.dtype), d_te)
            d_emb = np.zeros_like(self.text_emb)
            np.add.at(d_emb, cache["text"], dh[slice(*layout.text_range)])
            grads["text_emb"] = d_emb
        return grads
