"""Rectified-flow training and sampling for the toy model.

Guidance tokens are clean conditioning: only the X grid is noised, and the
loss only looks at X rows.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..blockmask import BlockMask
from ..curve_layout import AnchorSpec, GridSpec, TokenLayout, WindowSpec, build_layout
from ..errors import ConfigError, StateError


# synthetic data

@dataclass(frozen=True)
class ToyDataset:
    """Two smooth 2-channel patterns on a square grid, picked by a label.

    Text ids are ``[0, 1 + mode]``; guidance is the ``ratio``-average-pooled
    sample.
    """

    side: int = 8
    channels: int = 2
    ratio: int = 2
    jitter: float = 0.1

    def __post_init__(self):
        if self.side % self.ratio:
            raise ConfigError(f"side {self.side} not divisible by ratio {self.ratio}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")

    @property
    def text_len(self) -> int:
        return 2

    def modes(self) -> np.ndarray:
        r, c = np.meshgrid(np.arange(self.side), np.arange(self.side), indexing="ij")
        w = 2 * np.pi / self.side
        a = np.stack([np.cos(w * r + w * c * k) for k in range(self.channels)], -1)
        b = np.stack([np.sin(w * c - w * r * k) for k in range(self.channels)], -1)
        return np.stack([a, b])

    def sample(self, rng: np.random.Generator, n: int):
        m = rng.integers(0, 2, n)
        x1 = self.modes()[m] + self.jitter * rng.standard_normal((n, self.side, self.side, self.channels))
        text = np.stack([np.zeros(n, np.int64), 1 + m], 1)
        return x1, text, pool(x1, self.ratio)

    def layout(self, window: int = 4, halo: int = 1) -> TokenLayout:
        grid = GridSpec(self.side, self.side)
        return build_layout(grid, WindowSpec(window, halo), AnchorSpec.for_grid(grid, self.ratio), self.text_len)


def pool(x: np.ndarray, ratio: int) -> np.ndarray:
    """Average-pool the two grid axes of ``(..., rows, cols, c)``."""
    *lead, rows, cols, c = x.shape
    return x.reshape(*lead, rows // ratio, ratio, cols // ratio, ratio, c).mean(axis=(-4, -2))


# objective

@dataclass
class FlowMatchBatch:
    x0: np.ndarray  # (B, rows, cols, c) noise
    x1: np.ndarray  # data
    t: np.ndarray   # (B,)
    text: np.ndarray
    x_lr: Optional[np.ndarray]
    x_t: np.ndarray = field(init=False)
    u_t: np.ndarray = field(init=False)

    def __post_init__(self):
        tt = np.asarray(self.t).reshape(-1, *([1] * (self.x0.ndim - 1)))
        self.x_t = (1 - tt) * self.x0 + tt * self.x1
        self.u_t = self.x1 - self.x0

    @property
    def size(self) -> int:
        return self.x0.shape[0]

    @classmethod
    def draw(cls, data: ToyDataset, rng: np.random.Generator, n: int) -> "FlowMatchBatch":
        x1, text, x_lr = data.sample(rng, n)
        x0 = rng.standard_normal(x1.shape)
        return cls(x0, x1, rng.uniform(0, 1, n), text, x_lr)


def flow_match_loss(model, batch: FlowMatchBatch, layout: TokenLayout, attention="tiled",
                    trainable=("lora", "head"), need_grads=True):
    """Mean over samples and X tokens of the squared velocity error (summed over channels).

    Returns ``(loss, grads)``; grads is ``None`` when ``need_grads`` is off.
    """
    n_x = layout.num_x
    c = batch.x0.shape[-1]
    loss = 0.0
    grads: Optional[dict] = {} if need_grads else None
    for b in range(batch.size):
        x_lr = None if batch.x_lr is None else batch.x_lr[b].reshape(-1, c)
        args = (batch.x_t[b].reshape(n_x, c), float(batch.t[b]), batch.text[b], x_lr, layout)
        target = batch.u_t[b].reshape(n_x, c)
        if need_grads:
            f, cache = model.forward(*args, attention=attention, return_cache=True)
        else:
            f = model.forward(*args, attention=attention)
        err = f - target
        loss += float((err * err).sum()) / (n_x * batch.size)
        if need_grads:
            g = model.backward(err * (2.0 / (n_x * batch.size)), cache, trainable)
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
    return loss, grads


# training

@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 4
    lr: float = 0.02
    seed: int = 0
    attention: str = "tiled"
    trainable: tuple = ("lora", "head")
    clip: Optional[float] = None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (step, loss, grad_norm, wall_ms)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "grad_norm", "wall_ms"])
            for s, loss, gn, ms in self.rows:
                w.writerow([s, repr(loss), repr(gn), f"{ms:.3f}"])


def train(model, data: ToyDataset, layout: TokenLayout, config: TrainConfig,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainLog:
    """Plain gradient descent on freshly drawn batches.

    Step ``k`` draws its batch from ``default_rng((seed, k))`` so runs are
    reproducible regardless of where they are resumed. A NaN loss raises
    :class:`StateError`. ``clip``, off by default, bounds the global
    gradient norm.
    """
    live = model.parameters()
    log = TrainLog()
    for step in range(config.steps):
        t0 = time.perf_counter()
        batch = FlowMatchBatch.draw(data, np.random.default_rng((config.seed, step)), config.batch)
        loss, grads = flow_match_loss(model, batch, layout, config.attention, config.trainable)
        if not math.isfinite(loss):
            raise StateError(f"loss diverged at step {step}: {loss}")
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        step_size = config.lr
        if config.clip is not None and norm > config.clip:
            step_size *= config.clip / norm
        for k, g in grads.items():
            live[k] -= live[k].dtype.type(step_size) * g
        log.rows.append((step, loss, norm, 1e3 * (time.perf_counter() - t0)))
        if on_step is not None:
            on_step(step, loss)
    return log


def eval_loss(model, data: ToyDataset, layout: TokenLayout, n: int = 32, seed: int = 12345, attention="tiled"):
    """Loss on a fixed held-out batch (no gradients)."""
    batch = FlowMatchBatch.draw(data, np.random.default_rng(seed), n)
    return flow_match_loss(model, batch, layout, attention, need_grads=False)[0]


# sampling

def euler_sample(model, steps: int, conditioning, layout: TokenLayout, seed: int = 0, x0=None) -> np.ndarray:
    """Integrate ``dx/dt = f(x, t)`` from noise at ``t=0`` to ``t=1``.

    ``conditioning`` is ``(text_ids, x_lr)``; ``x_lr`` may be ``None`` when
    the layout has no guidance segment. Returns ``(rows, cols, channels)``.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    text, x_lr = conditioning
    g = layout.grid
    c = model.channels
    if x0 is None:
        x0 = np.random.default_rng(seed).standard_normal((g.rows * g.cols, c))
    x = np.asarray(x0, model.dtype).reshape(g.rows * g.cols, c).copy()
    lr = None if x_lr is None else np.asarray(x_lr).reshape(-1, c)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + x.dtype.type(dt) * model.forward(x, k * dt, text, lr, layout)
    return x.reshape(g.rows, g.cols, c)


@dataclass
class LevelReport:
    level: int
    side: int
    seq_len: int
    max_keys_per_query: int
    mean_keys_per_query: float
    attention_working_set_bytes: int
    x_buffer_bytes: int
    mask_bytes: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _x_key_counts(block: BlockMask, layout: TokenLayout) -> np.ndarray:
    return block.row_counts()[slice(*layout.x_range)]


def attention_working_set(block: BlockMask, layout: TokenLayout, head_dim: int, itemsize: int) -> int:
    """Largest live set of a query tile made only of X rows.

    Counts its Q rows, output accumulator and visited K/V tiles. Text queries
    attend globally by design and are left out.
    """
    lo, hi = layout.x_range
    first, last = -(-lo // block.q_tile), hi // block.q_tile
    per_tile = np.diff(block.row_ptr)[first:last]
    visited = per_tile.max() if per_tile.size else 0
    return int(itemsize * (2 * block.q_tile * head_dim + 2 * int(visited) * block.k_tile * head_dim))


def upscale_layout(side: int, ratio: int, window: int, halo: int, text_len: int) -> TokenLayout:
    grid = GridSpec(side, side)
    return build_layout(grid, WindowSpec(min(window, side), min(halo, min(window, side) - 1)),
                        AnchorSpec(side // ratio, side // ratio, ratio), text_len)


def recursive_upscale(model, base_output: np.ndarray, levels: int, text, ratio: int = 4,
                      window: int = 16, halo: int = 2, steps: int = 1, seed: int = 0,
                      on_level: Optional[Callable[[LevelReport], None]] = None):
    """Use each level's output as the guidance of the next, ``ratio``x larger grid.

    Returns ``(final_grid, reports)`` with one :class:`LevelReport` per level.
    """
    if levels < 1:
        raise ConfigError(f"levels must be >= 1, got {levels}")
    x = np.asarray(base_output)
    if x.ndim != 3 or x.shape[0] != x.shape[1]:
        raise ConfigError(f"base output must be a square (side, side, c) grid, got {x.shape}")
    text = np.asarray(text).reshape(-1)
    reports = []
    for lvl in range(1, levels + 1):
        side = x.shape[0] * ratio
        layout = upscale_layout(side, ratio, window, halo, text.size)
        block = model.mask_for(layout)
        counts = _x_key_counts(block, layout)
        itemsize = model.dtype.itemsize
        rep = LevelReport(
            level=lvl, side=side, seq_len=layout.seq_len,
            max_keys_per_query=int(counts.max()), mean_keys_per_query=float(counts.mean()),
            attention_working_set_bytes=attention_working_set(block, layout, model.rope.head_dim, itemsize),
            x_buffer_bytes=int(layout.seq_len * model.width * itemsize),
            mask_bytes=block.storage_bytes(),
        )
        x = euler_sample(model, steps, (text, x), layout, seed=seed + lvl)
        reports.append(rep)
        if on_level is not None:
            on_level(rep)
    return x, reports
