"""Low-rank adapters on frozen projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SizeError

DEFAULT_RANK = 16


@dataclass
class LoraAdapter:
    """``delta = scaling * down @ up`` with ``down: d_in x r`` and ``up: r x d_out``."""

    down: np.ndarray
    up: np.ndarray
    scaling: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int = DEFAULT_RANK, rng=None, alpha=None, dtype=np.float64):
        """Random ``down``, zero ``up``: a fresh adapter contributes nothing."""
        rng = np.random.default_rng(0) if rng is None else rng
        alpha = rank if alpha is None else alpha
        down = (rng.standard_normal((d_in, rank)) / np.sqrt(d_in)).astype(dtype)
        up = np.zeros((rank, d_out), dtype=dtype)
        return cls(down, up, alpha / rank)

    def delta(self) -> np.ndarray:
        return self.scaling * (self.down @ self.up)


def lora_project(base: np.ndarray, adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """``x @ (base + scaling * down @ up)``, without forming the sum."""
    if x.shape[-1] != base.shape[0]:
        raise SizeError(f"input width {x.shape[-1]} != base rows {base.shape[0]}")
    if adapter.down.shape[0] != base.shape[0] or adapter.up.shape[1] != base.shape[1]:
        raise SizeError(
            f"adapter {adapter.down.shape}x{adapter.up.shape} does not fit base {base.shape}"
        )
    out = x @ base
    if adapter.up.any():
        out = out + adapter.scaling * ((x @ adapter.down) @ adapter.up)
    return out


def lora_project_backward(base, adapter: LoraAdapter, x, dy, need_base=False):
    """Gradients of :func:`lora_project` w.r.t. ``down``, ``up``, ``x`` (and ``base``)."""
    s = adapter.scaling
    xd = x @ adapter.down
    d_up = s * (xd.T @ dy)
    dyu = dy @ adapter.up.T
    d_down = s * (x.T @ dyu)
    dx = dy @ base.T + s * (dyu @ adapter.down.T)
    d_base = x.T @ dy if need_base else None
    return d_down, d_up, dx, d_base
