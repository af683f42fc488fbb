"""2D rotary position encoding with scaled guidance positions.

The first half of the head channels encodes the row coordinate, the second
half the column coordinate. Within each half, channels ``(2c, 2c+1)`` form a
pair rotated at frequency ``base ** (-2c / (head_dim / 2))``. Rows whose
position is NaN (text tokens) are passed through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .curve_layout import AnchorSpec, anchor_positions
from .errors import ConfigError, SizeError


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0
    ntk_factor: float = 1.0

    def __post_init__(self):
        if self.head_dim < 4 or self.head_dim % 4:
            raise ConfigError(f"head_dim must be a positive multiple of 4, got {self.head_dim}")
        if self.base <= 1:
            raise ConfigError("base must be > 1")
        if self.ntk_factor < 1:
            raise ConfigError("ntk_factor must be >= 1")

    def frequencies(self) -> np.ndarray:
        """Per-pair angular frequency for one axis (``head_dim // 4`` values)."""
        half = self.head_dim // 2
        c = np.arange(half // 2, dtype=np.float64)
        return self.base ** (-2.0 * c / half)


def angles(positions: np.ndarray, params: RopeParams) -> np.ndarray:
    """``(S, head_dim // 2)`` rotation angles: row-axis pairs, then column-axis pairs."""
    pos = np.asarray(positions, dtype=np.float64)
    f = params.frequencies()
    return np.concatenate([pos[:, :1] * f[None, :], pos[:, 1:2] * f[None, :]], axis=1)


def rotate(vectors: np.ndarray, positions: np.ndarray, params: RopeParams) -> np.ndarray:
    """Rotate each row of ``vectors`` by its 2D position."""
    v = np.asarray(vectors)
    pos = np.asarray(positions, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != params.head_dim:
        raise SizeError(f"vectors must be (S, {params.head_dim}), got {v.shape}")
    if pos.shape != (v.shape[0], 2):
        raise SizeError(f"positions must be ({v.shape[0]}, 2), got {pos.shape}")
    text = np.isnan(pos[:, 0])
    theta = angles(np.where(text[:, None], 0.0, pos), params)
    cos = np.cos(theta).astype(v.dtype, copy=False)
    sin = np.sin(theta).astype(v.dtype, copy=False)
    return _apply(v, cos, sin, text)


def rotate_transpose(vectors: np.ndarray, positions: np.ndarray, params: RopeParams) -> np.ndarray:
    """Inverse rotation (used to back-propagate through :func:`rotate`)."""
    v = np.asarray(vectors)
    pos = np.asarray(positions, dtype=np.float64)
    text = np.isnan(pos[:, 0])
    theta = angles(np.where(text[:, None], 0.0, pos), params)
    cos = np.cos(theta).astype(v.dtype, copy=False)
    sin = np.sin(theta).astype(v.dtype, copy=False)
    return _apply(v, cos, -sin, text)


def _apply(v, cos, sin, text):
    a = v[:, 0::2]
    b = v[:, 1::2]
    out = np.empty_like(v)
    out[:, 0::2] = a * cos - b * sin
    out[:, 1::2] = a * sin + b * cos
    if text.any():
        out[text] = v[text]
    return out


def scaled_rotate(vectors: np.ndarray, anchor: AnchorSpec, params: RopeParams) -> np.ndarray:
    """Rotate guidance rows (raster order) at their scaled positions."""
    if vectors.shape[0] != anchor.num_tokens:
        raise SizeError(f"expected {anchor.num_tokens} guidance rows, got {vectors.shape[0]}")
    return rotate(vectors, anchor_positions(anchor), params)


def ntk_rescale(params: RopeParams, extrapolation: float) -> RopeParams:
    """NTK-aware base adjustment for running past the trained position range."""
    if extrapolation < 1:
        raise ConfigError("extrapolation must be >= 1")
    if extrapolation == 1:
        return params
    d = params.head_dim
    return replace(
        params,
        base=params.base * extrapolation ** (d / (d - 2)),
        ntk_factor=params.ntk_factor * extrapolation,
    )
