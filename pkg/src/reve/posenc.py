"""4D spatio-temporal positional encoding.

Token (channel c, patch t) sits at (x, y, z, t). Spatial coordinates are
mapped affinely from a cm box to [0, 1]; time is ``t * s_t`` for t = 1..p.
The Fourier part takes every combination (i, j, k, l) of integer frequencies
in 0..n_freq-1 per axis, flattened with x fastest, and emits cos then sin.
A learned branch Linear(4 -> D) -> GELU -> LayerNorm is added and the sum
is layer-normalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class FourierConfig:
    n_freq: int = 4
    s_t: float = 1.0 / 32
    spatial_box: float = 15.0  # cm, half-width of the normalization box

    def __post_init__(self):
        if self.n_freq < 1:
            raise ValueError("n_freq must be >= 1")
        if self.spatial_box <= 0:
            raise ValueError("spatial_box must be > 0")

    @property
    def width(self) -> int:
        return 2 * self.n_freq**4


def extend_positions(P, p: int, cfg: FourierConfig | None = None):
    """(..., C, 3) cm -> (..., C, p, 4) normalized coordinates.

    Works on numpy arrays and torch tensors alike.
    """
    cfg = cfg or FourierConfig()
    is_torch = isinstance(P, torch.Tensor)
    Pt = P if is_torch else torch.as_tensor(np.asarray(P, dtype=np.float64))
    if not torch.all(torch.isfinite(Pt)):
        raise ValueError("positions must be finite")
    if torch.any(Pt.abs() > 2 * cfg.spatial_box):
        raise ValueError(
            f"positions exceed 2x the {cfg.spatial_box} cm box; are they in meters or mm instead of cm?"
        )
    spatial = (Pt + cfg.spatial_box) / (2 * cfg.spatial_box)
    t = torch.arange(1, p + 1, dtype=Pt.dtype, device=Pt.device) * cfg.s_t
    shape = spatial.shape[:-1] + (p,)
    out = torch.cat(
        [spatial.unsqueeze(-2).expand(*shape, 3), t.expand(*shape).unsqueeze(-1)],
        dim=-1,
    )
    return out if is_torch else out.numpy()


def frequency_grid(n_freq: int) -> np.ndarray:
    """(n_freq**4, 4) integer frequencies; row m = (i, j, k, l), m = i + j n + k n^2 + l n^3."""
    m = np.arange(n_freq**4)
    return np.stack([(m // n_freq**d) % n_freq for d in range(4)], axis=1)


def fourier_encode(ext, n_freq: int, width: int | None = None):
    """(..., 4) -> (..., 2 n_freq^4) = [cos(theta_m)..., sin(theta_m)...].

    ``width < 2 n_freq^4`` keeps the first ``width/2`` frequency combinations
    of each block.
    """
    is_torch = isinstance(ext, torch.Tensor)
    x = ext if is_torch else torch.as_tensor(np.asarray(ext, dtype=np.float64))
    freqs = torch.as_tensor(frequency_grid(n_freq), dtype=x.dtype, device=x.device)
    full = 2 * n_freq**4
    width = full if width is None else width
    if width > full or width % 2:
        raise ValueError(f"width {width} must be even and <= {full}")
    freqs = freqs[: width // 2]
    theta = 2 * math.pi * (x @ freqs.T)
    out = torch.cat([torch.cos(theta), torch.sin(theta)], dim=-1)
    return out if is_torch else out.numpy()


class PositionalEncoding4D(nn.Module):
    """Fourier features + learned linear branch, combined under LayerNorm."""

    def __init__(self, dim: int, cfg: FourierConfig | None = None, strict: bool = True):
        super().__init__()
        self.cfg = cfg or FourierConfig()
        if strict and self.cfg.width != dim:
            raise ValueError(f"2*n_freq^4 = {self.cfg.width} must equal dim = {dim}")
        if self.cfg.width < dim or dim % 2:
            raise ValueError(f"2*n_freq^4 = {self.cfg.width} cannot cover dim = {dim}")
        self.dim = dim
        self.linear = nn.Linear(4, dim, bias=False)
        self.branch_norm = nn.LayerNorm(dim)
        self.norm = nn.LayerNorm(dim)

    def branch(self, ext: torch.Tensor) -> torch.Tensor:
        return self.branch_norm(F.gelu(self.linear(ext)))

    def combine(self, fourier: torch.Tensor, ext: torch.Tensor) -> torch.Tensor:
        if fourier.shape[-1] != self.dim:
            raise ValueError(f"fourier width {fourier.shape[-1]} != dim {self.dim}")
        return self.norm(fourier + self.branch(ext))

    def forward(self, positions: torch.Tensor, p: int) -> torch.Tensor:
        """(..., C, 3) cm -> (..., C*p, D), row-major channel then patch."""
        ext = extend_positions(positions, p, self.cfg).to(self.linear.weight.dtype)
        fourier = fourier_encode(ext, self.cfg.n_freq, self.dim)
        enc = self.combine(fourier, ext)
        return enc.flatten(-3, -2)
