"""Overlapping per-channel windows ("patches")."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eeg_data import EegRecording


@dataclass(frozen=True)
class PatchConfig:
    w: int = 200  # samples; 1 s at 200 Hz
    o: int = 20  # samples; 0.1 s

    def __post_init__(self):
        if not 0 <= self.o < self.w:
            raise ValueError(f"need 0 <= overlap < window, got w={self.w}, o={self.o}")

    @property
    def stride(self) -> int:
        return self.w - self.o


class TooShortError(ValueError):
    pass


def patch_count(T: int, w: int, o: int) -> int:
    """Number of complete windows of length ``w`` at stride ``w - o``.

    This is floor((T - w) / (w - o)) + 1. The ceiling-plus-indicator closed
    form ceil((T - w) / s) + [(T - w) mod s != 0] does not count complete
    windows: it gives 10 for 10 s at 200 Hz with w=200, o=20 (11 fit) and
    12 for T=2010 (still 11 fit).
    """
    if not 0 <= o < w:
        raise ValueError(f"need 0 <= o < w, got w={w}, o={o}")
    if T < w:
        raise TooShortError(f"T={T} shorter than one window (w={w}): zero patches")
    return (T - w) // (w - o) + 1


@dataclass
class PatchGrid:
    patches: np.ndarray  # C x p x w
    config: PatchConfig
    source_T: int

    @property
    def n_channels(self) -> int:
        return self.patches.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


def unfold(x: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """(..., T) -> (..., p, w) view-free copy; trailing incomplete window dropped."""
    p = patch_count(x.shape[-1], cfg.w, cfg.o)
    win = np.lib.stride_tricks.sliding_window_view(x, cfg.w, axis=-1)
    return np.ascontiguousarray(win[..., : (p - 1) * cfg.stride + 1 : cfg.stride, :])


def segment(rec: EegRecording | np.ndarray, cfg: PatchConfig | None = None) -> PatchGrid:
    cfg = cfg or PatchConfig()
    data = rec.data if isinstance(rec, EegRecording) else np.asarray(rec)
    return PatchGrid(unfold(data, cfg), cfg, data.shape[-1])


def overlap_average(grid: PatchGrid) -> np.ndarray:
    """Fold patches back to C x T_covered, averaging samples covered twice."""
    C, p, w = grid.patches.shape
    s = grid.config.stride
    T = (p - 1) * s + w
    acc = np.zeros((C, T), dtype=np.float64)
    cnt = np.zeros(T)
    for k in range(p):
        acc[:, k * s : k * s + w] += grid.patches[:, k]
        cnt[k * s : k * s + w] += 1
    return acc / cnt
