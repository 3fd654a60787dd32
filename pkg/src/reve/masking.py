"""Spatio-temporal block masking and the random-masking baseline.

A mask is a C x p boolean array with True = visible, False = masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskParams:
    ratio: float = 0.55  # M_r, fraction of tokens masked
    spatial_radius: float = 3.0  # R_s, cm
    temporal_radius: float = 3.0  # R_t, seconds
    dropout_ratio: float = 0.10  # D_r
    dropout_radius: float = 4.0  # R_d, cm
    mode: str = "block"  # "block" | "random"

    def __post_init__(self):
        if not 0 <= self.ratio <= 1:
            raise ValueError("ratio must be in [0, 1]")
        if not 0 <= self.dropout_ratio <= 1:
            raise ValueError("dropout_ratio must be in [0, 1]")
        if min(self.spatial_radius, self.temporal_radius, self.dropout_radius) < 0:
            raise ValueError("radii must be >= 0")
        if self.mode not in ("block", "random"):
            raise ValueError(f"unknown mask mode {self.mode!r}")


@dataclass
class Mask:
    visible: np.ndarray  # C x p bool

    @property
    def B(self) -> np.ndarray:
        """0/1 matrix, 0 = masked."""
        return self.visible.astype(np.int8)

    @property
    def n_masked(self) -> int:
        return int(self.visible.size - self.visible.sum())

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())

    def visible_index(self) -> np.ndarray:
        return np.flatnonzero(self.visible.ravel())

    def masked_index(self) -> np.ndarray:
        return np.flatnonzero(~self.visible.ravel())


def n_masked_target(ratio: float, n_tokens: int) -> int:
    # round half up, so 0.5 * odd counts is deterministic across platforms
    return min(n_tokens, int(math.floor(ratio * n_tokens + 0.5)))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_mask(C: int, p: int, ratio: float, seed=None) -> Mask:
    rng = _rng(seed)
    n = C * p
    if n == 0:
        raise ValueError("cannot mask an empty token grid")
    visible = np.ones(n, dtype=bool)
    visible[rng.permutation(n)[: n_masked_target(ratio, n)]] = False
    return Mask(visible.reshape(C, p))


def block_mask(P: np.ndarray, p: int, params: MaskParams | None = None, seed=None, stride_seconds: float = 0.9) -> Mask:
    """Seed-and-grow block masking with an exact masked count.

    Each round draws a still-visible seed token (c, tau). With probability
    ``dropout_ratio`` every patch of every channel within ``dropout_radius``
    of c is masked; otherwise patches |t - tau| <= round(R_t / stride) of all
    channels within ``spatial_radius`` of c are masked. Rounds repeat until
    the target is reached, then surplus masked tokens are re-exposed
    uniformly at random.
    """
    params = params or MaskParams()
    if params.mode == "random":
        return random_mask(len(P), p, params.ratio, seed)
    rng = _rng(seed)
    P = np.asarray(P, dtype=np.float64)
    C = P.shape[0]
    n = C * p
    if n == 0:
        raise ValueError("cannot mask an empty token grid")
    target = n_masked_target(params.ratio, n)
    dist = np.sqrt(((P[:, None, :] - P[None, :, :]) ** 2).sum(-1))
    near_s = dist <= params.spatial_radius
    near_d = dist <= params.dropout_radius
    rt = int(math.floor(params.temporal_radius / stride_seconds + 0.5))

    visible = np.ones((C, p), dtype=bool)
    masked = 0
    while masked < target:
        flat = np.flatnonzero(visible.ravel())
        c, tau = divmod(int(flat[rng.integers(flat.size)]), p)
        if rng.random() < params.dropout_ratio:
            visible[near_d[c]] = False
        else:
            lo, hi = max(0, tau - rt), min(p, tau + rt + 1)
            visible[np.ix_(near_s[c], np.arange(lo, hi))] = False
        masked = n - int(visible.sum())
    if masked > target:
        flat_masked = np.flatnonzero(~visible.ravel())
        restore = rng.choice(flat_masked, size=masked - target, replace=False)
        visible.ravel()[restore] = True
    return Mask(visible)


def make_mask(P: np.ndarray, p: int, params: MaskParams, seed=None, stride_seconds: float = 0.9) -> Mask:
    if params.mode == "random":
        return random_mask(len(P), p, params.ratio, seed)
    return block_mask(P, p, params, seed, stride_seconds)


@dataclass
class Partition:
    visible_tokens: np.ndarray  # N_vis x D
    visible_index: np.ndarray  # flat indices into C*p (row-major channel then patch)
    masked_index: np.ndarray
    shape: tuple[int, int]

    def visible_coords(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.visible_index, self.shape), axis=1)

    def masked_coords(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.masked_index, self.shape), axis=1)

    def reassemble(self, masked_tokens: np.ndarray | None = None, fill: float = 0.0) -> np.ndarray:
        C, p = self.shape
        D = self.visible_tokens.shape[-1]
        out = np.full((C * p, D), fill, dtype=self.visible_tokens.dtype)
        out[self.visible_index] = self.visible_tokens
        if masked_tokens is not None:
            out[self.masked_index] = masked_tokens
        return out.reshape(C, p, D)


def partition(E: np.ndarray, mask: Mask) -> Partition:
    C, p, D = E.shape
    if mask.visible.shape != (C, p):
        raise ValueError(f"mask shape {mask.visible.shape} does not match tokens {(C, p)}")
    vis = mask.visible_index()
    return Partition(E.reshape(C * p, D)[vis], vis, mask.masked_index(), (C, p))


def nearest_masked_distance(mask: Mask, P: np.ndarray, stride_seconds: float = 0.9, cm_per_second: float = 1.0) -> float:
    """Mean distance from each masked token to its nearest other masked token.

    Tokens live in (x, y, z, time) with time converted to cm at
    ``cm_per_second``; the default makes R_s = 3 cm and R_t = 3 s the same
    length. Smaller means more clustered masking.
    """
    C, p = mask.visible.shape
    cc, tt = np.nonzero(~mask.visible)
    if cc.size < 2:
        return float("nan")
    pts = np.concatenate([np.asarray(P)[cc], (tt * stride_seconds * cm_per_second)[:, None]], axis=1)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).mean())
