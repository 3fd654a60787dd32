"""Load-aware shuffling: bucket samples by channel count, emit homogeneous batches."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np


@dataclass
class Sample:
    data: np.ndarray  # C x T
    positions: np.ndarray  # C x 3 cm
    label: int | None = None
    source: int = -1  # index of the recording it was cut from

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


@dataclass
class Bucket:
    channel_count: int
    samples: list[Hashable]


@dataclass
class EpochPlan:
    buckets: list[Bucket]  # each already shuffled
    seed: object = None
    tokens_per_sample: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(b.samples) for b in self.buckets)


def bucket_shuffle(index: Sequence[tuple[Hashable, int]], seed=None) -> EpochPlan:
    """Group (sample, C) pairs by C and shuffle each group."""
    if not index:
        raise ValueError("empty sample index")
    rng = np.random.default_rng(seed if not isinstance(seed, tuple) else list(seed))
    groups: dict[int, list] = {}
    for sample, C in index:
        groups.setdefault(int(C), []).append(sample)
    buckets = []
    for C in sorted(groups):
        members = groups[C]
        order = rng.permutation(len(members))
        buckets.append(Bucket(C, [members[i] for i in order]))
    return EpochPlan(buckets, seed=seed)


def make_batches(plan: EpochPlan, batch_size: int) -> list[list[Hashable]]:
    """Chunk each bucket into full batches (ragged tails dropped), then
    interleave buckets by drawing the next bucket with probability
    proportional to its remaining batch count."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if all(len(b.samples) < batch_size for b in plan.buckets):
        raise ValueError(f"batch_size {batch_size} exceeds every bucket size")
    per_bucket = []
    for b in plan.buckets:
        n_full = len(b.samples) // batch_size
        per_bucket.append([b.samples[i * batch_size : (i + 1) * batch_size] for i in range(n_full)])
    seed = plan.seed if not isinstance(plan.seed, tuple) else list(plan.seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0] if seed is not None else None)
    remaining = np.array([len(b) for b in per_bucket], dtype=float)
    cursors = [0] * len(per_bucket)
    out = []
    while remaining.sum() > 0:
        k = int(rng.choice(len(per_bucket), p=remaining / remaining.sum()))
        out.append(per_bucket[k][cursors[k]])
        cursors[k] += 1
        remaining[k] -= 1
    return out


def shard_batches(batches: Sequence[Sequence[Hashable]], tokens: Sequence[int], n_workers: int) -> list[list[int]]:
    """Assign batch indices to logical workers, balancing token counts.

    Greedy longest-first onto the least loaded worker.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    loads = [0] * n_workers
    shards: list[list[int]] = [[] for _ in range(n_workers)]
    for i in sorted(range(len(batches)), key=lambda i: -tokens[i]):
        w = int(np.argmin(loads))
        shards[w].append(i)
        loads[w] += tokens[i]
    return [sorted(s) for s in shards]


def dump_plan_csv(batches: Sequence[Sequence[Hashable]], channel_counts: dict, path: str | Path) -> None:
    """CSV columns: batch_id, channels, sample_ids (space separated)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_id", "channels", "sample_ids"])
        for i, batch in enumerate(batches):
            writer.writerow([i, channel_counts[batch[0]], " ".join(str(s) for s in batch)])
