"""Masked-autoencoder pretraining: model assembly, losses, training loop.

Token order everywhere is row-major channel-then-patch: token ``c * p + t``
is patch ``t`` of channel ``c``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .datapipe import Sample, bucket_shuffle, make_batches
from .eeg_data import EegRecording
from .masking import MaskParams, make_mask
from .model import (
    INIT_STD,
    Attention,
    ModelConfig,
    NonFiniteActivation,
    Transformer,
    load_checkpoint,
    megatron_init,
    save_checkpoint,
)
from .montage import JitterConfig, jitter_positions
from .optim import OptimConfig, ScheduleConfig, StableAdamW, build_optimizer, set_lr, wsd_lr
from .patching import PatchConfig, unfold
from .posenc import FourierConfig, PositionalEncoding4D


class AttentionPool(nn.Module):
    """Single learned query attending over a token sequence."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Parameter(torch.zeros(dim))
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)

    def forward(self, tokens: torch.Tensor, return_weights: bool = False):
        """(B, N, D) -> (B, D)."""
        B, N, D = tokens.shape
        hd = D // self.heads
        q = self.query.reshape(self.heads, 1, hd)
        k = self.k(tokens).reshape(B, N, self.heads, hd).transpose(1, 2)
        v = self.v(tokens).reshape(B, N, self.heads, hd).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)  # B, H, 1, N
        pooled = self.o((w @ v).reshape(B, D))
        return (pooled, w.squeeze(-2)) if return_weights else pooled


@dataclass
class LossBreakdown:
    primary: float
    secondary: float
    total: float
    secondary_weight: float

    def as_dict(self) -> dict:
        return asdict(self)


def l1_patch_loss(recon: torch.Tensor, truth: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Mean over patches of the per-patch L1 norm (``reduction="sum"``).

    ``reduction="mean"`` averages over samples inside a patch instead.
    """
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(truth.shape)}")
    if recon.numel() == 0:
        raise ValueError("no masked patches to score")
    per_patch = (recon - truth).abs()
    per_patch = per_patch.sum(-1) if reduction == "sum" else per_patch.mean(-1)
    return per_patch.mean()


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(*idx.shape, x.shape[-1]))


class REVE(nn.Module):
    """Encoder, decoder and both reconstruction heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D, Dd, w = cfg.dim, cfg.decoder_dim, cfg.patch_size
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Linear(w, D, bias=False)
            self.posenc = PositionalEncoding4D(
                D, FourierConfig(cfg.n_freq, cfg.s_t, cfg.spatial_box), strict=not cfg.allow_truncation
            )
            self.encoder = Transformer(cfg.depth, D, cfg.heads, cfg.ffn_ratio, cfg.activation, cfg.norm, "encoder")
            self.mask_token = nn.Parameter(torch.zeros(D))
            self.decoder_embed = nn.Identity() if Dd == D else nn.Linear(D, Dd, bias=False)
            self.decoder = Transformer(cfg.decoder_depth, Dd, cfg.decoder_heads, cfg.ffn_ratio, cfg.activation, cfg.norm, "decoder")
            self.decoder_head = nn.Linear(Dd, w, bias=True)
            self.pool = AttentionPool(D, cfg.heads)
            self.secondary_head = nn.Sequential(nn.Linear(D, D, bias=False), nn.GELU(), nn.Linear(D, w, bias=False))
            megatron_init(
                [self.encoder, self.decoder, self.pool],
                extra=[self.mask_token, self.pool.query],
                std=INIT_STD,
            )

    # -- pieces -----------------------------------------------------------

    def embed_patches(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, C, p, w) -> (B, C*p, D)."""
        if patches.shape[-1] != self.cfg.patch_size:
            raise ValueError(f"patch length {patches.shape[-1]} != {self.cfg.patch_size}")
        return self.patch_embed(patches).flatten(-3, -2)

    def positional(self, positions: torch.Tensor, p: int) -> torch.Tensor:
        return self.posenc(positions, p)

    def encode_visible(self, E: torch.Tensor, penc: torch.Tensor, visible_index: torch.Tensor):
        if visible_index.shape[-1] == 0:
            raise ValueError("no visible tokens to encode")
        x = _gather(E + penc, visible_index)
        return self.encoder(x)

    def assemble_decoder_input(self, F_vis, penc, visible_index, masked_index) -> torch.Tensor:
        B, N, D = penc.shape
        if visible_index.shape[-1] + masked_index.shape[-1] != N:
            raise ValueError("visible and masked index sets do not tile the token grid")
        slots = self.mask_token.expand(B, N, D)
        slots = torch.scatter(slots, 1, visible_index.unsqueeze(-1).expand(*visible_index.shape, D), F_vis)
        return slots + penc

    def decode_reconstruct(self, decoder_input: torch.Tensor, masked_index: torch.Tensor) -> torch.Tensor:
        h, _ = self.decoder(self.decoder_embed(decoder_input))
        return self.decoder_head(_gather(h, masked_index))

    def attention_pool(self, record: Sequence[torch.Tensor]) -> torch.Tensor:
        if not record:
            raise ValueError("attention pooling needs at least one encoder layer")
        return self.pool(torch.cat(list(record), dim=1))

    def secondary_reconstruct(self, pooled: torch.Tensor, penc_masked: torch.Tensor) -> torch.Tensor:
        x = pooled.unsqueeze(1).expand_as(penc_masked) + penc_masked
        return self.secondary_head(x)

    # -- full passes ------------------------------------------------------

    def pretrain_losses(
        self,
        patches: torch.Tensor,
        positions: torch.Tensor,
        visible_index: torch.Tensor,
        masked_index: torch.Tensor,
        secondary_weight: float = 0.1,
        reduction: str = "sum",
    ) -> dict[str, torch.Tensor]:
        B, C, p, w = patches.shape
        E = self.embed_patches(patches)
        penc = self.positional(positions, p)
        F_vis, record = self.encode_visible(E, penc, visible_index)
        truth = _gather(patches.reshape(B, C * p, w), masked_index)
        recon = self.decode_reconstruct(self.assemble_decoder_input(F_vis, penc, visible_index, masked_index), masked_index)
        primary = l1_patch_loss(recon, truth, reduction)
        if secondary_weight != 0:
            sec = self.secondary_reconstruct(self.attention_pool(record), _gather(penc, masked_index))
            secondary = l1_patch_loss(sec, truth, reduction)
        else:
            secondary = torch.zeros((), dtype=primary.dtype)
        return {
            "primary": primary,
            "secondary": secondary,
            "total": primary + secondary_weight * secondary,
            "recon": recon,
            "truth": truth,
            "encoded": F_vis,
        }

    def encode_all(self, patches: torch.Tensor, positions: torch.Tensor):
        """Unmasked encoder pass: (B, C*p, D) final tokens and per-layer record."""
        p = patches.shape[-2]
        return self.encoder(self.embed_patches(patches) + self.positional(positions, p))

    @torch.no_grad()
    def extract(self, patches: torch.Tensor, positions: torch.Tensor, pooled: bool = True):
        """Deterministic embeddings: (B, C, p, D) tokens and optionally (B, D).

        Channels are run in a canonical order (sorted by electrode
        coordinates) so the result does not depend on how the channels were
        listed, down to the last bit.
        """
        B, C, p, _ = patches.shape
        order = canonical_channel_order(positions)
        gather = order[:, :, None]
        final, record = self.encode_all(
            torch.take_along_dim(patches, order[:, :, None, None], 1),
            torch.take_along_dim(positions, gather, 1),
        )
        tokens = torch.empty_like(final.reshape(B, C, p, -1))
        tokens.scatter_(1, order[:, :, None, None].expand_as(tokens), final.reshape(B, C, p, -1))
        if not pooled:
            return tokens, None
        pool = self.attention_pool(record) if record else final.mean(1)
        return tokens, pool


def canonical_channel_order(positions: torch.Tensor) -> torch.Tensor:
    """(B, C) permutation sorting channels by (x, y, z); ties keep input order."""
    order = torch.arange(positions.shape[1]).expand(positions.shape[:2]).clone()
    for axis in (2, 1, 0):  # successive stable sorts = lexicographic on x, y, z
        key = torch.take_along_dim(positions[..., axis], order, 1)
        order = torch.take_along_dim(order, torch.sort(key, dim=1, stable=True).indices, 1)
    return order


def extract_embeddings(model: REVE, rec: EegRecording, patch: PatchConfig | None = None, pooled: bool = True):
    """Per-token states (C, p, D) and pooled vector (D,) for one recording.

    No masking and no positional jitter.
    """
    patch = patch or PatchConfig(w=model.cfg.patch_size, o=model.cfg.patch_size // 10)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(unfold(np.asarray(rec.data), patch), dtype=dtype).unsqueeze(0)
    pos = torch.as_tensor(rec.channel_positions(), dtype=dtype).unsqueeze(0)
    model.eval()
    tokens, pool = model.extract(x, pos, pooled=pooled)
    return tokens[0], (pool[0] if pool is not None else None)


# --------------------------------------------------------------------------
# training


@dataclass
class PretrainConfig:
    batch_size: int = 32
    steps: int = 500
    secondary_weight: float = 0.1
    loss_reduction: str = "sum"
    window_seconds: float = 10.0
    sample_rate: float = 200.0
    patch_w: int = 200
    patch_o: int = 20
    jitter_sigma: float = 0.25
    seed: int = 0
    cyclic: bool = False
    mask: MaskParams = field(default_factory=MaskParams)
    optim: OptimConfig = field(default_factory=OptimConfig)

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(self.patch_w, self.patch_o)

    @property
    def stride_seconds(self) -> float:
        return (self.patch_w - self.patch_o) / self.sample_rate


class NonFiniteLoss(FloatingPointError):
    pass


def make_samples(recs: Sequence[EegRecording], window_seconds: float, rate: float) -> list[Sample]:
    """Cut recordings into non-overlapping fixed-length windows."""
    T = int(round(window_seconds * rate))
    out = []
    for r_i, rec in enumerate(recs):
        if rec.sample_rate != rate:
            raise ValueError(f"recording {r_i} is at {rec.sample_rate} Hz, expected {rate}")
        P = rec.channel_positions()
        for start in range(0, rec.n_samples - T + 1, T):
            out.append(Sample(np.asarray(rec.data[:, start : start + T], dtype=np.float32), P, rec.label, r_i))
    if not out:
        raise ValueError(f"no recording is at least {window_seconds} s long")
    return out


@dataclass
class Batch:
    patches: torch.Tensor  # B, C, p, w
    positions: torch.Tensor  # B, C, 3 (jittered)
    visible_index: torch.Tensor  # B, N_vis
    masked_index: torch.Tensor  # B, N_m


def build_batch(samples: Sequence[Sample], cfg: PretrainConfig, rng: np.random.Generator, dtype=torch.float32) -> Batch:
    patches = np.stack([unfold(s.data, cfg.patch) for s in samples])
    B, C, p, _ = patches.shape
    jcfg = JitterConfig(cfg.jitter_sigma)
    positions = np.stack([jitter_positions(s.positions, jcfg, rng) for s in samples])
    vis, msk = [], []
    for s in samples:
        m = make_mask(s.positions, p, cfg.mask, rng, cfg.stride_seconds)
        vis.append(m.visible_index())
        msk.append(m.masked_index())
    return Batch(
        torch.as_tensor(patches, dtype=dtype),
        torch.as_tensor(positions, dtype=dtype),
        torch.as_tensor(np.stack(vis), dtype=torch.long),
        torch.as_tensor(np.stack(msk), dtype=torch.long),
    )


def train_step(model: REVE, optimizer: torch.optim.Optimizer, batch: Batch, secondary_weight: float = 0.1, reduction: str = "sum"):
    """One forward/backward/update; returns (LossBreakdown, grad norm)."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model.pretrain_losses(batch.patches, batch.positions, batch.visible_index, batch.masked_index, secondary_weight, reduction)
    total = out["total"]
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss: primary={out['primary'].item()} secondary={out['secondary'].item()}")
    total.backward()
    grads = [p.grad.detach().flatten() for p in model.parameters() if p.grad is not None]
    grad_norm = torch.cat(grads).norm().item() if grads else 0.0
    optimizer.step()
    return (
        LossBreakdown(out["primary"].item(), out["secondary"].item(), total.item(), secondary_weight),
        grad_norm,
    )


class Pretrainer:
    """Drives pretraining over a list of samples with a deterministic plan.

    Every source of randomness is derived from (seed, epoch) for data order
    and (seed, step) for masks and jitter, so a run resumed from a
    checkpoint continues bit-exactly.
    """

    def __init__(self, model: REVE, samples: Sequence[Sample], cfg: PretrainConfig, log_path: str | Path | None = None):
        self.model = model
        self.samples = list(samples)
        self.cfg = cfg
        self.optimizer: StableAdamW = build_optimizer(model, cfg.optim)
        self.step = 0
        self.history: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        self._epoch_batches: dict[int, list[list[int]]] = {}
        self.steps_per_epoch = len(self._batches(0))
        if cfg.cyclic:
            self.schedule = ScheduleConfig(max(2, self.steps_per_epoch), max(1, math.ceil(cfg.steps / self.steps_per_epoch)), cyclic=True)
        else:
            self.schedule = ScheduleConfig(max(2, cfg.steps), 1)

    def _batches(self, epoch: int) -> list[list[int]]:
        if epoch not in self._epoch_batches:
            index = [(i, s.n_channels) for i, s in enumerate(self.samples)]
            plan = bucket_shuffle(index, seed=(self.cfg.seed, epoch))
            self._epoch_batches = {epoch: make_batches(plan, self.cfg.batch_size)}
        return self._epoch_batches[epoch]

    def next_batch(self) -> Batch:
        epoch, k = divmod(self.step, self.steps_per_epoch)
        ids = self._batches(epoch)[k]
        rng = np.random.default_rng([self.cfg.seed, self.step, 0x5EED])
        dtype = next(self.model.parameters()).dtype
        return build_batch([self.samples[i] for i in ids], self.cfg, rng, dtype)

    def run(self, n_steps: int | None = None) -> list[dict]:
        end = self.cfg.steps if n_steps is None else min(self.cfg.steps, self.step + n_steps)
        while self.step < end:
            t0 = time.perf_counter()
            lr = wsd_lr(min(self.step + 1, self.schedule.total_steps), self.schedule, self.cfg.optim.lr_peak)
            set_lr(self.optimizer, lr)
            batch = self.next_batch()
            losses, gnorm = train_step(self.model, self.optimizer, batch, self.cfg.secondary_weight, self.cfg.loss_reduction)
            entry = {"step": self.step, "lr": lr, **losses.as_dict(), "grad_norm": gnorm, "wall_time": time.perf_counter() - t0}
            self.history.append(entry)
            if self.log_path:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry) + "\n")
            self.step += 1
        return self.history

    # -- checkpointing ---------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = dict(self.model.state_dict())
        for name, p in self.model.named_parameters():
            st = self.optimizer.state.get(p)
            if st:
                tensors[f"optim/{name}/exp_avg"] = st["exp_avg"]
                tensors[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
                tensors[f"optim/{name}/step"] = st["step"].to(torch.int64)
        return tensors

    def save(self, directory: str | Path, extra_meta: dict | None = None) -> Path:
        dtype = "<f8" if next(self.model.parameters()).dtype == torch.float64 else "<f4"
        meta = {"kind": "pretrain", "model_config": self.model.cfg.to_dict(), "seed": self.cfg.seed, "step": self.step}
        meta.update(extra_meta or {})
        return save_checkpoint(directory, self.state_tensors(), meta, dtype=dtype)

    def load(self, directory: str | Path) -> None:
        tensors, meta = load_checkpoint(directory)
        dtype = next(self.model.parameters()).dtype
        model_state = {k: v.to(dtype) for k, v in tensors.items() if not k.startswith("optim/")}
        self.model.load_state_dict(model_state)
        for name, p in self.model.named_parameters():
            key = f"optim/{name}/exp_avg"
            if key in tensors:
                self.optimizer.state[p] = {
                    "step": tensors[f"optim/{name}/step"].to(torch.float32),
                    "exp_avg": tensors[key].to(dtype).clone(),
                    "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].to(dtype).clone(),
                }
        self.step = int(meta["step"])


def load_model(directory: str | Path, dtype=torch.float32) -> REVE:
    tensors, meta = load_checkpoint(directory)
    model = REVE(ModelConfig.from_dict(meta["model_config"])).to(dtype)
    model.load_state_dict({k: v.to(dtype) for k, v in tensors.items() if not k.startswith("optim/")})
    return model
