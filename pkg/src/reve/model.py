"""Bias-free pre-norm transformer (RMSNorm, GEGLU) and named size configs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violated invariant."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class NonFiniteActivation(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    depth: int = 2
    heads: int = 2
    dim: int = 32
    ffn_ratio: float = 8 / 3
    decoder_depth: int = 2
    decoder_dim: int | None = None  # defaults to dim
    decoder_heads: int | None = None  # defaults to heads
    n_freq: int = 2
    activation: str = "geglu"  # "geglu" | "gelu"
    norm: str = "rmsnorm"  # "rmsnorm" | "layernorm"
    patch_size: int = 200
    s_t: float = 1.0 / 32
    spatial_box: float = 15.0
    allow_truncation: bool = False  # permit 2*n_freq^4 > dim

    def __post_init__(self):
        if self.decoder_dim is None:
            self.decoder_dim = self.dim
        if self.decoder_heads is None:
            self.decoder_heads = self.heads

    def problems(self) -> list[str]:
        errs = []
        if self.depth < 0 or self.decoder_depth < 0:
            errs.append("depth and decoder_depth must be >= 0")
        if self.heads < 1 or self.dim % self.heads:
            errs.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.decoder_heads < 1 or self.decoder_dim % self.decoder_heads:
            errs.append(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        width = 2 * self.n_freq**4
        if self.allow_truncation:
            if width < self.dim:
                errs.append(f"2*n_freq^4 = {width} < dim = {self.dim}")
        elif width != self.dim:
            errs.append(f"2*n_freq^4 = {width} != dim = {self.dim}")
        if self.activation not in ("geglu", "gelu"):
            errs.append(f"unknown activation {self.activation!r}")
        if self.norm not in ("rmsnorm", "layernorm"):
            errs.append(f"unknown norm {self.norm!r}")
        if self.patch_size < 1:
            errs.append("patch_size must be >= 1")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError([f"unknown model config key {k!r}" for k in unknown])
        return cls(**d)


# Table of encoder sizes. "large" is recorded as published (1250 / 19 heads is
# not divisible and fails validation); "large_star" is the runnable variant.
NAMED_CONFIGS: dict[str, dict] = {
    "small": dict(depth=4, heads=8, dim=512, n_freq=4),
    "base": dict(depth=22, heads=8, dim=512, n_freq=4),
    "large": dict(depth=22, heads=19, dim=1250, n_freq=5),
    "large_star": dict(depth=22, heads=25, dim=1250, n_freq=5),
    "tiny": dict(depth=2, heads=2, dim=32, n_freq=2),
    "gradcheck": dict(depth=2, heads=2, dim=16, n_freq=2, decoder_depth=1, patch_size=8, allow_truncation=True),
}
PUBLISHED_PARAMS_M = {"small": 12, "base": 69, "large": 408}


def named_config(name: str, **overrides) -> ModelConfig:
    return ModelConfig(**{**NAMED_CONFIGS[name], **overrides})


def ffn_hidden(dim: int, ratio: float = 8 / 3) -> int:
    """Largest multiple of 8 not exceeding ratio * dim (at least 8)."""
    return max(8, int(math.floor(ratio * dim + 1e-9)) // 8 * 8)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms = torch.sqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x / rms * self.weight


def make_norm(kind: str, dim: int) -> nn.Module:
    if kind == "rmsnorm":
        return RMSNorm(dim)
    return nn.LayerNorm(dim, bias=False)


class GEGLU(nn.Module):
    """W_out(GELU(W_g x) * W_v x), no biases."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.value = nn.Linear(dim, hidden, bias=False)
        self.out = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.out(F.gelu(self.gate(x)) * self.value(x))


class GELUFFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = nn.Linear(dim, hidden, bias=False)
        self.out = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.out(F.gelu(self.up(x)))


class Attention(nn.Module):
    """Non-causal multi-head self-attention with bias-free projections."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)

    def _split(self, x):
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).transpose(-3, -2)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(-3, -2).flatten(-2)
        out = self.o(out)
        return (out, weights) if return_weights else out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_ratio: float, activation: str = "geglu", norm: str = "rmsnorm"):
        super().__init__()
        hidden = ffn_hidden(dim, ffn_ratio)
        self.attn_norm = make_norm(norm, dim)
        self.attn = Attention(dim, heads)
        self.ffn_norm = make_norm(norm, dim)
        self.ffn = GEGLU(dim, hidden) if activation == "geglu" else GELUFFN(dim, hidden)

    def forward(self, x):
        x = x + self.attn(self.attn_norm(x))
        return x + self.ffn(self.ffn_norm(x))


class Transformer(nn.Module):
    def __init__(self, depth: int, dim: int, heads: int, ffn_ratio: float = 8 / 3, activation: str = "geglu", norm: str = "rmsnorm", name: str = "encoder"):
        super().__init__()
        self.name = name
        self.blocks = nn.ModuleList(Block(dim, heads, ffn_ratio, activation, norm) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns final states and the post-FFN output of every block."""
        record = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NonFiniteActivation(f"{self.name} block {i} produced non-finite activations")
            record.append(x)
        return x, record


def param_count(cfg: ModelConfig) -> int:
    """Exact trainable parameter count of the encoder.

    Encoder = patch embedding + positional-encoding branch (linear + two
    LayerNorms) + transformer blocks. Decoder and pretraining heads excluded.
    """
    D, h = cfg.dim, ffn_hidden(cfg.dim, cfg.ffn_ratio)
    patch = cfg.patch_size * D
    posenc = 4 * D + 2 * D + 2 * D
    attn = 4 * D * D
    ffn = 3 * D * h if cfg.activation == "geglu" else 2 * D * h
    norms = 2 * D  # RMSNorm gains, or bias-free LayerNorm weights
    return patch + posenc + cfg.depth * (attn + ffn + norms)


def megatron_init(modules: Iterable[nn.Module], extra: Iterable[torch.Tensor] = (), std: float = INIT_STD, generator: torch.Generator | None = None) -> None:
    """N(0, std^2) for every Linear weight under ``modules`` and each ``extra`` tensor."""
    with torch.no_grad():
        for mod in modules:
            for sub in mod.modules():
                if isinstance(sub, nn.Linear):
                    sub.weight.normal_(0.0, std, generator=generator)
        for t in extra:
            t.normal_(0.0, std, generator=generator)


def linear_biases(model: nn.Module) -> list[str]:
    """Names of every Linear layer that carries a bias."""
    return [name for name, m in model.named_modules() if isinstance(m, nn.Linear) and m.bias is not None]


# --------------------------------------------------------------------------
# checkpoints: JSON manifest + one raw little-endian payload in manifest order

CHECKPOINT_FORMAT = "reve-checkpoint"
_DTYPES = {"<f4": (torch.float32, np.float32), "<f8": (torch.float64, np.float64), "<i8": (torch.int64, np.int64)}


def save_checkpoint(directory: str | Path, tensors: dict[str, torch.Tensor], meta: dict, dtype: str = "<f4") -> Path:
    """Write ``manifest.json`` and ``tensors.bin`` under ``directory``.

    Float tensors are stored as ``dtype``; integer tensors as ``<i8``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "tensors.bin", "wb") as fh:
        for name, t in tensors.items():
            code = dtype if t.is_floating_point() else "<i8"
            arr = t.detach().cpu().numpy().astype(np.dtype(code), order="C")  # keeps 0-d shapes
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": arr.nbytes})
            offset += arr.nbytes
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1, **meta, "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=False), encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory}: not a {CHECKPOINT_FORMAT}")
    blob = (directory / "tensors.bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        np_dtype = np.dtype(e["dtype"])
        arr = np.frombuffer(blob, dtype=np_dtype, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return tensors, meta
