"""Run configuration: one JSON document merging every module's settings.

Unknown keys are errors, and validation reports every problem at once.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .eeg_data import PreprocessConfig, SynthSpec
from .finetune import FinetunePlan, LoraConfig, ProbeConfig
from .masking import MaskParams
from .model import NAMED_CONFIGS, ConfigError, ModelConfig
from .optim import OptimConfig
from .pretrain import PretrainConfig

SCHEMA = "reve-run/1"


@dataclass
class PretrainSection:
    batch_size: int = 32
    steps: int = 500
    secondary_weight: float = 0.1
    loss_reduction: str = "sum"
    window_seconds: float = 10.0
    patch_w: int = 200
    patch_o: int = 20
    jitter_sigma: float = 0.25
    cyclic: bool = False
    scale_lr_by_width: bool = True  # lr_peak * (dim/512)^-0.9


@dataclass
class SynthSection:
    kind: str = "spectral"  # "spectral" | "sinusoid"
    n_classes: int = 2
    peaks_per_class: list = dataclasses.field(default_factory=lambda: [[10.0, 2.0, 1.0], [25.0, 2.0, 1.0]])
    noise_exponent: float = 1.0
    duration: float = 10.0
    channels: int = 8
    recordings_per_class: int = 20
    sample_rate: float = 200.0
    noise_level: float = 1.0
    n_subjects: int = 4


@dataclass
class DataSection:
    corpus: str | None = None
    checkpoint: str | None = None
    checkpoints: list | None = None
    test_fraction: float = 0.25
    keep_channels: list | None = None


@dataclass
class EvalSection:
    n_shots: int = 5
    n_runs: int = 20
    seeds: list = dataclasses.field(default_factory=lambda: [0])


@dataclass
class ScheduleSection:
    steps_per_epoch: int = 100
    n_epochs: int = 1
    warmup_frac: float = 0.10
    stable_frac: float = 0.80
    floor_frac: float = 0.01
    cyclic: bool = False


@dataclass
class FlopsSection:
    D_tokens: float = 60_000 * 3600 * 1.1 * 68 * 17
    N: float = 72e6
    L: int = 23
    H: int = 8
    Q: int = 64
    T_tokens: float = 68 * 11
    P_throughput: float = 312e12
    mfu: float = 0.5


SECTIONS: dict[str, type] = {
    "preprocess": PreprocessConfig,
    "synth": SynthSection,
    "model": ModelConfig,
    "pretrain": PretrainSection,
    "mask": MaskParams,
    "optim": OptimConfig,
    "schedule": ScheduleSection,
    "probe": ProbeConfig,
    "finetune": FinetunePlan,
    "data": DataSection,
    "eval": EvalSection,
    "flops": FlopsSection,
}
TOP_LEVEL = {"schema", "seed", "out", "model_preset"}


def default_dict() -> dict:
    d: dict[str, Any] = {"schema": SCHEMA, "seed": 0, "out": "run", "model_preset": "tiny"}
    for name, cls in SECTIONS.items():
        d[name] = {}
    return d


def apply_override(d: dict, item: str) -> None:
    """``a.b.c=value``; value parsed as JSON, else kept as a string."""
    if "=" not in item:
        raise ConfigError([f"override {item!r} is not key=value"])
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([f"override {key!r} descends into a non-object"])
    node[parts[-1]] = value


@dataclass
class RunConfig:
    raw: dict
    seed: int
    out: str
    sections: dict[str, Any]

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.raw, indent=1, sort_keys=True), encoding="utf-8")

    def pretrain_config(self) -> PretrainConfig:
        from .optim import scale_lr

        s, optim = self.pretrain, self.optim
        if s.scale_lr_by_width:
            optim = dataclasses.replace(optim, lr_peak=scale_lr(self.model.dim, base_lr=optim.lr_peak))
        return PretrainConfig(
            batch_size=s.batch_size, steps=s.steps, secondary_weight=s.secondary_weight,
            loss_reduction=s.loss_reduction, window_seconds=s.window_seconds,
            sample_rate=self.preprocess.target_rate, patch_w=s.patch_w, patch_o=s.patch_o,
            jitter_sigma=s.jitter_sigma, seed=self.seed, cyclic=s.cyclic, mask=self.mask, optim=optim,
        )

    def synth_spec(self) -> SynthSpec:
        s = self.synth
        return SynthSpec(
            n_classes=s.n_classes, peaks_per_class=tuple(tuple(p) for p in s.peaks_per_class),
            noise_exponent=s.noise_exponent, duration=s.duration, channels=s.channels, seed=self.seed,
            recordings_per_class=s.recordings_per_class, sample_rate=s.sample_rate,
            noise_level=s.noise_level, n_subjects=s.n_subjects,
        )


def resolve(user: dict | None = None, overrides: list[str] = (), seed: int | None = None, out: str | None = None) -> RunConfig:
    """Merge defaults, a user document and overrides; validate everything."""
    d = default_dict()
    user = copy.deepcopy(user or {})
    errors: list[str] = []
    for k, v in user.items():
        if k in SECTIONS:
            if not isinstance(v, dict):
                errors.append(f"section {k!r} must be an object")
                continue
            d[k].update(v)
        elif k in TOP_LEVEL:
            d[k] = v
        else:
            errors.append(f"unknown config key {k!r}")
    for item in overrides:
        try:
            apply_override(d, item)
        except ConfigError as e:
            errors.extend(e.errors)
    if seed is not None:
        d["seed"] = seed
    if out is not None:
        d["out"] = out
    if d.get("schema") != SCHEMA:
        errors.append(f"schema must be {SCHEMA!r}, got {d.get('schema')!r}")
    for k in d:
        if k not in SECTIONS and k not in TOP_LEVEL:
            errors.append(f"unknown config key {k!r}")

    preset = d.get("model_preset")
    if preset is not None and preset not in NAMED_CONFIGS:
        errors.append(f"unknown model_preset {preset!r}; choose from {sorted(NAMED_CONFIGS)}")
        preset = None
    if preset:
        d["model"] = {**NAMED_CONFIGS[preset], **d["model"]}

    sections: dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        body = d.get(name, {})
        if not isinstance(body, dict):
            continue
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(body) - known)
        errors.extend(f"unknown config key {name}.{k!r}" for k in unknown)
        kwargs = {k: v for k, v in body.items() if k in known}
        if name == "finetune" and isinstance(kwargs.get("lora"), dict):
            try:
                kwargs["lora"] = LoraConfig(**{**kwargs["lora"], "targets": tuple(kwargs["lora"].get("targets", ("q", "k", "v", "o")))})
            except (TypeError, ValueError) as e:
                errors.append(f"finetune.lora: {e}")
                kwargs.pop("lora")
        try:
            obj = cls(**kwargs)
        except (TypeError, ValueError) as e:
            errors.append(f"{name}: {e}")
            continue
        if isinstance(obj, ModelConfig):
            errors.extend(f"model: {p}" for p in obj.problems())
        sections[name] = obj
    if errors:
        raise ConfigError(errors)
    return RunConfig(raw=d, seed=int(d["seed"]), out=str(d["out"]), sections=sections)


def load(path: str | Path | None, overrides: list[str] = (), seed: int | None = None, out: str | None = None) -> RunConfig:
    user = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    return resolve(user, overrides, seed, out)
