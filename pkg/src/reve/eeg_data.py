"""Signal container, preprocessing pipeline, synthetic EEG and corpus I/O.

Corpus layout on disk (one pair of files per recording, plus an index):

    <corpus>/index.json        {"format": "reve-corpus", "version": 1, "recordings": [stem, ...]}
    <corpus>/<stem>.json       UTF-8 metadata (see ``save_recording``)
    <corpus>/<stem>.f32        C*T float32, little-endian, row-major by channel

The ``.f32`` payload has no header; ``n_channels`` and ``n_samples`` in the
metadata give its shape. Byte ``4*(c*T + t)`` holds sample ``t`` of channel ``c``.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .montage import resolve_positions

FORMAT_VERSION = 1
STD_FLOOR = 1e-8


@dataclass
class EegRecording:
    data: np.ndarray  # C x T
    sample_rate: float
    channel_names: list[str]
    session_id: str = ""
    subject_id: str = ""
    positions: np.ndarray | None = None  # C x 3, cm
    label: int | None = None

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data))
        C, T = self.data.shape
        if C < 1 or T < 1:
            raise ValueError(f"recording must have C>=1 and T>=1, got {self.data.shape}")
        if len(self.channel_names) != C:
            raise ValueError(f"{len(self.channel_names)} channel names for {C} channels")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64).reshape(C, 3)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def with_data(self, data: np.ndarray, **changes) -> "EegRecording":
        return replace(self, data=data, **changes)

    def channel_positions(self) -> np.ndarray:
        if self.positions is not None:
            return self.positions
        return resolve_positions(self.channel_names)

    def select(self, names: Sequence[str]) -> "EegRecording":
        missing = [n for n in names if n not in self.channel_names]
        if missing:
            raise ValueError(f"channels {missing} not in recording {self.session_id}")
        idx = [self.channel_names.index(n) for n in names]
        pos = None if self.positions is None else self.positions[idx]
        return replace(self, data=self.data[idx], channel_names=list(names), positions=pos)


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate: float = 200.0
    band_low: float = 0.5
    band_high: float = 99.5
    clip_sigma: float = 15.0
    min_duration: float = 10.0
    filter: str = "spectral"  # "spectral" | "butter"

    def __post_init__(self):
        if not 0 < self.band_low < self.band_high < self.target_rate / 2:
            raise ValueError("need 0 < band_low < band_high < target_rate/2")
        if self.clip_sigma <= 0:
            raise ValueError("clip_sigma must be > 0")
        if self.filter not in ("spectral", "butter"):
            raise ValueError(f"unknown filter {self.filter!r}")


def _check_finite(rec: EegRecording) -> None:
    if not np.all(np.isfinite(rec.data)):
        raise ValueError("recording contains non-finite values")


def resample(rec: EegRecording, target_rate: float) -> EegRecording:
    """Polyphase rational resampling (anti-aliasing FIR built in)."""
    _check_finite(rec)
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if rec.sample_rate == target_rate:
        return rec.with_data(rec.data.copy())
    ratio = Fraction(target_rate / rec.sample_rate).limit_denominator(10_000)
    out = signal.resample_poly(rec.data.astype(np.float64), ratio.numerator, ratio.denominator, axis=1)
    n_out = int(math.floor(rec.n_samples * target_rate / rec.sample_rate + 0.5))
    if n_out < 1:
        raise ValueError("resampled signal would be empty")
    # resample_poly returns ceil(T*up/down) samples; keep round(T*up/down)
    out = out[:, :n_out]
    if out.shape[1] < n_out:
        out = np.pad(out, ((0, 0), (0, n_out - out.shape[1])), mode="edge")
    return rec.with_data(out, sample_rate=float(target_rate))


def _spectral_bandpass(x: np.ndarray, rate: float, low: float, high: float) -> np.ndarray:
    # zero-phase projection onto [low, high]; applying it twice is a no-op
    spec = np.fft.rfft(x, axis=-1)
    freqs = np.fft.rfftfreq(x.shape[-1], d=1.0 / rate)
    spec[..., (freqs < low) | (freqs > high)] = 0.0
    return np.fft.irfft(spec, n=x.shape[-1], axis=-1)


def bandpass(rec: EegRecording, low: float, high: float, method: str = "spectral", order: int = 4) -> EegRecording:
    """Zero-phase band-pass.

    ``method="spectral"`` zeroes FFT bins outside ``[low, high]`` (an exact
    projection, so the pipeline stays idempotent). ``method="butter"`` runs a
    Butterworth filter forward and backward.
    """
    nyq = rec.sample_rate / 2
    if not 0 < low < high < nyq:
        raise ValueError(f"band ({low}, {high}) must satisfy 0 < low < high < Nyquist={nyq}")
    _check_finite(rec)
    x = rec.data.astype(np.float64)
    if method == "spectral":
        y = _spectral_bandpass(x, rec.sample_rate, low, high)
    elif method == "butter":
        sos = signal.butter(order, [low, high], btype="bandpass", fs=rec.sample_rate, output="sos")
        y = signal.sosfiltfilt(sos, x, axis=1)
    else:
        raise ValueError(f"unknown band-pass method {method!r}")
    return rec.with_data(y)


def zscore_session(recs: Sequence[EegRecording]) -> list[EegRecording]:
    """Per-channel z-score with statistics pooled over every recording given.

    Callers pass the recordings of one session; channel layouts must match.
    Constant channels map to exact zeros.
    """
    if not recs:
        raise ValueError("zscore_session needs at least one recording")
    names = recs[0].channel_names
    for r in recs[1:]:
        if r.channel_names != names:
            raise ValueError("recordings in a session must share channel layout")
        if r.session_id != recs[0].session_id:
            raise ValueError(f"mixed sessions {recs[0].session_id!r} and {r.session_id!r}")
    n = sum(r.n_samples for r in recs)
    s1 = sum(r.data.astype(np.float64).sum(axis=1) for r in recs)
    mean = s1 / n
    s2 = sum(((r.data.astype(np.float64) - mean[:, None]) ** 2).sum(axis=1) for r in recs)
    std = np.maximum(np.sqrt(s2 / n), STD_FLOOR)
    # the floating-point mean of a constant is not always the constant itself
    const = np.minimum.reduce([r.data.min(axis=1) for r in recs]) == np.maximum.reduce([r.data.max(axis=1) for r in recs])
    out = []
    for r in recs:
        z = (r.data - mean[:, None]) / std[:, None]
        z[const] = 0.0
        out.append(r.with_data(z))
    return out


def clip_sigma(rec: EegRecording, k: float = 15.0) -> EegRecording:
    if k <= 0:
        raise ValueError("clip threshold must be > 0")
    return rec.with_data(np.clip(rec.data, -k, k))


def validate_duration(rec: EegRecording, min_s: float = 10.0) -> bool:
    """True when the recording is long enough to keep."""
    # integer comparison avoids 1999/200 < 10 style float noise at the boundary
    return rec.n_samples >= min_s * rec.sample_rate - 1e-9


def preprocess(recs: Sequence[EegRecording], cfg: PreprocessConfig | None = None) -> list[EegRecording]:
    """duration filter -> resample -> band-pass -> session z-score -> clip -> float32."""
    cfg = cfg or PreprocessConfig()
    kept = [r for r in recs if validate_duration(r, cfg.min_duration)]
    filtered = [
        bandpass(resample(r, cfg.target_rate), cfg.band_low, cfg.band_high, method=cfg.filter) for r in kept
    ]
    sessions: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(filtered):
        sessions[r.session_id].append(i)
    out: list[EegRecording | None] = [None] * len(filtered)
    for idx in sessions.values():
        for i, z in zip(idx, zscore_session([filtered[i] for i in idx])):
            clipped = clip_sigma(z, cfg.clip_sigma)
            out[i] = clipped.with_data(clipped.data.astype(np.float32))
    for r in out:
        if not np.all(np.isfinite(r.data)):
            raise ValueError(f"non-finite values after preprocessing (session {r.session_id!r})")
    return out


# --------------------------------------------------------------------------
# synthetic EEG

# classic 10-20 first so small channel counts still cover the scalp
PREFERRED_CHANNELS = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz", "C4", "T8",
    "P7", "P3", "Pz", "P4", "P8", "O1", "O2",
    "AF3", "AF4", "FC5", "FC1", "FC2", "FC6", "CP5", "CP1", "CP2", "CP6", "PO3", "PO4",
    "F1", "F2", "F5", "F6", "FC3", "FC4", "C1", "C2", "C5", "C6", "CP3", "CP4",
    "P1", "P2", "P5", "P6", "AF7", "AF8", "FT7", "FT8", "TP7", "TP8", "PO7", "PO8",
    "Fpz", "AFz", "FCz", "CPz", "POz", "Oz", "FT9", "FT10", "TP9", "TP10",
]


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 2
    peaks_per_class: tuple[tuple[float, float, float], ...] = ((10.0, 2.0, 1.0), (25.0, 2.0, 1.0))
    noise_exponent: float = 1.0
    duration: float = 10.0
    channels: int = 8
    seed: int = 0
    recordings_per_class: int = 20
    sample_rate: float = 200.0
    noise_level: float = 1.0
    n_subjects: int = 4
    source_width: float = 6.0  # cm, spatial spread of the class oscillation

    def validate(self) -> None:
        errs = []
        if self.n_classes < 1:
            errs.append("n_classes must be >= 1")
        if len(self.peaks_per_class) != self.n_classes:
            errs.append("peaks_per_class needs one (center, bandwidth, amplitude) per class")
        nyq = self.sample_rate / 2
        for c, bw, amp in self.peaks_per_class:
            if not 0 < c < nyq or bw < 0 or c + bw / 2 >= nyq or amp < 0:
                errs.append(f"invalid peak ({c}, {bw}, {amp}) for Nyquist {nyq}")
        if not 1 <= self.channels <= len(PREFERRED_CHANNELS):
            errs.append(f"channels must be in [1, {len(PREFERRED_CHANNELS)}]")
        if self.duration <= 0 or self.recordings_per_class < 1:
            errs.append("duration and recordings_per_class must be positive")
        if errs:
            raise ValueError("; ".join(errs))


def colored_noise(rng: np.random.Generator, shape: tuple[int, int], exponent: float, rate: float) -> np.ndarray:
    """Unit-variance noise with power spectrum ~ 1/f**exponent."""
    n = shape[-1]
    spec = rng.standard_normal(shape[:-1] + (n // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (n // 2 + 1,))
    f = np.fft.rfftfreq(n, d=1.0 / rate)
    gain = np.zeros_like(f)
    gain[1:] = f[1:] ** (-exponent / 2)
    x = np.fft.irfft(spec * gain, n=n, axis=-1)
    return x / (x.std(axis=-1, keepdims=True) + 1e-12)


def _narrowband(rng: np.random.Generator, n: int, center: float, bw: float, rate: float) -> np.ndarray:
    if bw == 0:
        t = np.arange(n) / rate
        return np.sqrt(2) * np.sin(2 * np.pi * center * t + rng.uniform(0, 2 * np.pi))
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.fft.rfftfreq(n, d=1.0 / rate)
    spec[np.abs(f - center) > bw / 2] = 0
    x = np.fft.irfft(spec, n=n)
    return x / (x.std() + 1e-12)


def synth_generate(spec: SynthSpec) -> list[EegRecording]:
    """Labeled synthetic corpus: per-class spectral peak over colored noise.

    The class oscillation is one source shared by all channels with a
    Gaussian spatial gain around a random scalp location, so neighbouring
    channels carry redundant information.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = PREFERRED_CHANNELS[: spec.channels]
    P = resolve_positions(names)
    n = int(round(spec.duration * spec.sample_rate))
    recs = []
    for k in range(spec.recordings_per_class * spec.n_classes):
        label = k % spec.n_classes
        center, bw, amp = spec.peaks_per_class[label]
        src = P[rng.integers(len(names))]
        d2 = ((P - src) ** 2).sum(axis=1)
        gain = 0.5 + 0.5 * np.exp(-d2 / (2 * spec.source_width**2))
        osc = _narrowband(rng, n, center, bw, spec.sample_rate)
        noise = colored_noise(rng, (len(names), n), spec.noise_exponent, spec.sample_rate)
        data = amp * gain[:, None] * osc[None, :] + spec.noise_level * noise
        subject = k % spec.n_subjects
        recs.append(
            EegRecording(
                data=data,
                sample_rate=spec.sample_rate,
                channel_names=list(names),
                session_id=f"sub{subject:02d}-ses00",
                subject_id=f"sub{subject:02d}",
                positions=P.copy(),
                label=label,
            )
        )
    return recs


def sinusoid_corpus(
    n_recordings: int,
    channels: int = 8,
    duration: float = 10.0,
    rate: float = 200.0,
    freqs: Sequence[float] = (10.0,),
    noise: float = 0.05,
    seed: int = 0,
) -> list[EegRecording]:
    """Clean multi-channel sinusoids (random phase and per-channel gain)."""
    rng = np.random.default_rng(seed)
    names = PREFERRED_CHANNELS[:channels]
    P = resolve_positions(names)
    t = np.arange(int(round(duration * rate))) / rate
    recs = []
    for k in range(n_recordings):
        f = freqs[k % len(freqs)]
        phase = rng.uniform(0, 2 * np.pi, size=(channels, 1))
        gain = rng.uniform(0.5, 1.5, size=(channels, 1))
        data = gain * np.sin(2 * np.pi * f * t[None, :] + phase) + noise * rng.standard_normal((channels, t.size))
        recs.append(
            EegRecording(data, rate, list(names), f"sin{k:04d}", f"sin{k:04d}", positions=P.copy(), label=k % len(freqs))
        )
    return recs


# --------------------------------------------------------------------------
# corpus I/O


def save_recording(rec: EegRecording, stem: str | Path) -> None:
    stem = Path(stem)
    meta = {
        "format": "reve-eeg",
        "version": FORMAT_VERSION,
        "n_channels": rec.n_channels,
        "n_samples": rec.n_samples,
        "dtype": "<f4",
        "order": "channel-major",
        "sample_rate": rec.sample_rate,
        "channel_names": list(rec.channel_names),
        "session_id": rec.session_id,
        "subject_id": rec.subject_id,
        "positions": None if rec.positions is None else np.asarray(rec.positions).tolist(),
        "label": rec.label,
    }
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    np.ascontiguousarray(rec.data, dtype="<f4").tofile(stem.with_suffix(".f32"))


def load_recording(stem: str | Path) -> EegRecording:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    if meta.get("format") != "reve-eeg":
        raise ValueError(f"{stem}: not a reve-eeg metadata file")
    C, T = meta["n_channels"], meta["n_samples"]
    raw = np.fromfile(stem.with_suffix(".f32"), dtype="<f4")
    if raw.size != C * T:
        raise ValueError(f"{stem}: payload has {raw.size} values, expected {C}x{T}")
    return EegRecording(
        data=raw.reshape(C, T).astype(np.float32),
        sample_rate=meta["sample_rate"],
        channel_names=meta["channel_names"],
        session_id=meta["session_id"],
        subject_id=meta["subject_id"],
        positions=None if meta["positions"] is None else np.asarray(meta["positions"]),
        label=meta["label"],
    )


def save_corpus(recs: Sequence[EegRecording], directory: str | Path) -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stems = [f"rec{i:05d}" for i in range(len(recs))]
    for stem, rec in zip(stems, recs):
        save_recording(rec, directory / stem)
    index = {"format": "reve-corpus", "version": FORMAT_VERSION, "recordings": stems}
    (directory / "index.json").write_text(json.dumps(index, indent=1), encoding="utf-8")
    return stems


def load_corpus(directory: str | Path) -> list[EegRecording]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
    return [load_recording(directory / stem) for stem in index["recordings"]]
