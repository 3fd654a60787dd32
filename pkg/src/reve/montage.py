"""Electrode name -> 3D head coordinates, plus training-time position jitter.

Coordinates are in centimeters in a head-centered frame: x to the right ear,
y towards the nose, z through the vertex. The bundled table is an idealized
spherical projection of the 10-20 / 10-10 system on a 9 cm sphere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

HEAD_RADIUS_CM = 9.0
MAX_NORM_CM = 15.0

_ROW_POLAR = {
    # row prefix -> (polar angle of the midline electrode from the vertex, front?)
    "Fp": (90.0, True),
    "AF": (67.5, True),
    "F": (45.0, True),
    "FC": (22.5, True),
    "C": (0.0, True),
    "CP": (22.5, False),
    "P": (45.0, False),
    "PO": (67.5, False),
    "O": (90.0, False),
}
# azimuth (degrees from the nose, towards the left ear) of the row's
# electrode on the 10%-circumference, i.e. the "7" position
_ROW_EDGE_AZIMUTH = {
    "Fp": 18.0,
    "AF": 36.0,
    "F": 54.0,
    "FC": 72.0,
    "C": 90.0,
    "CP": 108.0,
    "P": 126.0,
    "PO": 144.0,
    "O": 162.0,
}
_ALIASES = {"T3": "T7", "T4": "T8", "T5": "P7", "T6": "P8"}


class UnresolvedChannelError(KeyError):
    """Raised when electrode labels are missing from a layout."""

    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        super().__init__(f"unresolved channels: {', '.join(self.names)}")


def _unit(polar_deg: float, azimuth_deg: float) -> np.ndarray:
    th, az = np.deg2rad(polar_deg), np.deg2rad(azimuth_deg)
    # azimuth measured from +y (nose) towards -x (left)
    return np.array([-np.sin(th) * np.sin(az), np.sin(th) * np.cos(az), np.cos(th)])


def _slerp(a: np.ndarray, b: np.ndarray, frac: float) -> np.ndarray:
    omega = np.arccos(np.clip(a @ b, -1.0, 1.0))
    if omega < 1e-12:
        return a.copy()
    return (np.sin((1 - frac) * omega) * a + np.sin(frac * omega) * b) / np.sin(omega)


def spherical_1010_table(radius: float = HEAD_RADIUS_CM) -> dict[str, tuple[float, float, float]]:
    """Build the idealized spherical 10-10 table.

    Midline electrodes sit on the sagittal great circle in 22.5 degree steps
    from the vertex. Each row's "7"/"8" electrode sits on the equator; the
    intermediate 1/3/5 (2/4/6) electrodes are slerped between midline and
    equator at 1/4, 1/2, 3/4. The "9"/"10" electrodes are one step below
    the equator.
    """
    table: dict[str, np.ndarray] = {}
    for row, (polar, front) in _ROW_POLAR.items():
        mid = _unit(polar, 0.0 if front else 180.0)
        if row == "C":
            mid = np.array([0.0, 0.0, 1.0])
        table[f"{row}z"] = mid
        edge_az = _ROW_EDGE_AZIMUTH[row]
        for side, sign in (("left", 1.0), ("right", -1.0)):
            edge = _unit(90.0, sign * edge_az)
            odd = side == "left"
            for k in (1, 3, 5, 7):
                num = k if odd else k + 1
                if row in ("Fp", "O") and k != 7:
                    continue
                if row in ("Fp", "O"):
                    num = 1 if odd else 2
                label = "T" if row == "C" and k == 7 else row
                if row == "FC" and k == 7:
                    label = "FT"
                if row == "CP" and k == 7:
                    label = "TP"
                table[f"{label}{num}"] = _slerp(mid, edge, (k + 1) / 8)
            if row in ("F", "FC", "C", "CP", "P"):
                label = {"F": "F", "FC": "FT", "C": "T", "CP": "TP", "P": "P"}[row]
                num = 9 if odd else 10
                table[f"{label}{num}"] = _unit(112.5, sign * edge_az)
    table["Nz"] = _unit(112.5, 0.0)
    table["Iz"] = _unit(112.5, 180.0)
    return {k: tuple(round(float(c), 6) + 0.0 for c in radius * v) for k, v in table.items()}


@dataclass(frozen=True)
class ElectrodeLayout:
    """Immutable name -> (x, y, z) cm table."""

    table: Mapping[str, tuple[float, float, float]]

    def __post_init__(self):
        for name, xyz in self.table.items():
            arr = np.asarray(xyz, dtype=float)
            if arr.shape != (3,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"electrode {name!r}: coordinates must be 3 finite values")
            if np.linalg.norm(arr) > MAX_NORM_CM:
                raise ValueError(f"electrode {name!r}: |xyz| > {MAX_NORM_CM} cm")

    @classmethod
    def from_json(cls, path: str | Path) -> "ElectrodeLayout":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls({k: tuple(map(float, v)) for k, v in raw.items()})

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({k: list(v) for k, v in self.table.items()}, fh, indent=1, sort_keys=True)

    def names(self) -> list[str]:
        return list(self.table)

    def lookup(self, name: str) -> tuple[float, float, float] | None:
        if name in self.table:
            return self.table[name]
        name = _ALIASES.get(name, name)
        if name in self.table:
            return self.table[name]
        # case-insensitive fallback ("FP1", "cz")
        folded = {k.lower(): v for k, v in self.table.items()}
        return folded.get(name.lower())


_STANDARD: ElectrodeLayout | None = None


def standard_layout() -> ElectrodeLayout:
    """The bundled 10-10 layout (``data/standard_1010.json``)."""
    global _STANDARD
    if _STANDARD is None:
        ref = resources.files("reve") / "data" / "standard_1010.json"
        with resources.as_file(ref) as path:
            _STANDARD = ElectrodeLayout.from_json(path)
    return _STANDARD


def resolve_positions(names: Sequence[str], layout: ElectrodeLayout | None = None) -> np.ndarray:
    layout = layout or standard_layout()
    rows, missing = [], []
    for n in names:
        xyz = layout.lookup(n)
        if xyz is None:
            missing.append(n)
        else:
            rows.append(xyz)
    if missing:
        raise UnresolvedChannelError(missing)
    return np.asarray(rows, dtype=np.float64).reshape(len(names), 3)


@dataclass(frozen=True)
class JitterConfig:
    sigma_noise: float = 0.25  # cm
    seed: int = 0

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")


def jitter_positions(P: np.ndarray, cfg: JitterConfig | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add i.i.d. Gaussian noise to every coordinate.

    ``rng`` takes precedence over ``cfg.seed`` so trainers can thread one
    generator through a step.
    """
    cfg = cfg or JitterConfig()
    P = np.asarray(P, dtype=np.float64)
    if not np.all(np.isfinite(P)):
        raise ValueError("positions must be finite")
    if cfg.sigma_noise == 0:
        return P.copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return P + rng.normal(0.0, cfg.sigma_noise, size=P.shape)
