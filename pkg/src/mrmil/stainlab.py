"""Reinhard colour transfer in l-alpha-beta space and the blue-ratio transform."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import InputError

RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LAB_TO_LMS = np.linalg.inv(LMS_TO_LAB)
LOG_FLOOR = 1e-6
CHANNELS = ("l", "alpha", "beta")


@dataclass(frozen=True)
class StainStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @property
    def degenerate(self) -> bool:
        return any(s <= 0.0 for s in self.std)

    def to_dict(self) -> dict[str, float]:
        d = {f"{c}_mean": float(m) for c, m in zip(CHANNELS, self.mean)}
        d.update({f"{c}_std": float(s) for c, s in zip(CHANNELS, self.std)})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StainStats":
        return cls(tuple(float(d[f"{c}_mean"]) for c in CHANNELS),
                   tuple(float(d[f"{c}_std"]) for c in CHANNELS))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "StainStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """uint8 RGB (..., 3) -> float64 l-alpha-beta (..., 3)."""
    lms = np.asarray(rgb, dtype=np.float64) @ RGB_TO_LMS.T
    return np.log10(np.maximum(lms, LOG_FLOOR)) @ LMS_TO_LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`, float64 output without clamping."""
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ LAB_TO_LMS.T)
    return lms @ LMS_TO_RGB.T


def compute_stats(tile: np.ndarray) -> StainStats:
    tile = np.asarray(tile)
    if tile.size == 0:
        raise InputError("compute_stats needs a non-empty tile")
    return _lab_stats(rgb_to_lab(tile).reshape(-1, 3))


def _lab_stats(lab: np.ndarray) -> StainStats:
    # constant channels get an exact zero std, not mean round-off
    std = np.where(np.ptp(lab, axis=0) == 0, 0.0, lab.std(axis=0))
    return StainStats(tuple(lab.mean(axis=0).tolist()), tuple(std.tolist()))


def pooled_stats(tiles) -> StainStats:
    """Stats over the union of pixels of several tiles (slide-level scope)."""
    labs = [rgb_to_lab(t).reshape(-1, 3) for t in tiles]
    if not labs:
        raise InputError("pooled_stats needs at least one tile")
    return _lab_stats(np.concatenate(labs))


def normalize(tile: np.ndarray, target: StainStats, source: StainStats | None = None,
              flags: list[str] | None = None) -> np.ndarray:
    """Match the tile's lab statistics to ``target``.

    ``source`` defaults to the tile's own stats; passing slide-level stats
    applies one transform to every tile of a slide.  Channels with zero
    source std are only mean-shifted, noted in ``flags`` when provided.
    """
    if target.degenerate:
        raise InputError("target stain stats must have positive std in every channel")
    tile = np.asarray(tile)
    lab = rgb_to_lab(tile)
    source = source or compute_stats(tile)
    src_mean = np.asarray(source.mean)
    src_std = np.asarray(source.std)
    tgt_mean = np.asarray(target.mean)
    tgt_std = np.asarray(target.std)
    zero = src_std <= 0.0
    if zero.any() and flags is not None:
        flags.append("degenerate_source_std:" + ",".join(c for c, z in zip(CHANNELS, zero) if z))
    scale = np.where(zero, 1.0, tgt_std / np.where(zero, 1.0, src_std))
    out = (lab - src_mean) * scale + tgt_mean
    rgb = lab_to_rgb(out)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def blue_ratio(tile: np.ndarray) -> np.ndarray:
    rgb = np.asarray(tile, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b))


def mean_blue_ratio(tile: np.ndarray) -> float:
    return float(blue_ratio(tile).mean())
