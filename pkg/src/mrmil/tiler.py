"""Tissue masking and overlapping tile grids."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import ConfigError, InputError


@dataclass(frozen=True)
class TileConfig:
    tile_size: int = 256
    overlap_fraction: float = 0.125
    min_tissue_fraction: float = 0.80
    # (lo, hi): tissue iff hue >= lo or hue < hi when lo > hi (wraps through 1.0 -> 0).
    hue_threshold: tuple[float, float] = (0.6, 0.1)
    morph_radius: int = 2

    @property
    def stride(self) -> int:
        return int(round(self.tile_size * (1.0 - self.overlap_fraction)))

    def validate(self) -> None:
        if self.tile_size < 1:
            raise ConfigError("tile_size must be >= 1")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigError("overlap_fraction must lie in [0, 1)")
        if self.stride < 1:
            raise ConfigError("stride rounds to zero")
        if not 0.0 < self.min_tissue_fraction <= 1.0:
            raise ConfigError("min_tissue_fraction must lie in (0, 1]")
        lo, hi = self.hue_threshold
        if not (0.0 <= lo < 1.0 and 0.0 <= hi <= 1.0):
            raise ConfigError("hue_threshold bounds must lie in [0, 1]")
        if self.morph_radius < 0:
            raise ConfigError("morph_radius must be >= 0")


@dataclass(frozen=True, order=True)
class TileRef:
    # field order gives the (y, x) sort key the grid is emitted in
    slide_id: str
    level: str
    y: int
    x: int
    size: int
    clamped: bool = False

    def key(self) -> tuple:
        return (self.slide_id, self.level, self.x, self.y, self.size)


@dataclass
class TissueMask:
    mask: np.ndarray  # uint8 0/1
    level: str


def rgb_to_hsv(rgb) -> np.ndarray:
    """Hexcone HSV for uint8 RGB, any leading shape; H in [0, 1), S, V in [0, 1].

    Achromatic pixels get H = 0 and black gets S = 0.
    """
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    h = np.where(h >= 1.0, h - 1.0, h)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def _shift_reduce(mask: np.ndarray, radius: int, op, pad_value: bool) -> np.ndarray:
    h, w = mask.shape
    padded = np.pad(mask, radius, mode="constant", constant_values=pad_value)
    out = np.full_like(mask, pad_value)  # identity of op
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out = op(out, padded[dy:dy + h, dx:dx + w])
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a (2r+1)^2 square; outside the raster counts as background."""
    if radius == 0:
        return mask.copy()
    return _shift_reduce(mask.astype(bool), radius, np.logical_or, False)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a (2r+1)^2 square; outside the raster counts as foreground
    so that erosion does not eat into tissue touching the border."""
    if radius == 0:
        return mask.copy()
    return _shift_reduce(mask.astype(bool), radius, np.logical_and, True)


def hue_in_band(hue: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    lo, hi = band
    if lo <= hi:
        return (hue >= lo) & (hue < hi)
    return (hue >= lo) | (hue < hi)


def tissue_mask(raster: np.ndarray, cfg: TileConfig = TileConfig(), level: str = "5x") -> TissueMask:
    raster = np.asarray(raster)
    if raster.size == 0 or raster.ndim != 3:
        raise InputError("tissue_mask needs a non-empty HxWx3 raster")
    hue = rgb_to_hsv(raster)[..., 0]
    m = hue_in_band(hue, cfg.hue_threshold)
    r = cfg.morph_radius
    m = erode(dilate(m, r), r)   # closing
    m = dilate(erode(m, r), r)   # opening
    return TissueMask(m.astype(np.uint8), level)


def grid_positions(length: int, size: int, stride: int) -> list[int]:
    if length < size:
        return []
    return list(range(0, length - size + 1, stride))


def tile_grid(level_dims: tuple[int, int], mask: TissueMask, cfg: TileConfig = TileConfig(),
              slide_id: str = "") -> list[tuple[TileRef, float]]:
    """Tiles fully inside a ``(height, width)`` level whose tissue coverage
    reaches ``min_tissue_fraction``, sorted by (y, x), paired with coverage."""
    cfg.validate()
    h, w = level_dims
    if mask.mask.shape != (h, w):
        raise InputError(f"mask shape {mask.mask.shape} does not match level {(h, w)}")
    n = cfg.tile_size
    integral = np.pad(mask.mask.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    out = []
    for y in grid_positions(h, n, cfg.stride):
        for x in grid_positions(w, n, cfg.stride):
            count = integral[y + n, x + n] - integral[y, x + n] - integral[y + n, x] + integral[y, x]
            frac = count / float(n * n)
            if frac >= cfg.min_tissue_fraction:
                out.append((TileRef(slide_id, mask.level, y, x, n), float(frac)))
    return out


def project_tile(ref: TileRef, dims_10x: tuple[int, int] | None = None) -> TileRef:
    """Map a 5x tile onto the same region at 10x, clamping to the raster when
    ``dims_10x`` (height, width) is given."""
    if ref.level != "5x":
        raise InputError(f"project_tile expects a 5x tile, got {ref.level}")
    x, y, size = 2 * ref.x, 2 * ref.y, 2 * ref.size
    clamped = False
    if dims_10x is not None:
        h, w = dims_10x
        if x + size > w:
            x, clamped = max(0, w - size), True
        if y + size > h:
            y, clamped = max(0, h - size), True
    return TileRef(ref.slide_id, "10x", y, x, size, clamped)


def split_subtiles(ref: TileRef, n: int = 2) -> list[TileRef]:
    """Split a tile into ``n*n`` non-overlapping sub-tiles in (y, x) order."""
    s = ref.size // n
    return [TileRef(ref.slide_id, ref.level, ref.y + i * s, ref.x + j * s, s)
            for i in range(n) for j in range(n)]


def extract(raster: np.ndarray, ref: TileRef) -> np.ndarray:
    return raster[ref.y:ref.y + ref.size, ref.x:ref.x + ref.size]


TILE_CSV_FIELDS = ("slide_id", "level", "x", "y", "size", "tissue_fraction")


def tiles_to_csv(rows: list[tuple[TileRef, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TILE_CSV_FIELDS)
    for ref, frac in rows:
        w.writerow([ref.slide_id, ref.level, ref.x, ref.y, ref.size, f"{frac:.6f}"])
    return buf.getvalue()


def tiles_from_csv(text: str) -> list[tuple[TileRef, float]]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        ref = TileRef(rec["slide_id"], rec["level"], int(rec["y"]), int(rec["x"]), int(rec["size"]))
        rows.append((ref, float(rec["tissue_fraction"])))
    return rows
