"""Deterministic synthetic slides with planted lesion regions.

Each slide is a flat field of "tissue" texture inside a glass border, with
zero or more disk-shaped lesions drawn in a second texture.  Textures are a
base colour, per-channel Gaussian noise and an optional cosine stripe
pattern along x.  A stripe at 0.5 cycles/px (period 2) cancels exactly under
the 2x2 box filter, so it is only visible at 10x; that is how the LG and HG
textures are kept apart at 5x.

Noise comes from numpy's PCG64 generator, whose output stream is fixed by
the seed on every platform.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ConfigError
from . import netpbm

LABELS = ("BN", "LG", "HG")
LEVELS = ("5x", "10x")


@dataclass(frozen=True)
class TextureSpec:
    mean_rgb: tuple[float, float, float]
    std_rgb: tuple[float, float, float]
    frequency: float = 0.0  # cycles per 10x pixel along x
    amplitude: float = 0.0  # added to all channels

    def pattern(self, width: int) -> np.ndarray:
        xs = np.arange(width, dtype=np.float64)
        return self.amplitude * np.cos(2.0 * np.pi * self.frequency * xs)


GLASS = TextureSpec((205.0, 235.0, 205.0), (3.0, 3.0, 3.0))
STROMA = TextureSpec((215.0, 145.0, 185.0), (10.0, 10.0, 10.0))
LESION_LG = TextureSpec((150.0, 90.0, 180.0), (10.0, 10.0, 10.0))
LESION_HG = TextureSpec((150.0, 90.0, 180.0), (10.0, 10.0, 10.0), frequency=0.5, amplitude=24.0)
DEFAULT_LESION_TEXTURES = {"LG": LESION_LG, "HG": LESION_HG}


@dataclass(frozen=True)
class SynthConfig:
    """One slide.  ``lesions`` pins explicit (cx, cy, r) disks at 10x; when
    empty, ``lesion_count`` disks are sampled from the seed."""

    seed: int
    class_label: str = "BN"
    slide_width_10x: int = 768
    slide_height_10x: int = 768
    lesion_count: int = 0
    lesion_radius_range: tuple[int, int] = (56, 120)
    background_texture: TextureSpec = STROMA
    lesion_texture: TextureSpec | None = None  # None: the default for class_label
    glass_texture: TextureSpec = GLASS
    glass_margin: int = 32
    lesions: tuple[tuple[int, int, int], ...] = ()
    slide_id: str = ""

    def validate(self) -> None:
        if self.class_label not in LABELS:
            raise ConfigError(f"class_label must be one of {LABELS}, got {self.class_label!r}")
        if self.slide_width_10x < 512 or self.slide_height_10x < 512:
            raise ConfigError("slide dimensions must be at least 512x512 at 10x")
        if not 0 <= self.glass_margin < min(self.slide_width_10x, self.slide_height_10x) // 2:
            raise ConfigError(f"glass_margin {self.glass_margin} does not leave any tissue")
        n = len(self.lesions) if self.lesions else self.lesion_count
        if n < 0:
            raise ConfigError("lesion_count must be >= 0")
        if (n == 0) != (self.class_label == "BN"):
            raise ConfigError("lesion_count must be 0 exactly when class_label is BN")
        lo, hi = self.lesion_radius_range
        if self.lesions:
            for cx, cy, r in self.lesions:
                if r <= 0 or cx - r < 0 or cy - r < 0 or cx + r >= self.slide_width_10x \
                        or cy + r >= self.slide_height_10x:
                    raise ConfigError(f"lesion ({cx}, {cy}, {r}) does not fit inside the slide")
        elif n:
            inner = min(self.slide_width_10x, self.slide_height_10x) - 2 * self.glass_margin
            if not 0 < lo <= hi or 2 * hi >= inner:
                raise ConfigError(f"lesion_radius_range {self.lesion_radius_range} does not fit")


@dataclass
class ImagePyramid:
    slide_id: str
    levels: dict[str, np.ndarray]
    truth_mask_10x: np.ndarray  # uint8, 1 = lesion
    lesions: tuple[tuple[int, int, int], ...] = ()


def downsample2x(rgb: np.ndarray) -> np.ndarray:
    """2x2 mean box filter with round-half-up integer arithmetic."""
    h, w = rgb.shape[0] // 2, rgb.shape[1] // 2
    blocks = rgb[:2 * h, :2 * w].astype(np.uint16)
    s = blocks[0::2, 0::2] + blocks[1::2, 0::2] + blocks[0::2, 1::2] + blocks[1::2, 1::2]
    return ((s + 2) // 4).astype(np.uint8)


def disk_mask(height: int, width: int, lesions) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    for cx, cy, r in lesions:
        y0, y1 = max(0, cy - r), min(height, cy + r + 1)
        x0, x1 = max(0, cx - r), min(width, cx + r + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask[y0:y1, x0:x1] |= ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(np.uint8)
    return mask


def _place_lesions(cfg: SynthConfig, rng: np.random.Generator):
    lo, hi = cfg.lesion_radius_range
    out = []
    for _ in range(cfg.lesion_count):
        r = int(rng.integers(lo, hi + 1))
        m = cfg.glass_margin + r
        cx = int(rng.integers(m, cfg.slide_width_10x - m))
        cy = int(rng.integers(m, cfg.slide_height_10x - m))
        out.append((cx, cy, r))
    return tuple(out)


def generate_slide(cfg: SynthConfig) -> ImagePyramid:
    """Render one slide.  A single float32 standard-normal field is drawn and
    each pixel scales it by the std of the texture it belongs to."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.slide_height_10x, cfg.slide_width_10x
    lesions = cfg.lesions or _place_lesions(cfg, rng)

    region = np.zeros((h, w), dtype=np.uint8)  # 0 glass, 1 tissue, 2 lesion
    m = cfg.glass_margin
    region[m:h - m, m:w - m] = 1
    mask = disk_mask(h, w, lesions)
    region[mask.astype(bool)] = 2
    lesion_tex = cfg.lesion_texture or DEFAULT_LESION_TEXTURES.get(cfg.class_label, cfg.background_texture)
    textures = [cfg.glass_texture, cfg.background_texture, lesion_tex]

    noise = rng.standard_normal((h, w, 3), dtype=np.float32)
    means = np.array([t.mean_rgb for t in textures], dtype=np.float32)
    stds = np.array([t.std_rgb for t in textures], dtype=np.float32)
    patterns = np.stack([t.pattern(w) for t in textures]).astype(np.float32)
    img = noise
    img *= stds[region]
    img += means[region]
    img += patterns[region, np.arange(w)[None, :]][..., None]

    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return ImagePyramid(
        slide_id=cfg.slide_id or f"slide_{cfg.seed}",
        levels={"10x": raster, "5x": downsample2x(raster)},
        truth_mask_10x=mask,
        lesions=tuple(lesions),
    )


def tile_truth_fraction(pyramid: ImagePyramid, level: str, x: int, y: int, size: int) -> float:
    """Fraction of lesion pixels under a tile, measured on the 10x mask."""
    s = 2 if level == "5x" else 1
    win = pyramid.truth_mask_10x[s * y:s * (y + size), s * x:s * (x + size)]
    return float(win.mean())


TRUTH_THRESHOLD = 0.30


def tile_is_positive(pyramid: ImagePyramid, level: str, x: int, y: int, size: int) -> bool:
    return tile_truth_fraction(pyramid, level, x, y, size) >= TRUTH_THRESHOLD


# -- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class DatasetTemplate:
    """Shared geometry and textures for every slide in a dataset."""

    slide_width_10x: int = 768
    slide_height_10x: int = 768
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[int, int] = (56, 120)
    glass_margin: int = 32
    background_texture: TextureSpec = STROMA
    lesion_textures: dict = field(default_factory=lambda: dict(DEFAULT_LESION_TEXTURES))

    def slide_config(self, label: str, seed: int, slide_id: str) -> SynthConfig:
        rng = np.random.default_rng([seed, 7])
        lo, hi = self.lesion_count_range
        count = 0 if label == "BN" else int(rng.integers(lo, hi + 1))
        return SynthConfig(
            seed=seed,
            class_label=label,
            slide_width_10x=self.slide_width_10x,
            slide_height_10x=self.slide_height_10x,
            lesion_count=count,
            lesion_radius_range=self.lesion_radius_range,
            background_texture=self.background_texture,
            lesion_texture=None if label == "BN" else self.lesion_textures[label],
            glass_margin=self.glass_margin,
            slide_id=slide_id,
        )


def slide_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def dataset_configs(counts: dict[str, int], base_seed: int,
                    template: DatasetTemplate | None = None) -> list[SynthConfig]:
    """Slide configs with labels interleaved in LABELS order."""
    template = template or DatasetTemplate()
    for label, n in counts.items():
        if label not in LABELS:
            raise ConfigError(f"unknown label {label!r}")
        if n < 0:
            raise ConfigError("class counts must be non-negative")
    if sum(counts.values()) < 1:
        raise ConfigError("dataset must contain at least one slide")
    order = []
    for i in range(max(counts.values())):
        order.extend(lab for lab in LABELS if counts.get(lab, 0) > i)
    cfgs = []
    for idx, label in enumerate(order):
        seed = slide_seed(base_seed, idx)
        cfgs.append(template.slide_config(label, seed, f"slide_{idx:04d}"))
    return cfgs


def iter_dataset(counts: dict[str, int], base_seed: int,
                 template: DatasetTemplate | None = None) -> Iterator[tuple[SynthConfig, ImagePyramid]]:
    for cfg in dataset_configs(counts, base_seed, template):
        yield cfg, generate_slide(cfg)


@dataclass
class ManifestEntry:
    slide_id: str
    label: str
    level_paths: dict[str, str]
    mask_path: str
    seed: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path | None = None
    reference_tiles: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"slides": [asdict(e) for e in self.entries], "reference_tiles": self.reference_tiles}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls([ManifestEntry(**e) for e in doc["slides"]], root=path.parent,
                   reference_tiles=dict(doc.get("reference_tiles", {})))

    def resolve(self, rel: str) -> Path:
        return (self.root / rel) if self.root is not None else Path(rel)

    def load_pyramid(self, entry: ManifestEntry) -> ImagePyramid:
        levels = {lv: netpbm.read(self.resolve(p)) for lv, p in entry.level_paths.items()}
        mask = (netpbm.read(self.resolve(entry.mask_path)) > 127).astype(np.uint8)
        return ImagePyramid(entry.slide_id, levels, mask)

    def labels(self) -> dict[str, str]:
        return {e.slide_id: e.label for e in self.entries}


def write_pyramid(pyr: ImagePyramid, out_dir: Path) -> tuple[dict[str, str], str]:
    slides = out_dir / "slides"
    slides.mkdir(parents=True, exist_ok=True)
    level_paths = {}
    for lv in LEVELS:
        rel = f"slides/{pyr.slide_id}_{lv}.ppm"
        netpbm.write_ppm(out_dir / rel, pyr.levels[lv])
        level_paths[lv] = rel
    mask_rel = f"slides/{pyr.slide_id}_mask.pgm"
    netpbm.write_pgm(out_dir / mask_rel, pyr.truth_mask_10x * 255)
    return level_paths, mask_rel


def generate_dataset(n_per_class: int, base_seed: int, out_dir: str | Path,
                     template: DatasetTemplate | None = None,
                     counts: dict[str, int] | None = None) -> DatasetManifest:
    if counts is None:
        if n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        counts = {lab: n_per_class for lab in LABELS}
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    entries = []
    references: dict[str, str] = {}
    for cfg, pyr in iter_dataset(counts, base_seed, template):
        level_paths, mask_rel = write_pyramid(pyr, out_dir)
        entries.append(ManifestEntry(pyr.slide_id, cfg.class_label, level_paths, mask_rel, cfg.seed))
        if not references and (cfg.class_label == "BN" or counts.get("BN", 0) == 0):
            references = write_reference_tiles(pyr, out_dir)
    manifest = DatasetManifest(entries, root=out_dir, reference_tiles=references)
    (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


REFERENCE_SIZE_5X = 128


def write_reference_tiles(pyr: ImagePyramid, out_dir: Path) -> dict[str, str]:
    """Centre crop of a slide at both levels, used as the stain target."""
    out = {}
    for lv, size in (("5x", REFERENCE_SIZE_5X), ("10x", 2 * REFERENCE_SIZE_5X)):
        img = pyr.levels[lv]
        y0 = (img.shape[0] - size) // 2
        x0 = (img.shape[1] - size) // 2
        rel = f"reference_{lv}.ppm"
        netpbm.write_ppm(out_dir / rel, img[y0:y0 + size, x0:x0 + size])
        out[lv] = rel
    return out


def with_lesions(cfg: SynthConfig, lesions) -> SynthConfig:
    return replace(cfg, lesions=tuple(tuple(int(v) for v in les) for les in lesions))


def union_area_two(r1: float, r2: float, dist: float) -> float:
    """Analytic area of the union of two disks."""
    a1, a2 = math.pi * r1 * r1, math.pi * r2 * r2
    if dist >= r1 + r2:
        return a1 + a2
    if dist <= abs(r1 - r2):
        return max(a1, a2)
    p1 = r1 * r1 * math.acos((dist * dist + r1 * r1 - r2 * r2) / (2 * dist * r1))
    p2 = r2 * r2 * math.acos((dist * dist + r2 * r2 - r1 * r1) / (2 * dist * r2))
    p3 = 0.5 * math.sqrt((-dist + r1 + r2) * (dist + r1 - r2) * (dist - r1 + r2) * (dist + r1 + r2))
    return a1 + a2 - (p1 + p2 - p3)
