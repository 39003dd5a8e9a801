"""Handcrafted tile features and the binary feature-file format.

A tile becomes 36 numbers: 16 first-order statistics of its luma plus 5
grey-level co-occurrence statistics at each of 4 one-pixel offsets.  External
embeddings (e.g. from a CNN) can be ingested instead as long as they use the
same file layout; ``schema_id`` keeps the two from being mixed.

Feature file layout: one UTF-8 JSON header line ``{"schema_id", "k", "d",
"slide_id", "tiles"}`` terminated by ``\\n``, then ``k*d`` little-endian
float32 values in row-major order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import FormatError, InputError
from . import stainlab
from .synthgen import ImagePyramid
from .tiler import TileRef, extract

LUMA = np.array([0.299, 0.587, 0.114])
GLCM_LEVELS = 32
GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
FIRST_ORDER_NAMES = (
    "mean", "variance", "std", "min", "max", "range", "median", "p10", "p90",
    "iqr", "skewness", "kurtosis", "energy", "entropy", "mad", "rms",
)
GLCM_NAMES = ("contrast", "correlation", "energy", "homogeneity", "entropy")
FEATURE_NAMES = FIRST_ORDER_NAMES + tuple(
    f"glcm_{name}_{dy}_{dx}" for dy, dx in GLCM_OFFSETS for name in GLCM_NAMES)
HANDCRAFTED_SCHEMA = f"handcrafted-v1-d{len(FEATURE_NAMES)}"


def to_gray(tile: np.ndarray) -> np.ndarray:
    tile = np.asarray(tile, dtype=np.float64)
    if tile.ndim == 2:
        return tile
    return tile @ LUMA


def first_order_features(gray: np.ndarray) -> np.ndarray:
    x = np.asarray(gray, dtype=np.float64).ravel()
    if x.max() == x.min():
        mean = x[0]
        dev = np.zeros_like(x)
    else:
        mean = x.mean()
        dev = x - mean
    m2 = np.mean(dev ** 2)
    m3 = np.mean(dev ** 3)
    m4 = np.mean(dev ** 4)
    p10, p25, median, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    hist = np.bincount(np.clip(np.floor(x).astype(np.int64), 0, 255), minlength=256)
    p = hist[hist > 0] / x.size
    entropy = float(-(p * np.log2(p)).sum()) + 0.0
    skew = m3 / m2 ** 1.5 if m2 > 0 else 0.0
    kurt = m4 / m2 ** 2 if m2 > 0 else 0.0
    return np.array([
        mean, m2, np.sqrt(m2), x.min(), x.max(), x.max() - x.min(), median, p10, p90,
        p75 - p25, skew, kurt, np.sum(x * x), entropy, np.mean(np.abs(dev)),
        np.sqrt(np.mean(x * x)),
    ])


def quantize(gray: np.ndarray, levels: int = GLCM_LEVELS) -> np.ndarray:
    """Uniform binning of [0, 256) into ``levels`` bins."""
    q = np.floor(np.asarray(gray, dtype=np.float64) * (levels / 256.0)).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def glcm(q: np.ndarray, offset: tuple[int, int], levels: int = GLCM_LEVELS) -> np.ndarray:
    """Symmetric, normalized co-occurrence matrix for one (row, col) offset."""
    dy, dx = offset
    h, w = q.shape
    ys = slice(max(0, -dy), h - max(0, dy))
    xs = slice(max(0, -dx), w - max(0, dx))
    yt = slice(max(0, dy), h - max(0, -dy))
    xt = slice(max(0, dx), w - max(0, -dx))
    a = q[ys, xs].ravel()
    b = q[yt, xt].ravel()
    counts = np.bincount(a * levels + b, minlength=levels * levels).reshape(levels, levels)
    sym = (counts + counts.T).astype(np.float64)
    total = sym.sum()
    return sym / total if total > 0 else sym


def glcm_stats(p: np.ndarray) -> np.ndarray:
    n = p.shape[0]
    i, j = np.indices((n, n), dtype=np.float64)
    contrast = np.sum((i - j) ** 2 * p)
    mu_i = np.sum(i * p)
    mu_j = np.sum(j * p)
    var_i = np.sum((i - mu_i) ** 2 * p)
    var_j = np.sum((j - mu_j) ** 2 * p)
    if var_i > 1e-15 and var_j > 1e-15:
        corr = np.sum((i - mu_i) * (j - mu_j) * p) / np.sqrt(var_i * var_j)
    else:
        corr = 1.0
    energy = np.sum(p * p)
    homogeneity = np.sum(p / (1.0 + (i - j) ** 2))
    nz = p[p > 0]
    entropy = float(-(nz * np.log2(nz)).sum()) + 0.0
    return np.array([contrast, corr, energy, homogeneity, entropy])


def glcm_features(gray: np.ndarray, levels: int = GLCM_LEVELS,
                  offsets=GLCM_OFFSETS) -> np.ndarray:
    gray = np.asarray(gray)
    if gray.shape[0] < 2 or gray.shape[1] < 2:
        raise InputError("glcm_features needs a tile of at least 2x2")
    q = quantize(gray, levels)
    return np.concatenate([glcm_stats(glcm(q, off, levels)) for off in offsets])


def tile_features(tile: np.ndarray) -> np.ndarray:
    gray = to_gray(tile)
    return np.concatenate([first_order_features(gray), glcm_features(gray)])


# -- stores -----------------------------------------------------------------

@dataclass
class FeatureEntry:
    """Features of one slide: row i belongs to ``refs[i]``."""

    slide_id: str
    refs: list[TileRef]
    values: np.ndarray  # k x d float32
    schema_id: str = HANDCRAFTED_SCHEMA
    rgb_sum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pixel_count: int = 0

    @property
    def k(self) -> int:
        return int(self.values.shape[0])

    @property
    def d(self) -> int:
        return int(self.values.shape[1])


@dataclass
class FeatureStore:
    entries: dict[str, FeatureEntry]
    replacement: np.ndarray | None = None  # d-vector used by instance dropout
    schema_id: str = HANDCRAFTED_SCHEMA

    def __getitem__(self, slide_id: str) -> FeatureEntry:
        return self.entries[slide_id]

    def __contains__(self, slide_id: str) -> bool:
        return slide_id in self.entries


@dataclass(frozen=True)
class StainConfig:
    enabled: bool = True
    scope: str = "tile"  # "tile" or "slide"
    target: stainlab.StainStats | None = None


def _prepare_tiles(pyramid: ImagePyramid, refs, stain: StainConfig, source_stats=None):
    tiles = [extract(pyramid.levels[r.level], r) for r in refs]
    if not stain.enabled or not tiles:
        return tiles
    if stain.target is None:
        raise InputError("stain normalization enabled but no target stats given")
    if stain.scope == "slide":
        src = source_stats or stainlab.pooled_stats(tiles)
        return [stainlab.normalize(t, stain.target, source=src) for t in tiles]
    if stain.scope != "tile":
        raise InputError(f"unknown stain scope {stain.scope!r}")
    return [stainlab.normalize(t, stain.target) for t in tiles]


def featurize_slide(pyramid: ImagePyramid, refs: list[TileRef],
                    stain: StainConfig = StainConfig(enabled=False),
                    source_stats: stainlab.StainStats | None = None) -> FeatureEntry:
    """Normalize (optionally) then featurize each tile, in ``refs`` order.

    In slide scope one transform is applied to every tile; its source
    statistics are ``source_stats`` when given, else pooled over ``refs``.
    """
    for r in refs:
        if r.level not in pyramid.levels:
            raise InputError(f"slide {pyramid.slide_id} has no level {r.level}")
    tiles = _prepare_tiles(pyramid, refs, stain, source_stats)
    d = len(FEATURE_NAMES)
    values = np.zeros((len(tiles), d), dtype=np.float32)
    rgb_sum = np.zeros(3)
    px = 0
    for i, t in enumerate(tiles):
        values[i] = tile_features(t)
        rgb_sum += t.reshape(-1, 3).sum(axis=0)
        px += t.shape[0] * t.shape[1]
    return FeatureEntry(pyramid.slide_id, list(refs), values, HANDCRAFTED_SCHEMA, rgb_sum, px)


def replacement_vector(mean_rgb, tile_size: int) -> np.ndarray:
    """Features of a uniform tile filled with ``mean_rgb`` (instance-dropout stand-in)."""
    color = np.clip(np.rint(np.asarray(mean_rgb, dtype=np.float64)), 0, 255).astype(np.uint8)
    tile = np.broadcast_to(color, (tile_size, tile_size, 3))
    return tile_features(tile).astype(np.float32)


def dataset_mean_rgb(entries) -> np.ndarray:
    total = sum((e.rgb_sum for e in entries), np.zeros(3))
    count = sum(e.pixel_count for e in entries)
    if count == 0:
        raise InputError("no pixels to average")
    return total / count


def mean_feature_vector(store: FeatureStore) -> np.ndarray:
    rows = [e.values for e in store.entries.values() if e.k]
    return np.concatenate(rows).astype(np.float64).mean(axis=0).astype(np.float32)


# -- file format --------------------------------------------------------------

def encode_entry(entry: FeatureEntry) -> bytes:
    header = {
        "schema_id": entry.schema_id,
        "k": entry.k,
        "d": entry.d,
        "slide_id": entry.slide_id,
        "tiles": [[r.level, r.x, r.y, r.size] for r in entry.refs],
    }
    payload = np.ascontiguousarray(entry.values, dtype="<f4").tobytes()
    return (json.dumps(header, sort_keys=True) + "\n").encode("utf-8") + payload


def decode_entry(data: bytes) -> FeatureEntry:
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("feature file header: no newline terminator found (byte 0)")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
        schema_id, k, d, slide_id = header["schema_id"], int(header["k"]), int(header["d"]), header["slide_id"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"feature file header malformed at byte 0..{nl}: {exc}") from exc
    if k < 0 or d < 1:
        raise FormatError(f"feature file header at byte 0: invalid shape k={k}, d={d}")
    start = nl + 1
    expected = 4 * k * d
    actual = len(data) - start
    if actual != expected:
        raise FormatError(
            f"feature payload at byte {start}: expected {expected} bytes (k={k}, d={d}), got {actual}")
    values = np.frombuffer(data[start:], dtype="<f4").reshape(k, d).astype(np.float32)
    tiles = header.get("tiles")
    if tiles is None:
        refs = [TileRef(slide_id, "na", i, 0, 0) for i in range(k)]
    else:
        if len(tiles) != k:
            raise FormatError(f"feature file header: {len(tiles)} tiles listed but k={k}")
        refs = [TileRef(slide_id, lv, int(y), int(x), int(s)) for lv, x, y, s in tiles]
    return FeatureEntry(slide_id, refs, values, schema_id)


def write_entry(path: str | Path, entry: FeatureEntry) -> None:
    Path(path).write_bytes(encode_entry(entry))


def ingest_features(path: str | Path) -> FeatureEntry:
    return decode_entry(Path(path).read_bytes())


REPLACEMENT_ID = "__replacement__"


def save_store(store: FeatureStore, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for sid in sorted(store.entries):
        p = out_dir / f"{sid}.feat"
        write_entry(p, store.entries[sid])
        written.append(p)
    if store.replacement is not None:
        p = out_dir / f"{REPLACEMENT_ID}.feat"
        rep = FeatureEntry(REPLACEMENT_ID, [], store.replacement.reshape(1, -1).astype(np.float32),
                           store.schema_id)
        rep.refs = [TileRef(REPLACEMENT_ID, "na", 0, 0, 0)]
        write_entry(p, rep)
        written.append(p)
    return written


def load_store(directory: str | Path) -> FeatureStore:
    directory = Path(directory)
    entries: dict[str, FeatureEntry] = {}
    replacement = None
    schemas = set()
    for p in sorted(directory.glob("*.feat")):
        e = ingest_features(p)
        schemas.add(e.schema_id)
        if e.slide_id == REPLACEMENT_ID:
            replacement = e.values[0].copy()
        else:
            entries[e.slide_id] = e
    if len(schemas) > 1:
        raise FormatError(f"mixed feature schemas in {directory}: {sorted(schemas)}")
    schema = schemas.pop() if schemas else HANDCRAFTED_SCHEMA
    return FeatureStore(entries, replacement, schema)


def entry_to_csv(entry: FeatureEntry, names=None) -> str:
    names = names or [f"f{i}" for i in range(entry.d)]
    lines = [",".join(["slide_id", "level", "x", "y", "size", *names])]
    for r, row in zip(entry.refs, entry.values):
        lines.append(",".join([entry.slide_id, r.level, str(r.x), str(r.y), str(r.size),
                               *(repr(float(v)) for v in row)]))
    return "\n".join(lines) + "\n"
