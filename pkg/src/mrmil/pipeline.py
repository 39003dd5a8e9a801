"""Two-stage orchestration shared by the CLI and the experiment scripts.

Stage 1 (detect) trains a binary attention-MIL model on every 5x tile.  Its
malignant attention column and instance embeddings drive tile selection.
Stage 2 (classify) takes the selected 5x tiles, projects them to 10x, splits
each projection into four sub-tiles and trains the grading model on those.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import ConfigError, InputError, SchemaMismatch
from . import features as feat
from . import milcore, netpbm, selector, stainlab, synthgen, tiler
from .features import FeatureEntry, FeatureStore, StainConfig
from .milcore import Bag, MilModel, TrainConfig
from .selector import SelectionConfig, SelectionPlan
from .synthgen import DatasetTemplate, ImagePyramid
from .tiler import TileConfig, TileRef

TASKS = {
    "detect": ("BN", "MAL"),
    "grade3": ("BN", "LG", "HG"),
    "gg6": ("BN", "GG1", "GG2", "GG3", "GG4", "GG5"),
}
STAGES = ("detect", "classify", "single")


def label_index(label: str, task: str) -> int:
    if task == "detect":
        return 0 if label == "BN" else 1
    if task == "grade3":
        if label in ("BN", "LG", "HG"):
            return ("BN", "LG", "HG").index(label)
        if label == "GG1":
            return 1
        if label in ("GG2", "GG3", "GG4", "GG5"):
            return 2
    if task == "gg6" and label in TASKS["gg6"]:
        return TASKS["gg6"].index(label)
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    raise ConfigError(f"label {label!r} is not valid for task {task!r}")


@dataclass
class PipelineConfig:
    task: str = "grade3"
    seed: int = 0
    split_seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    desk: DatasetTemplate = field(default_factory=DatasetTemplate)
    tile: TileConfig = field(default_factory=lambda: TileConfig(tile_size=64))
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr_head=1e-3, epochs=40))
    # off by default: synthetic slides carry no stain variability, and slide-scope
    # matching shifts the stroma colour with lesion fraction (a label shortcut)
    stain_enabled: bool = False
    stain_scope: str = "tile"
    # per-class branches are not tied to their class through the flattened
    # classifier, so for n=2 the "malignant column" is arbitrary; one branch is not
    detect_per_class_attention: bool = False
    detect_level: str = "5x"
    classify_level: str = "10x"

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {sorted(TASKS)}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ConfigError("split ratios must be non-negative and sum to 1")
        self.tile.validate()
        self.selection.validate()
        self.train.validate()


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_jsonable(cfg)


def _texture(d) -> synthgen.TextureSpec:
    return synthgen.TextureSpec(tuple(d["mean_rgb"]), tuple(d["std_rgb"]),
                                d.get("frequency", 0.0), d.get("amplitude", 0.0))


def config_from_dict(d: dict) -> PipelineConfig:
    try:
        return _config_from_dict(d)
    except TypeError as exc:  # unknown field inside a nested section
        raise ConfigError(f"invalid config: {exc}") from exc


def _config_from_dict(d: dict) -> PipelineConfig:
    base = PipelineConfig()
    kw = {}
    for key in ("task", "seed", "split_seed", "stain_enabled", "stain_scope", "detect_per_class_attention",
                "detect_level", "classify_level"):
        if key in d:
            kw[key] = d[key]
    if "split_ratios" in d:
        kw["split_ratios"] = tuple(d["split_ratios"])
    if "tile" in d:
        t = dict(d["tile"])
        if "hue_threshold" in t:
            t["hue_threshold"] = tuple(t["hue_threshold"])
        kw["tile"] = dataclasses.replace(base.tile, **t)
    if "selection" in d:
        kw["selection"] = dataclasses.replace(base.selection, **d["selection"])
    if "train" in d:
        kw["train"] = dataclasses.replace(base.train, **d["train"])
    if "desk" in d:
        s = dict(d["desk"])
        for key in ("lesion_count_range", "lesion_radius_range"):
            if key in s:
                s[key] = tuple(s[key])
        if "background_texture" in s:
            s["background_texture"] = _texture(s["background_texture"])
        if "lesion_textures" in s:
            s["lesion_textures"] = {k: _texture(v) for k, v in s["lesion_textures"].items()}
        kw["desk"] = dataclasses.replace(base.desk, **s)
    unknown = set(d) - {f.name for f in dataclasses.fields(PipelineConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = dataclasses.replace(base, **kw)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def config_hash(cfg: PipelineConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# -- splits ------------------------------------------------------------------

def split_slides(labels: dict[str, str], ratios=(0.7, 0.1, 0.2), seed: int = 0,
                 groups: dict[str, str] | None = None) -> dict[str, str]:
    """Stratified train/val/test assignment.

    With ``groups`` (slide -> patient) whole groups move together and are
    stratified by the highest label in the group.
    """
    groups = groups or {sid: sid for sid in labels}
    members: dict[str, list[str]] = {}
    for sid in sorted(labels):
        members.setdefault(groups[sid], []).append(sid)
    rank = {lab: i for i, lab in enumerate(("BN", "LG", "HG", "GG1", "GG2", "GG3", "GG4", "GG5"))}
    strata: dict[str, list[str]] = {}
    for g in sorted(members):
        top = max((labels[s] for s in members[g]), key=lambda lab: rank.get(lab, -1))
        strata.setdefault(top, []).append(g)
    rng = np.random.default_rng(seed)
    out = {}
    for lab in sorted(strata):
        gs = strata[lab]
        perm = [gs[i] for i in rng.permutation(len(gs))]
        n_train = int(round(ratios[0] * len(gs)))
        n_val = int(round(ratios[1] * len(gs)))
        for i, g in enumerate(perm):
            part = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            for sid in members[g]:
                out[sid] = part
    return out


# -- slide sources --------------------------------------------------------------

class SlideSource:
    """Lazy access to pyramids, from synthetic configs or a manifest on disk."""

    def __init__(self, ids: list[str], labels: dict[str, str], loader: Callable[[str], ImagePyramid],
                 reference: Callable[[str], np.ndarray] | None = None):
        self.ids = ids
        self.labels = labels
        self._loader = loader
        self._reference = reference

    def __iter__(self):
        return iter(self.ids)

    def load(self, slide_id: str) -> ImagePyramid:
        return self._loader(slide_id)

    def reference_tile(self, level: str, tile_size: int) -> np.ndarray:
        if self._reference is not None:
            return self._reference(level)
        return default_reference_tile(self, level, tile_size)

    @classmethod
    def synthetic(cls, configs: list[synthgen.SynthConfig]) -> "SlideSource":
        by_id = {c.slide_id: c for c in configs}
        return cls([c.slide_id for c in configs], {c.slide_id: c.class_label for c in configs},
                   lambda sid: synthgen.generate_slide(by_id[sid]))

    @classmethod
    def from_manifest(cls, manifest: synthgen.DatasetManifest, reference_paths: dict | None = None) -> "SlideSource":
        by_id = {e.slide_id: e for e in manifest.entries}
        reference_paths = reference_paths or manifest.reference_tiles
        ref = None
        if reference_paths:
            def ref(level):
                if level not in reference_paths:
                    raise InputError(f"no reference tile for level {level}")
                return netpbm.read(manifest.resolve(reference_paths[level]))
        return cls([e.slide_id for e in manifest.entries], manifest.labels(),
                   lambda sid: manifest.load_pyramid(by_id[sid]), ref)


def reference_region(pyr: ImagePyramid, level: str, tile_size: int) -> TileRef:
    h, w = pyr.levels[level].shape[:2]
    return TileRef(pyr.slide_id, level, (h - tile_size) // 2, (w - tile_size) // 2, tile_size)


def default_reference_tile(source: SlideSource, level: str, tile_size: int) -> np.ndarray:
    """Centre tile of the first benign slide (first slide if none is benign)."""
    sid = next((s for s in source.ids if source.labels[s] == "BN"), source.ids[0])
    pyr = source.load(sid)
    return tiler.extract(pyr.levels[level], reference_region(pyr, level, tile_size)).copy()


# -- per-stage work ---------------------------------------------------------------

def tile_slide(pyr: ImagePyramid, level: str, cfg: TileConfig) -> list[tuple[TileRef, float]]:
    raster = pyr.levels[level]
    mask = tiler.tissue_mask(raster, cfg, level)
    return tiler.tile_grid(raster.shape[:2], mask, cfg, slide_id=pyr.slide_id)


def _stain_for(cfg: PipelineConfig, target: stainlab.StainStats | None) -> StainConfig:
    return StainConfig(enabled=cfg.stain_enabled, scope=cfg.stain_scope, target=target)


def featurize_refs(pyr: ImagePyramid, refs: list[TileRef], stain: StainConfig,
                   slide_refs: list[TileRef] | None = None) -> FeatureEntry:
    """Featurize ``refs``; in slide scope the lab statistics are pooled over
    ``slide_refs`` (the slide's tissue grid at that level) rather than over
    the tiles being featurized."""
    src = None
    if stain.enabled and stain.scope == "slide" and slide_refs:
        src = stainlab.pooled_stats([tiler.extract(pyr.levels[r.level], r) for r in slide_refs])
    return feat.featurize_slide(pyr, refs, stain, source_stats=src)


def reference_stats(source: SlideSource, level: str, cfg: PipelineConfig) -> stainlab.StainStats | None:
    if not cfg.stain_enabled:
        return None
    size = cfg.tile.tile_size
    stats = stainlab.compute_stats(source.reference_tile(level, size))
    if stats.degenerate:
        raise ConfigError("reference tile has zero colour variance in some channel")
    return stats


def finish_store(entries: dict[str, FeatureEntry], tile_size: int) -> FeatureStore:
    nonempty = [e for e in entries.values() if e.pixel_count]
    replacement = None
    if nonempty:
        replacement = feat.replacement_vector(feat.dataset_mean_rgb(nonempty), tile_size)
    return FeatureStore(entries, replacement, feat.HANDCRAFTED_SCHEMA)


def featurize_detection(source: SlideSource, cfg: PipelineConfig,
                        tiles: dict[str, list[TileRef]] | None = None,
                        target: stainlab.StainStats | None = None) -> tuple[FeatureStore, dict]:
    """All tissue tiles of every slide at the detection level."""
    level = cfg.detect_level
    target = target if target is not None else reference_stats(source, level, cfg)
    stain = _stain_for(cfg, target)
    entries, grids = {}, {}
    for sid in source:
        pyr = source.load(sid)
        refs = tiles[sid] if tiles is not None else [r for r, _ in tile_slide(pyr, level, cfg.tile)]
        grids[sid] = refs
        entries[sid] = featurize_refs(pyr, refs, stain, slide_refs=refs)
    return finish_store(entries, cfg.tile.tile_size), grids


def classification_refs(plan: SelectionPlan, dims_10x: tuple[int, int]) -> list[TileRef]:
    """10x sub-tiles (four per selected 5x tile), de-duplicated, in (y, x) order."""
    out = {}
    for t in plan.tiles:
        ref = t.ref
        if ref.level == "5x":
            proj = tiler.project_tile(ref, dims_10x)
            subs = tiler.split_subtiles(proj, 2)
        else:
            subs = [ref]
        for s in subs:
            out[(s.y, s.x, s.size)] = TileRef(s.slide_id, s.level, s.y, s.x, s.size)
    return [out[k] for k in sorted(out)]


def featurize_classification(source: SlideSource, plans: dict[str, SelectionPlan], cfg: PipelineConfig,
                             target: stainlab.StainStats | None = None) -> FeatureStore:
    level = cfg.classify_level
    target = target if target is not None else reference_stats(source, level, cfg)
    stain = _stain_for(cfg, target)
    entries = {}
    for sid in source:
        if sid not in plans:
            continue
        pyr = source.load(sid)
        refs = classification_refs(plans[sid], pyr.levels[level].shape[:2])
        slide_refs = None
        if stain.enabled and stain.scope == "slide":
            slide_refs = [r for r, _ in tile_slide(pyr, level, cfg.tile)] or refs
        entries[sid] = featurize_refs(pyr, refs, stain, slide_refs=slide_refs)
    return finish_store(entries, cfg.tile.tile_size)


def tile_truth(source: SlideSource, grids: dict[str, list[TileRef]]) -> dict[str, np.ndarray]:
    out = {}
    for sid, refs in grids.items():
        pyr = source.load(sid)
        out[sid] = np.array([synthgen.tile_is_positive(pyr, r.level, r.x, r.y, r.size) for r in refs])
    return out


def make_bags(store: FeatureStore, labels: dict[str, str], task: str, ids: Iterable[str]) -> list[Bag]:
    bags = []
    for sid in ids:
        e = store.entries.get(sid)
        if e is None or e.k == 0:
            continue
        bags.append(Bag(sid, e.values.astype(np.float64), label_index(labels[sid], task), list(e.refs)))
    return bags


def stage_task(stage: str, cfg: PipelineConfig) -> str:
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}")
    return "detect" if stage == "detect" else cfg.task


def train_stage(store: FeatureStore, labels: dict[str, str], split: dict[str, str], stage: str,
                cfg: PipelineConfig, train_cfg: TrainConfig | None = None) -> milcore.TrainResult:
    task = stage_task(stage, cfg)
    ids = sorted(store.entries)
    train_bags = make_bags(store, labels, task, [s for s in ids if split.get(s) == "train"])
    val_bags = make_bags(store, labels, task, [s for s in ids if split.get(s) == "val"])
    names = TASKS[task]
    train_cfg = train_cfg or cfg.train
    if stage == "detect":
        train_cfg = dataclasses.replace(train_cfg, per_class_attention=cfg.detect_per_class_attention)
    return milcore.train(train_bags, train_cfg, len(names), store.replacement,
                         val_bags, class_names=names, schema_id=store.schema_id)


def check_schema(model: MilModel, store: FeatureStore) -> None:
    if model.schema_id and store.schema_id and model.schema_id != store.schema_id:
        raise SchemaMismatch(f"model schema {model.schema_id} != feature schema {store.schema_id}")


@dataclass
class SlideAttention:
    slide_id: str
    refs: list[TileRef]
    alpha: np.ndarray
    embeddings: np.ndarray
    probs: np.ndarray
    bag_repr: np.ndarray


def attend(model: MilModel, store: FeatureStore, ids: Iterable[str] | None = None) -> dict[str, SlideAttention]:
    check_schema(model, store)
    out = {}
    for sid in (sorted(store.entries) if ids is None else ids):
        e = store.entries[sid]
        if e.k == 0:
            continue
        res = milcore.forward(model, e.values.astype(np.float64))
        alpha = res.alpha if res.alpha is not None else np.full((e.k, 1), 1.0 / e.k)
        out[sid] = SlideAttention(sid, list(e.refs), alpha, res.embeddings, res.probs, res.bag_repr)
    return out


def tile_blue_ratios(pyr: ImagePyramid, refs: list[TileRef]) -> np.ndarray:
    return np.array([stainlab.mean_blue_ratio(tiler.extract(pyr.levels[r.level], r)) for r in refs])


def select_all(att: dict[str, SlideAttention], cfg: SelectionConfig,
               source: SlideSource | None = None) -> dict[str, SelectionPlan]:
    plans = {}
    fit = None
    if cfg.method == "att_cluster" and cfg.fit_scope == "dataset":
        fit = selector.fit_dataset([att[s].embeddings for s in sorted(att)], cfg)
    for sid, a in att.items():
        col = min(cfg.attention_column, a.alpha.shape[1] - 1)
        slide_cfg = dataclasses.replace(cfg, attention_column=col)
        br = None
        if cfg.method == "blue_ratio":
            if source is None:
                raise ConfigError("blue_ratio selection needs access to the slide pixels")
            br = tile_blue_ratios(source.load(sid), a.refs)
        plans[sid] = selector.select(sid, a.refs, a.alpha[:, col], a.embeddings, slide_cfg, br, fit)
    return plans


def blue_ratio_plans(source: SlideSource, grids: dict[str, list[TileRef]], cfg: SelectionConfig) -> dict[str, SelectionPlan]:
    """br selection: no detection model, tiles ranked by mean blue ratio."""
    plans = {}
    for sid, refs in grids.items():
        br = tile_blue_ratios(source.load(sid), refs)
        plans[sid] = selector.select(sid, refs, None, None, cfg, br)
    return plans


def evaluate_model(model: MilModel, store: FeatureStore, labels: dict[str, str], task: str,
                   ids: Iterable[str]):
    from . import metrics

    check_schema(model, store)
    if len(TASKS[task]) != model.n_classes:
        raise SchemaMismatch(f"task {task} has {len(TASKS[task])} classes, model has {model.n_classes}")
    bags = make_bags(store, labels, task, ids)
    if not bags:
        raise InputError("no bags to evaluate")
    probs = milcore.predict(model, bags)
    y = np.array([b.label for b in bags])
    report, cm = metrics.evaluate(y, probs, TASKS[task])
    return report, cm, bags, probs


def export_embeddings(model: MilModel, bags: list[Bag], labels_by_slide: dict[str, str] | None = None) -> str:
    """CSV of slide_id, label, flattened bag representation."""
    width = model.n_att * model.d_e
    lines = ["slide_id,label," + ",".join(f"z{i}" for i in range(width))]
    for b in bags:
        res = milcore.forward(model, b.V)
        lab = labels_by_slide[b.slide_id] if labels_by_slide else str(b.label)
        lines.append(f"{b.slide_id},{lab}," + ",".join(f"{v:.9e}" for v in res.bag_repr.ravel()))
    return "\n".join(lines) + "\n"


def parse_embeddings(text: str) -> dict[str, tuple[str, np.ndarray]]:
    out = {}
    for line in text.strip().splitlines()[1:]:
        parts = line.split(",")
        out[parts[0]] = (parts[1], np.array([float(v) for v in parts[2:]]))
    return out
