"""Command line entry point: one subcommand per pipeline stage.

Every subcommand reads and writes files only, writes a ``run_record.json``
into its output directory and, on failure, prints ``{"error": code,
"message": ...}`` to stderr and exits non-zero.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import MissingArtifact, MrmilError, SchemaMismatch
from . import features as feat
from . import milcore, netpbm, pipeline, selector, stainlab, synthgen, tiler
from .pipeline import PipelineConfig, SlideSource

EXIT_ERROR = 2
EXIT_IO = 3


@dataclass
class RunRecord:
    command: str
    argv: list[str]
    config_hash: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_tree(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and f.name != "run_record.json":
                    out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _config(args) -> PipelineConfig:
    cfg = pipeline.load_config(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "task", None):
        over["task"] = args.task
    if over:
        cfg = dataclasses.replace(cfg, **over)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed),
                                  selection=dataclasses.replace(cfg.selection, seed=args.seed))
    cfg.validate()
    return cfg


def _manifest(path) -> synthgen.DatasetManifest:
    return synthgen.DatasetManifest.load(_require(path, "manifest"))


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    synthgen.generate_dataset(args.n_per_class, cfg.seed, out, cfg.desk)
    return [out]


def cmd_tile(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    manifest = _manifest(args.manifest)
    source = SlideSource.from_manifest(manifest)
    rows = []
    masks = out / "masks"
    masks.mkdir(parents=True, exist_ok=True)
    for sid in source:
        pyr = source.load(sid)
        raster = pyr.levels[args.level]
        mask = tiler.tissue_mask(raster, cfg.tile, args.level)
        netpbm.write_pgm(masks / f"{sid}_{args.level}.pgm", mask.mask * 255)
        rows.extend(tiler.tile_grid(raster.shape[:2], mask, cfg.tile, slide_id=sid))
    _write(out / f"tiles_{args.level}.csv", tiler.tiles_to_csv(rows))
    return [out]


def _tiles_by_slide(rows) -> dict[str, list[tiler.TileRef]]:
    out: dict[str, list[tiler.TileRef]] = {}
    for ref, _ in rows:
        out.setdefault(ref.slide_id, []).append(ref)
    return out


def cmd_featurize(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    manifest = _manifest(args.manifest)
    source = SlideSource.from_manifest(manifest)
    if args.plan:
        plans = selector.plans_from_csv(_require(args.plan, "selection plan").read_text())
        level = args.level or cfg.classify_level
        cfg = dataclasses.replace(cfg, classify_level=level)
        target = pipeline.reference_stats(source, level, cfg)
        store = pipeline.featurize_classification(source, plans, cfg, target)
    else:
        tiles_path = _require(args.tiles, "tile index")
        grids = _tiles_by_slide(tiler.tiles_from_csv(tiles_path.read_text()))
        level = args.level or cfg.detect_level
        for sid in source.ids:
            grids.setdefault(sid, [])
        cfg = dataclasses.replace(cfg, detect_level=level)
        target = pipeline.reference_stats(source, level, cfg)
        store, _ = pipeline.featurize_detection(source, cfg, tiles=grids, target=target)
    if target is not None:
        target.save(out / "stain_reference.json")
    feat.save_store(store, out)
    return [out]


def _load_store(path) -> feat.FeatureStore:
    return feat.load_store(_require(path, "feature directory"))


def cmd_train(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    manifest = _manifest(args.manifest)
    labels = manifest.labels()
    store = _load_store(args.features)
    task = pipeline.stage_task(args.stage, cfg)
    for sid in store.entries:
        pipeline.label_index(labels[sid], task)
    split = pipeline.split_slides(labels, cfg.split_ratios, cfg.split_seed)
    train_cfg = cfg.train
    if args.epochs:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    if args.no_instance_dropout:
        train_cfg = dataclasses.replace(train_cfg, instance_dropout_p=0.0)
    result = pipeline.train_stage(store, labels, split, args.stage, cfg, train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    milcore.save_checkpoint(result.model, out / "model.ckpt")
    _write(out / "train_log.csv", milcore.log_to_csv(result.log))
    _write(out / "split.json", json.dumps(split, indent=2, sort_keys=True) + "\n")
    return [out]


def _attention_csv(att: dict[str, pipeline.SlideAttention]) -> str:
    n = max((a.alpha.shape[1] for a in att.values()), default=1)
    lines = ["slide_id,level,x,y,size," + ",".join(f"alpha_{c}" for c in range(n))]
    for sid in sorted(att):
        a = att[sid]
        for r, row in zip(a.refs, a.alpha):
            lines.append(f"{sid},{r.level},{r.x},{r.y},{r.size}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def _read_attention(directory: Path) -> dict[str, pipeline.SlideAttention]:
    import csv

    rows: dict[str, list] = {}
    with open(_require(directory / "attention.csv", "attention table"), newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["slide_id"], []).append(rec)
    emb = feat.load_store(directory / "embeddings")
    out = {}
    for sid, recs in rows.items():
        refs = [tiler.TileRef(sid, r["level"], int(r["y"]), int(r["x"]), int(r["size"])) for r in recs]
        cols = sorted(k for k in recs[0] if k.startswith("alpha_"))
        alpha = np.array([[float(r[c]) for c in cols] for r in recs])
        out[sid] = pipeline.SlideAttention(sid, refs, alpha, emb[sid].values.astype(np.float64),
                                           np.zeros(0), np.zeros(0))
    return out


def cmd_attend(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    model = milcore.load_checkpoint(_require(args.model, "model checkpoint"))
    store = _load_store(args.features)
    manifest = _manifest(args.manifest)
    labels = manifest.labels()
    att = pipeline.attend(model, store)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "attention.csv", _attention_csv(att))
    emb = feat.FeatureStore({
        sid: feat.FeatureEntry(sid, a.refs, a.embeddings.astype(np.float32), f"embedding-{model.schema_id}-d{model.d_e}")
        for sid, a in att.items()}, None, f"embedding-{model.schema_id}-d{model.d_e}")
    feat.save_store(emb, out / "embeddings")
    pred = ["slide_id,label," + ",".join(f"p_{c}" for c in model.class_names)]
    for sid in sorted(att):
        pred.append(f"{sid},{labels.get(sid, '')}," + ",".join(repr(float(p)) for p in att[sid].probs))
    _write(out / "predictions.csv", "\n".join(pred) + "\n")
    bags = pipeline.make_bags(store, labels, "detect" if model.n_classes == 2 else cfg.task, sorted(att))
    _write(out / "bag_embeddings.csv", pipeline.export_embeddings(model, bags, labels))
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    by_id = {e.slide_id: e for e in manifest.entries}
    col = min(cfg.selection.attention_column, model.n_att - 1)
    for sid in sorted(att):
        a = att[sid]
        level = a.refs[0].level
        dims = netpbm.read(manifest.resolve(by_id[sid].level_paths[level])).shape[:2]
        netpbm.write_pgm(heat / f"{sid}.pgm", selector.attention_heatmap(a.refs, a.alpha[:, col], dims, cfg.tile.stride))
        lines = ["x,y,size,attention"] + [f"{r.x},{r.y},{r.size},{float(v)!r}" for r, v in zip(a.refs, a.alpha[:, col])]
        _write(heat / f"{sid}.csv", "\n".join(lines) + "\n")
    return [out]


def cmd_select(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    sel = dataclasses.replace(cfg.selection, method=args.method or cfg.selection.method)
    sel.validate()
    if sel.method == "blue_ratio":
        manifest = _manifest(args.manifest)
        source = SlideSource.from_manifest(manifest)
        if args.attention:
            att = _read_attention(Path(args.attention))
            grids = {sid: a.refs for sid, a in att.items()}
        else:
            grids = _tiles_by_slide(tiler.tiles_from_csv(_require(args.tiles, "tile index").read_text()))
        plans = pipeline.blue_ratio_plans(source, grids, sel)
    else:
        if not args.attention:
            raise MissingArtifact("attention-based selection needs --attention")
        plans = pipeline.select_all(_read_attention(Path(args.attention)), sel)
    ordered = [plans[s] for s in sorted(plans)]
    _write(out / "selection_plan.csv", selector.plans_to_csv(ordered))
    meta = {p.slide_id: {"budget": p.budget, **p.meta} for p in ordered}
    _write(out / "selection_meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [out]


def cmd_evaluate(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    model = milcore.load_checkpoint(_require(args.model, "model checkpoint"))
    store = _load_store(args.features)
    manifest = _manifest(args.manifest)
    labels = manifest.labels()
    task = "detect" if model.n_classes == 2 and cfg.task != "detect" and args.stage == "detect" else cfg.task
    if args.stage == "detect":
        task = "detect"
    split = pipeline.split_slides(labels, cfg.split_ratios, cfg.split_seed)
    ids = [s for s in sorted(store.entries) if args.split == "all" or split.get(s) == args.split]
    report, cm, bags, probs = pipeline.evaluate_model(model, store, labels, task, ids)
    _write(out / "metrics.json", report.to_json())
    _write(out / "confusion.csv", cm.to_csv())
    lines = ["slide_id,label," + ",".join(f"p_{c}" for c in pipeline.TASKS[task])]
    for b, p in zip(bags, probs):
        lines.append(f"{b.slide_id},{labels[b.slide_id]}," + ",".join(repr(float(v)) for v in p))
    _write(out / "predictions.csv", "\n".join(lines) + "\n")
    return [out]


def cmd_gradcheck(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    rng = np.random.default_rng(cfg.seed)
    reports = []
    for i in range(args.n_configs):
        dims = {"k": int(rng.integers(1, 9)), "d": int(rng.integers(1, 17)), "d_e": int(rng.integers(2, 17)),
                "h": int(rng.integers(1, 9)), "n": int(rng.integers(2, 4))}
        reports.append(milcore.gradcheck(dims, seed=cfg.seed * 1000 + i))
    doc = {
        "passed": all(r.passed for r in reports),
        "max_rel_error": max(r.max_rel_error for r in reports),
        "tolerance": reports[0].tolerance,
        "configs": [dataclasses.asdict(r) for r in reports],
    }
    _write(out / "gradcheck.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if not doc["passed"]:
        raise MrmilError(f"gradient check failed: max relative error {doc['max_rel_error']:.3e}")
    return [out]


def cmd_export_embeddings(args, cfg: PipelineConfig, out: Path) -> list[Path]:
    model = milcore.load_checkpoint(_require(args.model, "model checkpoint"))
    store = _load_store(args.features)
    pipeline.check_schema(model, store)
    labels = _manifest(args.manifest).labels()
    ids = [s for s in sorted(store.entries) if not args.label or labels[s] == args.label]
    task = "detect" if model.n_classes == 2 else cfg.task
    bags = pipeline.make_bags(store, labels, task, ids)
    _write(out / "embeddings.csv", pipeline.export_embeddings(model, bags, labels))
    return [out]


COMMANDS = {
    "synth": cmd_synth, "tile": cmd_tile, "featurize": cmd_featurize, "train": cmd_train,
    "attend": cmd_attend, "select": cmd_select, "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck, "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrmil", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="PipelineConfig JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--task", choices=sorted(pipeline.TASKS))
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    sp = add("synth", "generate a synthetic dataset")
    sp.add_argument("--n-per-class", type=int, default=10)
    sp = add("tile", "tissue masks and tile index")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--level", default="5x", choices=synthgen.LEVELS)
    sp = add("featurize", "tile features (from a tile index or a selection plan)")
    sp.add_argument("--manifest", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--tiles")
    g.add_argument("--plan")
    sp.add_argument("--level", choices=synthgen.LEVELS)
    sp = add("train", "train a stage model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--stage", required=True, choices=pipeline.STAGES)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--no-instance-dropout", action="store_true")
    sp = add("attend", "attention maps, embeddings and predictions")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True)
    sp = add("select", "choose tiles for the classification stage")
    sp.add_argument("--method", choices=selector.METHODS)
    sp.add_argument("--attention")
    sp.add_argument("--manifest")
    sp.add_argument("--tiles")
    sp = add("evaluate", "metrics on a split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--stage", default="classify", choices=pipeline.STAGES)
    sp.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    sp = add("gradcheck", "finite-difference check of the analytic gradients")
    sp.add_argument("--n-configs", type=int, default=50)
    sp = add("export-embeddings", "bag representations as CSV")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--label", help="only slides with this label")
    return p


def _input_paths(args) -> list[str]:
    keys = ("config", "manifest", "tiles", "plan", "features", "model", "attention")
    return [getattr(args, k) for k in keys if getattr(args, k, None)]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = _digest_tree(_input_paths(args))
        outputs = COMMANDS[args.command](args, cfg, out)
        record = RunRecord(args.command, argv, pipeline.config_hash(cfg), cfg.seed, inputs,
                           _digest_tree(outputs), started, time.time())
        _write(out / "run_record.json", json.dumps(dataclasses.asdict(record), indent=2, sort_keys=True) + "\n")
    except MrmilError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    except KeyError as exc:
        print(json.dumps({"error": "input_error", "message": f"missing key {exc}"}), file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(json.dumps({"error": "io_error", "message": str(exc)}), file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
