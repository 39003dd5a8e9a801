"""In-memory synthetic experiments: detection, localization, dropout ablation
and the two-stage versus single-stage comparison."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, pipeline, synthgen
from .pipeline import PipelineConfig, SlideSource


def build_source(counts: dict[str, int], base_seed: int,
                 template: synthgen.DatasetTemplate | None = None) -> SlideSource:
    return SlideSource.synthetic(synthgen.dataset_configs(counts, base_seed, template))


@dataclass
class DetectionRun:
    model: object
    store: object
    grids: dict
    split: dict
    truth: dict
    attention: dict
    report: metrics.MetricsReport
    train_seconds: float
    total_seconds: float
    log: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)

    def ids(self, part: str, malignant_only: bool = False) -> list[str]:
        return [s for s in sorted(self.split) if self.split[s] == part
                and (not malignant_only or self.labels[s] != "BN")]


def run_detection(source: SlideSource, cfg: PipelineConfig, store=None, grids=None,
                  train_cfg=None) -> DetectionRun:
    t0 = time.perf_counter()
    if store is None:
        store, grids = pipeline.featurize_detection(source, cfg)
    split = pipeline.split_slides(source.labels, cfg.split_ratios, cfg.split_seed)
    t1 = time.perf_counter()
    result = pipeline.train_stage(store, source.labels, split, "detect", cfg, train_cfg)
    t2 = time.perf_counter()
    test_ids = [s for s in sorted(split) if split[s] == "test"]
    report, _, _, _ = pipeline.evaluate_model(result.model, store, source.labels, "detect", test_ids)
    att = pipeline.attend(result.model, store)
    truth = pipeline.tile_truth(source, grids)
    return DetectionRun(result.model, store, grids, split, truth, att, report, t2 - t1,
                        time.perf_counter() - t0, result.log, labels=dict(source.labels))


def attention_mass_ratio(alpha: np.ndarray, positive: np.ndarray) -> float:
    """Attention mass on truth-positive tiles divided by the uniform share k_pos / k."""
    k = len(alpha)
    k_pos = int(positive.sum())
    if k_pos == 0:
        return float("nan")
    return float(alpha[positive].sum() / (k_pos / k))


def topq_recall(alpha: np.ndarray, positive: np.ndarray, refs, q: float = 0.25) -> float:
    """Fraction of truth-positive tiles found among the top ceil(q*k) by attention."""
    from .selector import _rank, budget_for

    k_pos = int(positive.sum())
    if k_pos == 0:
        return float("nan")
    top = _rank(np.asarray(alpha), refs)[:budget_for(len(alpha), q)]
    return float(positive[top].sum() / k_pos)


def localization(run: DetectionRun, part: str = "test", column: int = 1) -> dict[str, dict]:
    """Per malignant slide of ``part``: attention mass ratio and top-25% recall,
    read from the same column the selector would use."""
    column = min(column, run.model.n_att - 1)
    out = {}
    for sid in run.ids(part, malignant_only=True):
        pos = run.truth[sid]
        if not pos.any():
            continue
        a = run.attention[sid].alpha[:, column]
        out[sid] = {
            "mass_ratio": attention_mass_ratio(a, pos),
            "top25_recall": topq_recall(a, pos, run.attention[sid].refs),
        }
    return out


@dataclass
class TwoStageRun:
    kappa_two_stage: float
    kappa_single_stage: float
    report_two_stage: metrics.MetricsReport
    report_single_stage: metrics.MetricsReport
    detection: DetectionRun
    seconds: float


def run_two_stage(source: SlideSource, cfg: PipelineConfig, method: str | None = None) -> TwoStageRun:
    t0 = time.perf_counter()
    det = run_detection(source, cfg)
    split = det.split
    test_ids = [s for s in sorted(split) if split[s] == "test"]

    single = pipeline.train_stage(det.store, source.labels, split, "single", cfg)
    rep_single, *_ = pipeline.evaluate_model(single.model, det.store, source.labels, cfg.task, test_ids)

    sel_cfg = cfg.selection if method is None else dataclasses.replace(cfg.selection, method=method)
    if sel_cfg.method == "blue_ratio":
        plans = pipeline.blue_ratio_plans(source, det.grids, sel_cfg)
    else:
        plans = pipeline.select_all(det.attention, sel_cfg, source)
    store10 = pipeline.featurize_classification(source, plans, cfg)
    two = pipeline.train_stage(store10, source.labels, split, "classify", cfg)
    rep_two, *_ = pipeline.evaluate_model(two.model, store10, source.labels, cfg.task, test_ids)
    return TwoStageRun(rep_two.kappa, rep_single.kappa, rep_two, rep_single, det,
                       time.perf_counter() - t0)
