"""Choosing tiles for the high-resolution stage.

Three strategies share one output type: ``att_top_q`` ranks tiles by
detection attention, ``att_cluster`` clusters the instance embeddings
(PCA then k-means) and splits the tile budget across clusters in
proportion to their attention mass, and ``blue_ratio`` ranks tiles by mean
blue ratio without looking at the model at all.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import ConfigError
from .tiler import TileRef

METHODS = ("att_top_q", "att_cluster", "blue_ratio")


@dataclass(frozen=True)
class SelectionConfig:
    method: str = "att_cluster"
    q: float = 0.25
    n_clusters: int = 3
    pca_dims: int = 32
    seed: int = 0
    attention_column: int = 1  # malignant column of the binary detector
    fit_scope: str = "slide"  # "slide": PCA + k-means per slide; "dataset": one fit shared by all slides

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 < self.q <= 1.0:
            raise ConfigError("q must lie in (0, 1]")
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if self.pca_dims < 1:
            raise ConfigError("pca_dims must be >= 1")
        if self.fit_scope not in ("slide", "dataset"):
            raise ConfigError(f"fit_scope must be 'slide' or 'dataset', got {self.fit_scope!r}")


# -- PCA ----------------------------------------------------------------------

@dataclass
class PCAResult:
    scores: np.ndarray      # k x dims
    basis: np.ndarray       # d x dims, orthonormal columns
    eigenvalues: np.ndarray  # dims, non-increasing
    mean: np.ndarray
    note: str = ""


def pca_fit_transform(E: np.ndarray, dims: int) -> PCAResult:
    """Project mean-centred rows onto the top covariance eigenvectors.

    Each component's sign is chosen so that its largest-magnitude entry is
    positive.  Fewer than 2 rows pass through un-projected.
    """
    E = np.asarray(E, dtype=np.float64)
    k, d = E.shape
    if k < 2:
        dims = min(dims, d)
        basis = np.eye(d)[:, :dims]
        return PCAResult(E @ basis, basis, np.zeros(dims), np.zeros(d), note="identity: k < 2")
    mean = E.mean(axis=0)
    C = E - mean
    cov = C.T @ C / (k - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    dims = min(dims, d)
    evals = np.maximum(evals[order][:dims], 0.0)
    basis = evecs[:, order][:, :dims]
    pivot = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivot, np.arange(dims)])
    basis = basis * np.where(signs == 0, 1.0, signs)
    return PCAResult(C @ basis, basis, evals, mean)


# -- k-means -------------------------------------------------------------------

@dataclass
class ClusterStats:
    assignment: np.ndarray   # k ints
    centroids: np.ndarray    # c x dims
    counts: np.ndarray       # m_s
    mean_attention: np.ndarray  # alpha_bar_s
    inertia_history: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.counts)


def _assign(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    # argmin returns the first minimum: ties go to the lowest cluster index
    return d2.argmin(axis=1), d2


def _init_centroids(X: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with the first centre drawn uniformly."""
    k = X.shape[0]
    idx = [int(rng.integers(k))]
    d2 = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, c):
        total = d2.sum()
        if total <= 0:
            nxt = int(np.argmax(d2))
        else:
            nxt = int(rng.choice(k, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[idx].copy()


def kmeans(scores: np.ndarray, n_clusters: int, seed: int = 0, attention=None,
           max_iter: int = 300) -> ClusterStats:
    X = np.asarray(scores, dtype=np.float64)
    k = X.shape[0]
    flags = []
    if k == 0:
        raise ConfigError("kmeans needs at least one point")
    c = n_clusters
    if k < c:
        c = k
        flags.append(f"clusters_reduced:{n_clusters}->{k}")
    rng = np.random.default_rng(seed)
    centroids = _init_centroids(X, c, rng)
    assignment = None
    history = []
    for _ in range(max_iter):
        new, d2 = _assign(X, centroids)
        for s in range(c):
            if not np.any(new == s):
                # re-seed an empty cluster with the point farthest from its own centroid
                own = d2[np.arange(k), new].copy()
                far = int(np.argmax(own))
                new[far] = s
                flags.append("empty_cluster_reseeded")
        for s in range(c):
            centroids[s] = X[new == s].mean(axis=0)
        history.append(float(((X - centroids[new]) ** 2).sum()))
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
    counts = np.bincount(assignment, minlength=c)
    if attention is None:
        mean_att = np.zeros(c)
    else:
        att = np.asarray(attention, dtype=np.float64)
        mean_att = np.array([att[assignment == s].mean() for s in range(c)])
    return ClusterStats(assignment, centroids, counts, mean_att, history, flags)


def fixed_clusters(scores: np.ndarray, centroids: np.ndarray, attention=None) -> ClusterStats:
    """Assign points to given centroids without refitting; empty clusters keep count 0."""
    X = np.asarray(scores, dtype=np.float64)
    c = len(centroids)
    assignment, _ = _assign(X, centroids)
    counts = np.bincount(assignment, minlength=c)
    att = np.zeros(len(X)) if attention is None else np.asarray(attention, dtype=np.float64)
    mean_att = np.array([att[assignment == s].mean() if counts[s] else 0.0 for s in range(c)])
    return ClusterStats(assignment, np.asarray(centroids, dtype=np.float64), counts, mean_att)


@dataclass
class DatasetFit:
    mean: np.ndarray
    basis: np.ndarray
    centroids: np.ndarray

    def project(self, E: np.ndarray) -> np.ndarray:
        return (np.asarray(E, dtype=np.float64) - self.mean) @ self.basis


def fit_dataset(embeddings: list[np.ndarray], cfg: SelectionConfig) -> DatasetFit:
    """PCA and k-means over the pooled embeddings of many slides (in list order)."""
    E = np.concatenate([np.asarray(e, dtype=np.float64) for e in embeddings if len(e)], axis=0)
    pca = pca_fit_transform(E, cfg.pca_dims)
    stats = kmeans(pca.scores, cfg.n_clusters, cfg.seed)
    return DatasetFit(pca.mean, pca.basis, stats.centroids)


def inertia(X: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    return float(((X - centroids[assignment]) ** 2).sum())


# -- budgets ---------------------------------------------------------------------

def largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integers summing to ``total`` closest to ``quotas`` (Hamilton method;
    remainder ties go to the lower index)."""
    base = np.floor(quotas).astype(np.int64)
    left = total - int(base.sum())
    if left > 0:
        rem = quotas - base
        order = sorted(range(len(quotas)), key=lambda i: (-rem[i], i))
        for i in order[:left]:
            base[i] += 1
    return base


def cluster_budgets(stats: ClusterStats, B: int) -> np.ndarray:
    if B < 1:
        raise ConfigError("budget B must be >= 1")
    m = stats.counts.astype(np.float64)
    mass = stats.mean_attention * m
    if mass.sum() <= 0:
        share = np.full(len(m), 1.0 / len(m))
    else:
        share = mass / mass.sum()
    target = min(B, int(m.sum()))
    budget = np.minimum(stats.counts, largest_remainder(share * target, target))
    leftover = target - int(budget.sum())
    order = sorted(range(len(m)), key=lambda i: (-share[i], i))
    while leftover > 0:
        progressed = False
        for i in order:
            if leftover == 0:
                break
            if budget[i] < stats.counts[i]:
                budget[i] += 1
                leftover -= 1
                progressed = True
        if not progressed:
            break
    return budget


# -- selection -----------------------------------------------------------------

@dataclass
class SelectedTile:
    ref: TileRef
    attention: float
    cluster_id: int = -1
    score: float = 0.0  # ranking score: attention or mean blue ratio


@dataclass
class SelectionPlan:
    slide_id: str
    method: str
    tiles: list[SelectedTile]
    budget: int
    meta: dict = field(default_factory=dict)


def budget_for(k: int, q: float) -> int:
    # guard against 0.25 * 4 style products landing a hair above an integer
    return int(math.ceil(round(q * k, 9)))


def _rank(values: np.ndarray, refs: list[TileRef]) -> list[int]:
    """Indices by descending value, ties broken by lower (y, x)."""
    return sorted(range(len(refs)), key=lambda i: (-values[i], refs[i].y, refs[i].x))


def select(slide_id: str, refs: list[TileRef], attention, embeddings, cfg: SelectionConfig,
           blue_ratios=None, fit: DatasetFit | None = None) -> SelectionPlan:
    """Choose up to ``ceil(q*k)`` tiles from one slide.

    ``attention`` is the k-vector used for ranking (already the chosen
    column); ``blue_ratios`` is required for the ``blue_ratio`` method.
    ``fit`` replaces the per-slide PCA and k-means with a shared one.
    """
    cfg.validate()
    k = len(refs)
    meta = {"attention_column": cfg.attention_column}
    if k == 0:
        return SelectionPlan(slide_id, cfg.method, [], 0, meta)
    B = budget_for(k, cfg.q)
    att = np.zeros(k) if attention is None else np.asarray(attention, dtype=np.float64)
    cluster = np.full(k, -1)
    if cfg.method == "att_top_q":
        chosen = _rank(att, refs)[:B]
        scores = att
    elif cfg.method == "blue_ratio":
        if blue_ratios is None:
            raise ConfigError("blue_ratio selection needs per-tile mean blue ratios")
        scores = np.asarray(blue_ratios, dtype=np.float64)
        chosen = _rank(scores, refs)[:B]
        meta["attention_column"] = None
    else:
        if fit is None:
            pca = pca_fit_transform(np.asarray(embeddings), cfg.pca_dims)
            stats = kmeans(pca.scores, cfg.n_clusters, cfg.seed, attention=att)
        else:
            stats = fixed_clusters(fit.project(embeddings), fit.centroids, attention=att)
        budgets = cluster_budgets(stats, B)
        cluster = stats.assignment
        chosen = []
        for s in range(stats.n_clusters):
            members = [i for i in _rank(att, refs) if cluster[i] == s]
            chosen.extend(members[:budgets[s]])
        chosen = sorted(chosen, key=lambda i: (-att[i], refs[i].y, refs[i].x))
        scores = att
        meta.update(budgets=[int(b) for b in budgets], cluster_counts=[int(c) for c in stats.counts],
                    cluster_mean_attention=[float(a) for a in stats.mean_attention],
                    flags=stats.flags)
    tiles = [SelectedTile(refs[i], float(att[i]), int(cluster[i]), float(scores[i])) for i in chosen]
    return SelectionPlan(slide_id, cfg.method, tiles, B, meta)


PLAN_FIELDS = ("slide_id", "method", "rank", "level", "x", "y", "size", "attention", "cluster_id")


def plans_to_csv(plans: list[SelectionPlan]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLAN_FIELDS)
    for plan in plans:
        for rank, t in enumerate(plan.tiles):
            w.writerow([plan.slide_id, plan.method, rank, t.ref.level, t.ref.x, t.ref.y, t.ref.size,
                        repr(t.attention), t.cluster_id])
    return buf.getvalue()


def plans_from_csv(text: str) -> dict[str, SelectionPlan]:
    plans: dict[str, SelectionPlan] = {}
    for rec in csv.DictReader(io.StringIO(text)):
        sid = rec["slide_id"]
        plan = plans.setdefault(sid, SelectionPlan(sid, rec["method"], [], 0))
        ref = TileRef(sid, rec["level"], int(rec["y"]), int(rec["x"]), int(rec["size"]))
        plan.tiles.append(SelectedTile(ref, float(rec["attention"]), int(rec["cluster_id"])))
        plan.budget = len(plan.tiles)
    return plans


def attention_heatmap(refs: list[TileRef], attention, level_dims: tuple[int, int],
                      stride: int) -> np.ndarray:
    """uint8 raster with one pixel per grid cell, attention min-max scaled to 0..255."""
    h, w = level_dims
    gh = max(1, (h - 1) // stride + 1)
    gw = max(1, (w - 1) // stride + 1)
    out = np.zeros((gh, gw), dtype=np.uint8)
    att = np.asarray(attention, dtype=np.float64)
    if not refs:
        return out
    lo, hi = att.min(), att.max()
    scaled = np.zeros_like(att) if hi <= lo else (att - lo) / (hi - lo)
    for r, v in zip(refs, scaled):
        out[r.y // stride, r.x // stride] = int(round(255.0 * v))
    return out
