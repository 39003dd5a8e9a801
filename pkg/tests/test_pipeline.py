import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrmil import ConfigError, SchemaMismatch
from mrmil import features as ft
from mrmil import milcore as mc
from mrmil import pipeline as pl
from mrmil import synthgen as sg
from mrmil.selector import SelectedTile, SelectionPlan
from mrmil.tiler import TileRef


def test_label_index():
    assert pl.label_index("HG", "detect") == 1 and pl.label_index("BN", "detect") == 0
    assert pl.label_index("GG1", "grade3") == 1 and pl.label_index("GG4", "grade3") == 2
    assert pl.label_index("GG3", "gg6") == 3
    with pytest.raises(ConfigError):
        pl.label_index("LG", "gg6")
    with pytest.raises(ConfigError):
        pl.label_index("BN", "nope")


def test_config_roundtrip_and_hash():
    cfg = pl.PipelineConfig()
    assert pl.config_from_dict(pl.config_to_dict(cfg)) == cfg
    h = pl.config_hash(cfg)
    assert pl.config_hash(pl.PipelineConfig()) == h
    changed = [
        dataclasses.replace(cfg, seed=1),
        dataclasses.replace(cfg, task="detect"),
        dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, lr_head=2e-3)),
        dataclasses.replace(cfg, selection=dataclasses.replace(cfg.selection, q=0.5)),
        dataclasses.replace(cfg, tile=dataclasses.replace(cfg.tile, morph_radius=1)),
    ]
    assert len({pl.config_hash(c) for c in changed} | {h}) == len(changed) + 1
    # key order in the source JSON does not matter
    d = pl.config_to_dict(cfg)
    assert pl.config_hash(pl.config_from_dict(dict(reversed(list(d.items()))))) == h


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"train": {"bogus": 1}}, {"split_ratios": [0.5, 0.5, 0.5]},
                                 {"task": "gg7"}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        pl.config_from_dict(bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 1000))
def test_split_integrity(nb, nl, nh, seed):
    labels = {f"s{i:03d}": lab for i, lab in enumerate(["BN"] * nb + ["LG"] * nl + ["HG"] * nh)}
    split = pl.split_slides(labels, (0.7, 0.1, 0.2), seed)
    assert set(split) == set(labels) and set(split.values()) <= {"train", "val", "test"}
    for lab in ("BN", "LG", "HG"):
        ids = [s for s in labels if labels[s] == lab]
        n_train = sum(split[s] == "train" for s in ids)
        assert n_train == int(round(0.7 * len(ids)))
    assert pl.split_slides(labels, (0.7, 0.1, 0.2), seed) == split


def test_split_groups_move_together():
    labels = {f"s{i}": "BN" if i < 10 else "HG" for i in range(20)}
    groups = {s: f"p{int(s[1:]) // 2}" for s in labels}
    split = pl.split_slides(labels, seed=3, groups=groups)
    for i in range(0, 20, 2):
        assert split[f"s{i}"] == split[f"s{i + 1}"]


def test_classification_refs_four_subtiles_each():
    plan = SelectionPlan("s", "att_top_q", [SelectedTile(TileRef("s", "5x", 0, 56, 64), 0.5),
                                            SelectedTile(TileRef("s", "5x", 56, 0, 64), 0.3)], 2)
    refs = pl.classification_refs(plan, (768, 768))
    assert len(refs) == 8 and all(r.level == "10x" and r.size == 64 for r in refs)
    assert refs == sorted(refs, key=lambda r: (r.y, r.x))
    assert TileRef("s", "10x", 0, 112, 64) in refs and TileRef("s", "10x", 176, 64, 64) in refs


def _tiny_source():
    return pl.SlideSource.synthetic(sg.dataset_configs({"BN": 2, "LG": 2, "HG": 2}, 9))


def test_featurize_detection_and_classification():
    cfg = pl.PipelineConfig()
    src = _tiny_source()
    store, grids = pl.featurize_detection(src, cfg)
    assert set(store.entries) == set(src.ids) and store.replacement.shape == (36,)
    e = store.entries[src.ids[0]]
    assert e.k == len(grids[src.ids[0]]) > 0 and all(r.level == "5x" for r in e.refs)
    att = {sid: pl.SlideAttention(sid, grids[sid], np.full((len(grids[sid]), 2), 1 / len(grids[sid])),
                                  np.random.default_rng(0).normal(size=(len(grids[sid]), 8)), None, None)
           for sid in src.ids}
    plans = pl.select_all(att, dataclasses.replace(cfg.selection, method="att_top_q"))
    store10 = pl.featurize_classification(src, plans, cfg)
    sid = src.ids[0]
    assert store10.entries[sid].k == 4 * len(plans[sid].tiles)
    assert all(r.level == "10x" for r in store10.entries[sid].refs)


def test_stain_enabled_paths_run():
    src = _tiny_source()
    for scope in ("tile", "slide"):
        cfg = pl.PipelineConfig(stain_enabled=True, stain_scope=scope)
        store, _ = pl.featurize_detection(src, cfg)
        assert all(np.all(np.isfinite(e.values)) for e in store.entries.values())


def _model_for(store, n=3, d_e=8):
    return mc.init_model(36, n, d_e, 4, schema_id=store.schema_id, class_names=pl.TASKS["grade3"])


def test_export_embeddings_roundtrip_and_shape():
    src = _tiny_source()
    store, _ = pl.featurize_detection(src, pl.PipelineConfig())
    model = mc.init_model(36, 3, schema_id=store.schema_id)  # default d_e = 256
    bags = pl.make_bags(store, src.labels, "grade3", sorted(store.entries))
    text = pl.export_embeddings(model, bags, src.labels)
    rows = text.strip().splitlines()
    assert len(rows[1].split(",")) == 3 * 256 + 2
    parsed = pl.parse_embeddings(text)
    for b in bags:
        lab, vec = parsed[b.slide_id]
        assert lab == src.labels[b.slide_id]
        np.testing.assert_allclose(vec, mc.forward(model, b.V).bag_repr.ravel(), rtol=1e-6, atol=1e-12)
    benign = pl.make_bags(store, src.labels, "grade3", [s for s in sorted(store.entries) if src.labels[s] == "BN"])
    assert all(lab == "BN" for lab, _ in pl.parse_embeddings(pl.export_embeddings(model, benign, src.labels)).values())


def test_schema_and_task_mismatch():
    store = ft.FeatureStore({}, None, "other-schema")
    with pytest.raises(SchemaMismatch):
        pl.check_schema(mc.init_model(36, 2, 4, 2, schema_id=ft.HANDCRAFTED_SCHEMA), store)
    src = _tiny_source()
    store, _ = pl.featurize_detection(src, pl.PipelineConfig())
    with pytest.raises(SchemaMismatch):
        pl.evaluate_model(_model_for(store, n=2), store, src.labels, "grade3", sorted(store.entries))


def test_stage_task():
    cfg = pl.PipelineConfig(task="grade3")
    assert pl.stage_task("detect", cfg) == "detect"
    assert pl.stage_task("classify", cfg) == pl.stage_task("single", cfg) == "grade3"
    with pytest.raises(ConfigError):
        pl.stage_task("zoom", cfg)


def test_select_all_dataset_scope_shares_one_fit():
    rng = np.random.default_rng(0)
    att = {}
    for i, k in enumerate((6, 9, 4)):
        refs = [TileRef(f"s{i}", "5x", 0, 64 * j, 64) for j in range(k)]
        att[f"s{i}"] = pl.SlideAttention(f"s{i}", refs, rng.dirichlet(np.ones(k), size=2).T,
                                         rng.normal(size=(k, 5)), np.array([0.5, 0.5]), np.zeros((2, 5)))
    cfg = pl.PipelineConfig().selection
    per_slide = pl.select_all(att, cfg)
    shared = pl.select_all(att, dataclasses.replace(cfg, fit_scope="dataset"))
    assert per_slide.keys() == shared.keys()
    for sid in att:
        assert len(shared[sid].tiles) == shared[sid].budget == per_slide[sid].budget
    cfg_d = pl.config_from_dict({"selection": {"fit_scope": "dataset"}})
    assert cfg_d.selection.fit_scope == "dataset"
