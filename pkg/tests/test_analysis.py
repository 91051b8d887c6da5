import csv
import json

import numpy as np
import pytest

from sibrar.analysis import gap_report, write_gap_outputs
from sibrar.data import ModalityTable, SyntheticSpec, make_split, synth_generate
from sibrar.model import DataView, SiBraRModel
from sibrar.training import TrainConfig, build_model, fit

from conftest import SMALL_DIMS, random_matrix, vector_table


def _setup(gen, n_items=30, same_features=False, avail_b=None):
    R = random_matrix(gen, 10, n_items, 0.3)
    a = vector_table(gen, "a", "item", n_items, 4)
    if same_features:
        b = ModalityTable("b", "item", "vector", a.features.copy(), a.available.copy())
    else:
        avail = np.ones(n_items, bool) if avail_b is None else avail_b
        b = ModalityTable("b", "item", "vector", gen.normal(size=(n_items, 4)) * avail[:, None], avail)
    view = DataView(R, "item", [a, b])
    model = SiBraRModel.build(view, ["a", "b"], proj_dim=5, branch_hidden=(6,), d_emb=3, seed=2)
    return model, view


def _mean_cos(A, B):
    return np.mean([x @ y / (np.linalg.norm(x) * np.linalg.norm(y)) for x, y in zip(A, B)])


class TestGapReport:
    def test_identical_modalities_have_no_gap(self, gen):
        model, view = _setup(gen, same_features=True)
        p = model.parameters()
        p["proj.b.weight"][...] = p["proj.a.weight"]
        p["proj.b.bias"][...] = p["proj.a.bias"]
        pre, post = gap_report(model, view)
        for rep in (pre, post):
            s = rep.pair("a", "b")
            assert s["centroid_distance"] == 0.0
            assert s["same_entity_cosine"] == pytest.approx(1.0)

    def test_statistics_against_direct_computation(self, gen):
        model, view = _setup(gen)
        pre, post = gap_report(model, view, sample_size=12, seed=4)
        np.testing.assert_array_equal(pre.entities, post.entities)
        for rep, stage in ((pre, "pre"), (post, "post")):
            A = model.modality_outputs(view, "a", rep.entities, stage)
            B = model.modality_outputs(view, "b", rep.entities, stage)
            s = rep.pair("a", "b")
            assert s["centroid_distance"] == pytest.approx(np.linalg.norm(A.mean(0) - B.mean(0)), rel=1e-12)
            ok = (np.linalg.norm(A, axis=1) > 0) & (np.linalg.norm(B, axis=1) > 0)
            assert s["same_entity_cosine"] == pytest.approx(_mean_cos(A[ok], B[ok]), rel=1e-12)
            assert s["n_random"] == 12

    def test_zero_branch_collapses_everything(self, gen):
        model, view = _setup(gen)
        for k, v in model.parameters().items():
            if k.startswith("branch.1."):
                v[...] = 0.0
        _, post = gap_report(model, view)
        s = post.pair("b", "a")
        assert s["centroid_distance"] == 0.0
        assert s["same_entity_cosine"] is None and not s["cosine_defined"]
        np.testing.assert_array_equal(post.projections, 0.0)

    def test_projection_layout(self, gen):
        model, view = _setup(gen)
        pre, post = gap_report(model, view, sample_size=7)
        for rep in (pre, post):
            assert rep.projections.shape == (14, 10)
            assert rep.labels[:7] == [(int(e), "a") for e in rep.entities]
        # 3-dimensional embeddings leave the remaining columns empty
        np.testing.assert_array_equal(post.projections[:, 3:], 0.0)
        assert post.n_components == 3 and pre.n_components == 5

    def test_sample_capped_at_eligible(self, gen):
        avail = np.zeros(30, bool)
        avail[:9] = True
        model, view = _setup(gen, avail_b=avail)
        pre, _ = gap_report(model, view, sample_size=3000)
        assert len(pre.entities) == 9 and set(pre.entities) <= set(range(9))

    def test_errors(self, gen):
        model, view = _setup(gen)
        single = SiBraRModel.build(view, ["a"], proj_dim=5, branch_hidden=(6,), d_emb=3)
        with pytest.raises(ValueError, match="at least two"):
            gap_report(single, view)
        avail = np.zeros(30, bool)
        avail[0] = True
        a_only = _setup(gen, avail_b=avail)
        a_only[1].tables["a"].available[0] = False
        a_only[1].tables["a"].features[0] = 0.0
        with pytest.raises(ValueError):
            gap_report(*a_only)

    def test_outputs(self, gen, tmp_path):
        model, view = _setup(gen)
        pre, post = gap_report(model, view, sample_size=5)
        write_gap_outputs(pre, post, tmp_path, entity_ids=[f"i{j}" for j in range(30)])
        doc = json.loads((tmp_path / "gap_report.json").read_text())
        assert set(doc) == {"pre_branch", "post_branch"} and doc["pre_branch"]["sample_size"] == 5
        with open(tmp_path / "projections.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 20 and rows[0]["entity_id"].startswith("i")
        assert {r["stage"] for r in rows} == {"pre_branch", "post_branch"}


@pytest.fixture(scope="module")
def trained():
    out = []
    for seed in range(3):
        spec = SyntheticSpec(200, 120, 8, 15, (("text", 16, 0.1), ("image", 16, 0.1)), seed=seed)
        R, tables = synth_generate(spec)
        bundle = make_split(R, "item_cold", seed=seed)
        cfg = TrainConfig(training_modalities=["image", "text"], lr=5e-3, max_epochs=10, seed=seed, **SMALL_DIMS)
        model, view = build_model(cfg, bundle, tables)
        fit(model, bundle, cfg, view)
        out.append(gap_report(model, view, seed=seed))
    return out


class TestTrainedGap:
    def test_same_entity_beats_random_pairs(self, trained):
        margins = [post.pair("text", "image")["same_entity_cosine"] - post.pair("text", "image")["random_pair_cosine"] for _, post in trained]
        assert np.mean(margins) > 0.05 and min(margins) > 0.05

    def test_branch_raises_same_entity_cosine(self, trained):
        gains = [post.pair("image", "text")["same_entity_cosine"] - pre.pair("image", "text")["same_entity_cosine"] for pre, post in trained]
        assert np.mean(gains) > 0

    def test_cosines_bounded(self, trained):
        for rep in (r for pair in trained for r in pair):
            s = rep.pair("image", "text")
            assert -1 <= s["same_entity_cosine"] <= 1 and -1 <= s["random_pair_cosine"] <= 1
            # rows a relu projector maps to zero have no direction and are skipped
            assert 0 < s["n_same"] <= len(rep.entities)
