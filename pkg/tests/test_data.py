import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sibrar.data import (
    DataFormatError,
    IdMap,
    InteractionMatrix,
    ModalityTable,
    SyntheticSpec,
    load_feature_index,
    load_interactions,
    load_modality,
    load_split,
    make_split,
    profile_modality,
    save_split,
    split_cold,
    split_warm,
    synth_factors,
    synth_generate,
    write_synthetic,
)
from sibrar.evaluation import evaluate_split
from sibrar.model import RandModel

from conftest import random_matrix


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def _pairs(M):
    u, i = M.pairs()
    return sorted(zip(u.tolist(), i.tolist()))


class TestInteractionMatrix:
    def test_from_pairs_collapses_duplicates_and_sorts_rows(self):
        R = InteractionMatrix.from_pairs([0, 0, 0, 1], [2, 0, 2, 1], 2, 3)
        assert R.nnz == 3
        assert R.row(0).tolist() == [0, 2]
        assert R.row(1).tolist() == [1]

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            InteractionMatrix.from_pairs([0], [3], 1, 3)

    def test_transpose_is_consistent(self, gen):
        R = random_matrix(gen, 7, 9)
        np.testing.assert_array_equal(R.T.dense(), R.dense().T)
        assert R.T.T == R
        np.testing.assert_array_equal(R.col_counts(), R.T.row_counts())

    def test_contains(self):
        R = InteractionMatrix.from_pairs([0, 1], [1, 0], 2, 2)
        np.testing.assert_array_equal(R.contains([0, 0, 1, 1], [0, 1, 0, 1]), [False, True, True, False])


class TestLoadInteractions:
    def test_three_pairs(self, tmp_path):
        R, users, items = load_interactions(_write(tmp_path / "r.csv", "a,x\na,y\nb,x\n"))
        assert R.shape == (2, 2)
        assert R.nnz == 3
        assert users.ids == ("a", "b")
        assert items.ids == ("x", "y")

    def test_duplicates_collapse(self, tmp_path):
        R, _, _ = load_interactions(_write(tmp_path / "r.csv", "a,x\na,x\n"))
        assert R.nnz == 1

    def test_header_is_optional(self, tmp_path):
        R, users, _ = load_interactions(_write(tmp_path / "r.csv", "user_id,item_id\na,x\n"))
        assert R.nnz == 1 and users.ids == ("a",)

    def test_malformed_row_reports_line(self, tmp_path):
        with pytest.raises(DataFormatError, match="line 1"):
            load_interactions(_write(tmp_path / "r.csv", "a\n"))

    def test_malformed_later_row(self, tmp_path):
        with pytest.raises(DataFormatError, match="line 3"):
            load_interactions(_write(tmp_path / "r.csv", "a,x\nb,y\nc,y,z\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_interactions(_write(tmp_path / "r.csv", ""))


class TestLoadModality:
    items = IdMap(("x", "y", "z"))

    def test_categorical_one_hot(self, tmp_path):
        t = load_modality(_write(tmp_path / "g.csv", "x,rock\ny,jazz\n"), "genre", "item", "categorical", IdMap(("x", "y")))
        assert t.vocabulary == ("jazz", "rock")
        np.testing.assert_array_equal(t.features, [[0, 1], [1, 0]])

    def test_multilabel(self, tmp_path):
        t = load_modality(_write(tmp_path / "g.csv", "x,rock;pop\nz,pop\n"), "tags", "item", "multilabel", self.items)
        np.testing.assert_array_equal(t.features, [[1, 1], [0, 0], [1, 0]])
        np.testing.assert_array_equal(t.available, [True, False, True])

    def test_inconsistent_dimension(self, tmp_path):
        with pytest.raises(DataFormatError, match="dimensionality"):
            load_modality(_write(tmp_path / "v.csv", "x,1,2,3\ny,1,2,3,4\n"), "v", "item", "vector", self.items)

    def test_missing_entity_is_unavailable(self, tmp_path):
        t = load_modality(_write(tmp_path / "v.csv", "x,1,2\ny,3,4\n"), "v", "item", "vector", self.items)
        np.testing.assert_array_equal(t.available, [True, True, False])
        np.testing.assert_array_equal(t.features[2], [0, 0])

    def test_unknown_ids_are_listed(self, tmp_path):
        with pytest.raises(DataFormatError, match="q, w"):
            load_modality(_write(tmp_path / "v.csv", "x,1\nw,2\nq,3\n"), "v", "item", "vector", self.items)

    def test_discrete(self, tmp_path):
        t = load_modality(_write(tmp_path / "d.csv", "x,3\ny,7\nz,1\n"), "year", "item", "discrete", self.items)
        np.testing.assert_array_equal(t.features[:, 0], [3, 7, 1])

    def test_table_validation(self):
        with pytest.raises(ValueError):
            ModalityTable("c", "item", "categorical", np.array([[1.0, 1.0]]), np.array([True]))
        with pytest.raises(ValueError):
            ModalityTable("v", "item", "vector", np.array([[np.nan]]), np.array([True]))


class TestProfileModality:
    def test_item_row_is_column_of_r(self):
        R = InteractionMatrix.from_pairs([0, 2], [1, 1], 3, 2)
        t = profile_modality(R, "item")
        np.testing.assert_array_equal(t.features[1], [1, 0, 1])
        np.testing.assert_array_equal(t.features[0], [0, 0, 0])
        np.testing.assert_array_equal(t.available, [False, True])

    def test_user_side_rows(self):
        R = InteractionMatrix.from_dense(np.eye(2))
        np.testing.assert_array_equal(profile_modality(R, "user").features, np.eye(2))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_exhaustive_columns(self, seed):
        gen = np.random.default_rng(seed)
        R = InteractionMatrix.from_dense(gen.random((5, 4)) < 0.4)
        t = profile_modality(R, "item")
        for j in range(4):
            np.testing.assert_array_equal(t.features[j], R.dense()[:, j])
            assert t.available[j] == (R.dense()[:, j].sum() > 0)


class TestWarmSplit:
    def test_counts_for_ten_and_five(self):
        R = InteractionMatrix.from_dense(np.array([[1] * 10, [1] * 5 + [0] * 5]))
        b = split_warm(R, seed=0)
        assert [len(b.train.row(0)), len(b.valid.row(0)), len(b.test.row(0))] == [8, 1, 1]
        assert [len(b.train.row(1)), len(b.valid.row(1)), len(b.test.row(1))] == [3, 1, 1]

    def test_short_user_is_named(self):
        R = InteractionMatrix.from_dense(np.array([[1, 1, 1], [1, 1, 0]]))
        with pytest.raises(ValueError, match=r"\[1\]"):
            split_warm(R)

    def test_deterministic(self, gen):
        R = random_matrix(gen, 20, 15, 0.4, 3)
        a, b = split_warm(R, seed=5), split_warm(R, seed=5)
        assert a.train == b.train and a.valid == b.valid and a.test == b.test

    @given(st.integers(0, 2**31 - 1), st.integers(3, 25))
    @settings(max_examples=40, deadline=None)
    def test_partition_per_user(self, seed, n_items):
        gen = np.random.default_rng(seed)
        R = random_matrix(gen, 8, n_items, 0.5, 3)
        b = split_warm(R, seed=seed)
        for u in range(R.n_users):
            parts = [set(b.matrix(s).row(u).tolist()) for s in ("train", "valid", "test")]
            assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
            assert parts[0] | parts[1] | parts[2] == set(R.row(u).tolist())
            assert len(parts[1]) >= 1 and len(parts[2]) >= 1


class TestColdSplit:
    def test_hundred_users(self, gen):
        R = random_matrix(gen, 100, 30, 0.2)
        b = split_cold(R, "user", seed=1)
        sizes = [int((b.matrix(s).row_counts() > 0).sum()) for s in ("train", "valid", "test")]
        assert sizes == [80, 10, 10]
        for u in np.flatnonzero(b.test.row_counts()):
            np.testing.assert_array_equal(b.test.row(u), R.row(u))

    def test_item_cold_zero_train_columns(self, gen):
        R = random_matrix(gen, 40, 50, 0.3)
        b = split_cold(R, "item", seed=2)
        test_items = np.flatnonzero(b.test.col_counts())
        assert b.train.col_counts()[test_items].sum() == 0

    def test_too_few_entities(self):
        R = InteractionMatrix.from_dense(np.ones((9, 3)))
        with pytest.raises(ValueError):
            split_cold(R, "user")

    def test_bad_ratios(self, gen):
        with pytest.raises(ValueError):
            make_split(random_matrix(gen, 20, 10), "user_cold", (0.5, 0.5, 0.5))

    @given(st.integers(0, 2**31 - 1), st.sampled_from(["user", "item"]))
    @settings(max_examples=40, deadline=None)
    def test_disjoint_entities_and_conservation(self, seed, side):
        gen = np.random.default_rng(seed)
        R = random_matrix(gen, int(gen.integers(10, 30)), int(gen.integers(10, 30)), 0.3)
        b = split_cold(R, side, seed=seed)
        counts = [(b.matrix(s).row_counts() if side == "user" else b.matrix(s).col_counts()) > 0 for s in ("train", "valid", "test")]
        assert not (counts[0] & counts[1]).any() and not (counts[0] & counts[2]).any() and not (counts[1] & counts[2]).any()
        active = (R.row_counts() if side == "user" else R.col_counts()) > 0
        np.testing.assert_array_equal(counts[0] | counts[1] | counts[2], active)
        assert sorted(_pairs(b.train) + _pairs(b.valid) + _pairs(b.test)) == _pairs(R)


class TestPersistence:
    def test_roundtrip_and_bytes(self, tiny_csv, tmp_path):
        R, users, items = load_interactions(tiny_csv)
        b = make_split(R, "warm", seed=4)
        save_split(b, tmp_path / "a", users, items)
        save_split(make_split(R, "warm", seed=4), tmp_path / "b", users, items)
        for f in ("train.csv", "valid.csv", "test.csv", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        back, u2, i2 = load_split(tmp_path / "a")
        assert back.kind == "warm" and back.seed == 4
        assert back.train == b.train and back.test == b.test
        assert u2 == users and i2 == items
        assert json.loads((tmp_path / "a" / "manifest.json").read_text())["kind"] == "warm"


class TestSynthetic:
    def test_noiseless_modality_is_linear_image(self):
        spec = SyntheticSpec(30, 25, 4, 5, (("clean", 6, 0.0),), seed=2)
        _, tables = synth_generate(spec)
        _, Q = synth_factors(spec)
        X = tables[0].features
        coef, *_ = np.linalg.lstsq(X, Q, rcond=None)
        np.testing.assert_allclose(X @ coef, Q, atol=1e-10)

    def test_identical_factors_identical_rows(self, monkeypatch):
        import sibrar.data as data

        spec = SyntheticSpec(4, 12, 3, 5, (), seed=0)
        P, Q = data.synth_factors(spec)
        P[1] = P[0]
        monkeypatch.setattr(data, "synth_factors", lambda s: (P, Q))
        R, _ = data.synth_generate(spec)
        np.testing.assert_array_equal(R.row(0), R.row(1))

    def test_interactions_per_user_and_determinism(self):
        spec = SyntheticSpec(20, 15, 3, 4, (("a", 5, 0.5),), seed=9)
        R1, t1 = synth_generate(spec)
        R2, t2 = synth_generate(spec)
        assert R1 == R2
        np.testing.assert_array_equal(t1[0].features, t2[0].features)
        assert set(R1.row_counts().tolist()) == {4}

    def test_oracle_beats_random(self):
        spec = SyntheticSpec(200, 120, 6, 20, (), seed=1)
        R, _ = synth_generate(spec)
        P, Q = synth_factors(spec)
        b = make_split(R, "warm", seed=0)

        class Oracle:
            def score_matrix(self, users, view=None, subset=None):
                return P[np.asarray(users)] @ Q.T

        oracle = evaluate_split(Oracle(), b).aggregates["ndcg"]
        rand = evaluate_split(RandModel(R.n_items, 0), b).aggregates["ndcg"]
        assert oracle > 5 * rand

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(5, 4, 2, 5)
        with pytest.raises(ValueError):
            SyntheticSpec(5, 4, 0, 2)

    def test_written_dataset_loads(self, tmp_path):
        spec = SyntheticSpec(15, 30, 3, 4, (("a", 4, 0.1),), seed=0)
        write_synthetic(spec, tmp_path)
        R, users, items = load_interactions(tmp_path / "interactions.csv")
        tables = load_feature_index(tmp_path / "modalities.json", users, items)
        assert tables[0].available.all() and tables[0].n_entities == len(items)
        R0, t0 = synth_generate(spec)
        assert R.nnz == R0.nnz
        k = int(items.ids[0][1:])
        np.testing.assert_allclose(tables[0].features[0], t0[0].features[k], rtol=0, atol=0)
