import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sibrar import training
from sibrar.data import InteractionMatrix, SyntheticSpec, make_split, synth_generate
from sibrar.evaluation import evaluate_split
from sibrar.numerics import finite_diff_check
from sibrar.training import (
    EarlyStopping,
    SearchSpace,
    TrainConfig,
    TrainingError,
    build_model,
    fit,
    mf_batch_gradients,
    random_search,
    sample_negatives,
    sample_negatives_batch,
    write_leaderboard,
    write_metrics_csv,
)

from conftest import SMALL_DIMS


def _run(values, patience, max_epochs):
    stopper = EarlyStopping(patience, max_epochs)
    seen = 0
    while not stopper.should_stop:
        stopper.update(values[seen])
        seen += 1
    return stopper, seen


class TestEarlyStopping:
    def test_scripted_plateau(self):
        stopper, seen = _run([0.1, 0.3, 0.2, 0.3, 0.29, 0.1, 0.25, 0.9], patience=5, max_epochs=50)
        assert seen == 7 and stopper.best_epoch == 2 and stopper.best == 0.3

    def test_ties_do_not_reset(self):
        stopper, seen = _run([0.5] * 10, patience=3, max_epochs=50)
        assert seen == 4 and stopper.best_epoch == 1

    def test_max_epochs_cap(self):
        stopper, seen = _run(list(np.linspace(0, 1, 100)), patience=5, max_epochs=50)
        assert seen == 50 and stopper.best_epoch == 50

    @given(st.lists(st.floats(0, 1), min_size=60, max_size=60), st.integers(1, 10), st.integers(1, 50))
    @settings(max_examples=100)
    def test_bounds(self, values, patience, max_epochs):
        stopper, seen = _run(values, patience, max_epochs)
        assert seen <= max_epochs
        assert values[stopper.best_epoch - 1] == max(values[:seen])
        assert seen == max_epochs or seen - stopper.best_epoch == patience


def _cfg(**kw):
    base = dict(training_modalities=["content"], lr=3e-3, batch_size=64, n_neg=4, max_epochs=3, seed=1, **SMALL_DIMS)
    base.update(kw)
    return TrainConfig.from_dict(base)


class TestFit:
    def test_deterministic(self, warm_bundle):
        bundle, tables = warm_bundle
        runs = []
        for _ in range(2):
            cfg = _cfg()
            model, view = build_model(cfg, bundle, tables)
            runs.append((fit(model, bundle, cfg, view), model.parameters()))
        (a, pa), (b, pb) = runs
        assert a.train_loss == b.train_loss and a.val_ndcg == b.val_ndcg
        assert all(np.array_equal(pa[k], pb[k]) for k in pa)

    def test_restores_best_weights(self, warm_bundle):
        bundle, tables = warm_bundle
        cfg = _cfg(max_epochs=4, patience=1, lr=0.05)
        model, view = build_model(cfg, bundle, tables)
        res = fit(model, bundle, cfg, view)
        assert len(res.train_loss) == res.stopped_epoch <= 4
        val = evaluate_split(model, bundle, 10, "valid", view=view).aggregates["ndcg"]
        assert val == res.best_val == max(res.val_ndcg)

    def test_loss_decreases(self, warm_bundle):
        bundle, tables = warm_bundle
        cfg = _cfg(max_epochs=6, patience=10, lr=1e-2)
        model, view = build_model(cfg, bundle, tables)
        res = fit(model, bundle, cfg, view)
        assert res.train_loss[-1] < res.train_loss[0]

    @pytest.mark.parametrize("kind", ["mf", "deepmf"])
    def test_baselines_train(self, warm_bundle, kind):
        bundle, tables = warm_bundle
        cfg = _cfg(model=kind, max_epochs=2)
        model, view = build_model(cfg, bundle, tables)
        res = fit(model, bundle, cfg, view)
        assert len(res.val_ndcg) == 2 and np.all(np.isfinite(res.train_loss))

    @pytest.mark.parametrize("kind", ["pop", "rand"])
    def test_parameter_free_models(self, warm_bundle, kind):
        bundle, tables = warm_bundle
        cfg = _cfg(model=kind)
        model, view = build_model(cfg, bundle, tables)
        res = fit(model, bundle, cfg, view)
        assert res.train_loss == [] and len(res.val_ndcg) == 1

    def test_non_finite_loss_aborts(self, warm_bundle, monkeypatch):
        bundle, tables = warm_bundle
        cfg = _cfg()
        model, view = build_model(cfg, bundle, tables)
        real = training.batch_loss

        def broken(*args, **kw):
            _, tape = real(*args, **kw)
            return float("nan"), tape

        monkeypatch.setattr(training, "batch_loss", broken)
        with pytest.raises(TrainingError, match="epoch 1, batch 0"):
            fit(model, bundle, cfg, view)

    def test_unknown_training_modality(self, warm_bundle):
        bundle, tables = warm_bundle
        with pytest.raises(KeyError, match="unknown modality"):
            build_model(_cfg(training_modalities=["audio"]), bundle, tables)

    def test_metrics_csv_rows(self, warm_bundle, tmp_path):
        bundle, tables = warm_bundle
        cfg = _cfg(max_epochs=2)
        model, view = build_model(cfg, bundle, tables)
        res = fit(model, bundle, cfg, view)
        write_metrics_csv(res, tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_ndcg@10" and len(lines) == 3


class TestTrainConfig:
    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(model="lightgcn")
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(training_modalities=[])

    def test_fingerprint(self):
        assert TrainConfig().fingerprint() == TrainConfig.from_dict(TrainConfig().to_dict()).fingerprint()
        assert TrainConfig().fingerprint() != TrainConfig(lr=0.01).fingerprint()


class TestMFGradients:
    def test_matches_finite_differences(self):
        gen = np.random.default_rng(0)
        P, Q = gen.normal(size=(5, 3)), gen.normal(size=(7, 3))
        users, pos = np.array([0, 1, 1, 4]), np.array([2, 0, 3, 6])
        neg = gen.integers(0, 7, size=(4, 3))
        _, gP, gQ = mf_batch_gradients(P, Q, users, pos, neg)
        params = {"P": P, "Q": Q}
        rep = finite_diff_check(lambda: mf_batch_gradients(P, Q, users, pos, neg)[0], params, {"P": gP, "Q": gQ}, tol=1e-6)
        assert rep.passed and rep.n_checked == P.size + Q.size

    def test_loss_value(self):
        P, Q = np.array([[1.0, 0.0]]), np.array([[2.0, 0.0], [0.5, 0.0]])
        loss, _, _ = mf_batch_gradients(P, Q, np.array([0]), np.array([0]), np.array([[1]]))
        assert loss == pytest.approx(np.log1p(np.exp(-1.5)), rel=1e-14)


class TestSearch:
    space = SearchSpace(
        values={"lr": {"low": 1e-3, "high": 1e-2, "log": True}, "n_neg": [2, 4], "d_emb": {"low": 4, "high": 8, "int": True}},
        modalities=["content", "noisy"],
        base={"max_epochs": 2, "batch_size": 128, "proj_dim": 8, "branch_hidden": [8], "counterpart_hidden": [8]},
    )

    def test_samples_within_space(self):
        gen = np.random.default_rng(0)
        for _ in range(200):
            s = self.space.sample(gen)
            assert 1e-3 <= s["lr"] <= 1e-2 and s["n_neg"] in (2, 4) and 4 <= s["d_emb"] <= 8
            assert isinstance(s["d_emb"], int)
            assert s["training_modalities"] in (["content"], ["noisy"], ["content", "noisy"])

    def test_policies(self):
        assert len(SearchSpace(modalities=["a", "b", "c"]).modality_subsets()) == 7
        assert SearchSpace(modalities=["b", "a"], policy="one").modality_subsets() == [("a",), ("b",)]
        with pytest.raises(ValueError):
            SearchSpace(policy="all")
        with pytest.raises(ValueError):
            SearchSpace(values={"lr": []})

    def test_leaderboard(self, warm_bundle, tmp_path):
        bundle, tables = warm_bundle
        best_cfg, rows, best_model, best_res = random_search(self.space, 3, bundle, seed=2, tables=tables)
        assert len(rows) == 3
        vals = [r["val_ndcg"] for r in rows]
        assert vals == sorted(vals, reverse=True)
        assert best_cfg.fingerprint() == rows[0]["config_hash"] and best_res.best_val == vals[0]
        again = random_search(self.space, 3, bundle, seed=2, tables=tables)[1]
        assert [r["config_hash"] for r in again] == [r["config_hash"] for r in rows]
        write_leaderboard(rows, tmp_path / "lb.csv")
        assert len((tmp_path / "lb.csv").read_text().splitlines()) == 4

    def test_budget(self, warm_bundle):
        bundle, tables = warm_bundle
        with pytest.raises(ValueError):
            random_search(self.space, 0, bundle, tables=tables)


class TestSpecExamples:
    def test_patience_one_without_improvement(self):
        stopper, seen = _run([0.4, 0.3, 0.3, 0.5], patience=1, max_epochs=50)
        assert seen == 2 and stopper.best_epoch == 1

    def test_budget_one(self, warm_bundle):
        bundle, tables = warm_bundle
        space = SearchSpace(modalities=["content"], base={"max_epochs": 1, "proj_dim": 4, "d_emb": 4, "branch_hidden": [4], "counterpart_hidden": [4]})
        best, rows, _, _ = random_search(space, 1, bundle, tables=tables)
        assert len(rows) == 1 and rows[0]["config_hash"] == best.fingerprint()

    def test_modality_policies_over_five(self):
        mods = [f"m{j}" for j in range(5)]
        gen = np.random.default_rng(0)
        one = SearchSpace(modalities=mods, policy="one")
        assert all(len(one.sample(gen)["training_modalities"]) == 1 for _ in range(100))
        many = SearchSpace(modalities=mods)
        assert len(many.modality_subsets()) == 31
        assert all(many.sample(gen)["training_modalities"] for _ in range(100))

    def test_beats_random_fivefold(self):
        R, tables = synth_generate(SyntheticSpec(150, 100, 8, 15, (("content", 16, 0.1),), seed=0))
        bundle = make_split(R, "warm", seed=0)
        vals = {}
        for kind in ("sibrar", "rand"):
            cfg = _cfg(model=kind, max_epochs=15, lr=5e-3)
            model, view = build_model(cfg, bundle, tables)
            vals[kind] = fit(model, bundle, cfg, view).best_val
        assert vals["sibrar"] >= 5 * vals["rand"], vals

    def test_less_noise_never_hurts(self):
        means = {}
        for noise in (2.0, 0.1):
            runs = []
            for seed in range(3):
                R, tables = synth_generate(SyntheticSpec(200, 120, 8, 15, (("content", 16, noise),), seed=seed))
                bundle = make_split(R, "item_cold", seed=seed)
                cfg = _cfg(max_epochs=15, seed=seed)
                model, view = build_model(cfg, bundle, tables)
                runs.append(fit(model, bundle, cfg, view).best_val)
            means[noise] = np.mean(runs)
        assert means[0.1] >= means[2.0], means


class TestNegativeSampling:
    def test_forced_set(self):
        dense = np.ones((2, 30))
        dense[0, [3, 7, 8, 11, 15, 19, 22, 25, 28, 29]] = 0
        R = InteractionMatrix.from_dense(dense)
        got = sample_negatives(R, 0, 10, np.random.default_rng(0))
        assert sorted(got.tolist()) == [3, 7, 8, 11, 15, 19, 22, 25, 28, 29]

    def test_too_few_candidates(self):
        R = InteractionMatrix.from_dense(np.array([[1.0, 1.0, 0.0]]))
        with pytest.raises(ValueError, match="eligible negatives"):
            sample_negatives(R, 0, 2, np.random.default_rng(0))

    def test_uniform_frequencies(self):
        dense = np.zeros((1, 30))
        dense[0, :5] = 1
        R = InteractionMatrix.from_dense(dense)
        draws = sample_negatives_batch(R, np.zeros(33_334, dtype=np.int64), 3, np.random.default_rng(5)).ravel()
        counts = np.bincount(draws, minlength=30)
        assert counts[:5].sum() == 0
        n, p = len(draws), 1 / 25
        assert np.all(np.abs(counts[5:] - n * p) <= 3 * np.sqrt(n * p * (1 - p)))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=60)
    def test_distinct_and_unseen(self, seed):
        gen = np.random.default_rng(seed)
        nu, ni = int(gen.integers(1, 8)), int(gen.integers(5, 40))
        dense = (gen.random((nu, ni)) < gen.uniform(0, 0.8)).astype(float)
        dense[:, 0] = 0.0
        R = InteractionMatrix.from_dense(dense)
        k = int(gen.integers(1, int((dense == 0).sum(axis=1).min()) + 1))
        out = sample_negatives_batch(R, np.arange(nu), k, gen)
        for u in range(nu):
            assert len(set(out[u].tolist())) == k
            assert not dense[u, out[u]].any()
