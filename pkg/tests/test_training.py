import numpy as np
import pytest
from util import random_batch, tiny_schema, tiny_vocab

from pretower import tensor as T
from pretower.errors import ConfigError, DivergenceError
from pretower.features import FeatureSchema, SyntheticSpec, generate_synthetic, load_csv, split
from pretower.model import ModelConfig, build_model
from pretower.objectives import LossConfig, auc, ctr_loss
from pretower.training import (
    Adam,
    TrainConfig,
    embedding_touch_map,
    gradcheck,
    run_training,
    score_dataset,
)

NO_REG = LossConfig(lambda1=0.0, lambda2=0.0, tau=1.0)


def one_param_model(value):
    from pretower.model import ModelParams

    params = ModelParams()
    params.add("w", np.array(value, dtype=np.float64), "weight")
    return params


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        params = one_param_model([1.0, -2.0])
        opt = Adam(params, TrainConfig())
        before = params["w"].data.copy()
        params["w"].zero_grad()  # lazily zero gradient
        opt.step()
        np.testing.assert_array_equal(params["w"].data, before)

    def test_first_step_is_minus_lr_sign(self):
        lr = 0.001
        params = one_param_model([0.0, 0.0])
        opt = Adam(params, TrainConfig(learning_rate=lr))
        params["w"].grad[...] = [0.3, -0.02]
        opt.step()
        np.testing.assert_allclose(params["w"].data, [-lr, lr], rtol=1e-6)

    def test_identical_runs_bit_identical(self):
        def run():
            params = one_param_model([0.5, 0.5])
            opt = Adam(params, TrainConfig())
            for step in range(5):
                params["w"].zero_grad()
                params["w"].grad[...] = [0.1 * (step + 1), -0.2]
                opt.step()
            return params["w"].data.tobytes()

        assert run() == run()

    def test_untouched_embedding_rows_frozen(self):
        from pretower.model import ModelParams

        params = ModelParams()
        params.add("emb", np.ones((5, 2)), "embedding")
        opt = Adam(params, TrainConfig(learning_rate=0.1))
        t = params["emb"]
        t.zero_grad()
        t.grad[[1, 3]] = 1.0
        before = t.data.copy()
        opt.step(touched={"emb": np.array([1, 3])})
        np.testing.assert_array_equal(t.data[[0, 2, 4]], before[[0, 2, 4]])
        assert np.all(t.data[[1, 3]] != before[[1, 3]])
        np.testing.assert_array_equal(opt.m["emb"][[0, 2, 4]], 0.0)
        np.testing.assert_array_equal(opt.v["emb"][[0, 2, 4]], 0.0)


class TestTouchMap:
    def test_unique_rows_per_field(self):
        schema = tiny_schema(2, 1, 2)
        vocab = tiny_vocab(schema)
        model = build_model(schema, vocab, ModelConfig(kind="two_tower", layer_widths=(3,)), 0)
        batch = random_batch(schema, vocab, 6, np.random.default_rng(0))
        touched = embedding_touch_map(model, batch)
        assert set(touched) == {"user_embed.u0", "user_embed.u1", "item_embed.v0"}
        np.testing.assert_array_equal(touched["user_embed.u0"], np.unique(batch.user_ids[:, 0]))


def make_dataset(tmp_path, schema=None, noise=1.0, rows=1500, users=25, items=25, seed=11):
    schema = schema or FeatureSchema(("uid", "ug", "ux"), ("iid", "ig", "iy"), embedding_dim=4)
    spec = SyntheticSpec(num_users=users, num_items=items, num_rows=rows, seed=seed, noise=noise)
    paths = generate_synthetic(schema, spec, tmp_path)
    vocab, ds = load_csv(paths["interactions"], schema)
    return schema, vocab, ds


SMALL_MODEL = dict(layer_widths=(16, 8), head_dim=4, dropout=0.0)


class TestRunTraining:
    def test_loss_decreases_on_fixed_batch(self):
        schema = tiny_schema(2, 2, 2)
        vocab = tiny_vocab(schema)
        model = build_model(schema, vocab, ModelConfig(kind="two_tower", layer_widths=(6, 4), dropout=0.0), 1)
        batch = random_batch(schema, vocab, 8, np.random.default_rng(2))
        opt = Adam(model.params, TrainConfig(learning_rate=0.001))
        losses = []
        for _ in range(10):
            loss = ctr_loss(model.forward(batch, training=True, rng=np.random.default_rng(0)).logits, batch.labels)
            losses.append(loss.item())
            for p in model.params.tensors().values():
                p.zero_grad()
            loss.backward()
            opt.step(embedding_touch_map(model, batch))
        assert losses[-1] < losses[0]

    def test_validation_auc_beats_coin_flip_quickly(self, tmp_path):
        schema, vocab, ds = make_dataset(tmp_path, noise=0.5)
        result = run_training(
            schema,
            vocab,
            ds,
            ModelConfig(kind="interaction_tower", **SMALL_MODEL),
            TrainConfig(batch_size=256, max_epochs=5, patience=5, seed=3, learning_rate=0.005),
            LossConfig(lambda1=0.1, lambda2=1e-5, tau=1.0),
        )
        assert any(row["val_auc"] > 0.5 for row in result.history[:5])

    def test_determinism(self, tmp_path):
        schema, vocab, ds = make_dataset(tmp_path, rows=600)
        kwargs = dict(
            model_config=ModelConfig(kind="interaction_tower", **SMALL_MODEL),
            train_config=TrainConfig(batch_size=128, max_epochs=3, patience=2, seed=5, learning_rate=0.01),
            loss_config=LossConfig(lambda1=0.1, lambda2=1e-5, tau=1.0),
        )
        r1 = run_training(schema, vocab, ds, **kwargs)
        r2 = run_training(schema, vocab, ds, **kwargs)
        assert r1.history == r2.history
        for name, t in r1.model.params.items():
            assert t.data.tobytes() == r2.model.params[name].data.tobytes()

    def test_patience_zero_stops_at_first_non_improving_epoch(self, tmp_path):
        schema, vocab, ds = make_dataset(tmp_path, rows=600)
        result = run_training(
            schema,
            vocab,
            ds,
            ModelConfig(kind="two_tower", **SMALL_MODEL),
            TrainConfig(batch_size=128, max_epochs=12, patience=0, seed=8, learning_rate=0.01),
            NO_REG,
        )
        aucs = [row["val_auc"] for row in result.history]
        # every epoch except the last must strictly improve on the running best
        best = -np.inf
        for value in aucs[:-1]:
            assert value > best
            best = max(best, value)
        if len(aucs) < 12:
            assert aucs[-1] <= best

    def test_history_logs_both_loss_components(self, tmp_path):
        schema, vocab, ds = make_dataset(tmp_path, rows=400)
        result = run_training(
            schema,
            vocab,
            ds,
            ModelConfig(kind="interaction_tower", **SMALL_MODEL),
            TrainConfig(batch_size=200, max_epochs=2, patience=2, seed=2, learning_rate=0.01),
            LossConfig(lambda1=0.5, lambda2=0.0, tau=1.0),
        )
        for row in result.history:
            assert set(row) == {"epoch", "loss_ctr", "loss_cir", "val_auc", "val_logloss"}
            assert row["loss_cir"] > 0.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_step(self, tmp_path):
        schema, vocab, ds = make_dataset(tmp_path, rows=400)
        with pytest.raises(DivergenceError, match="step"):
            run_training(
                schema,
                vocab,
                ds,
                ModelConfig(kind="two_tower", **SMALL_MODEL),
                TrainConfig(batch_size=400, max_epochs=8, patience=8, seed=2, learning_rate=1e160),
                LossConfig(lambda1=0.0, lambda2=1e-5, tau=1.0),
            )

    def test_eval_scoring_is_deterministic_despite_dropout(self, tmp_path):
        schema, vocab, ds = make_dataset(tmp_path, rows=400)
        cfg = ModelConfig(kind="interaction_tower", layer_widths=(16, 8), head_dim=4, dropout=0.4)
        result = run_training(
            schema,
            vocab,
            ds,
            cfg,
            TrainConfig(batch_size=200, max_epochs=2, patience=2, seed=4, learning_rate=0.01),
            NO_REG,
        )
        s1 = score_dataset(result.model, ds.slice(0, 50))
        s2 = score_dataset(result.model, ds.slice(0, 50))
        np.testing.assert_array_equal(s1, s2)


class TestPlantedSignalOracle:
    def test_zero_noise_data_is_learnable_to_high_auc(self, tmp_path):
        # rank-2 preference surface with no noise: the baseline must be able
        # to order held-out pairs almost perfectly
        schema = FeatureSchema(("uid", "ug"), ("iid", "ig"), embedding_dim=16)
        spec = SyntheticSpec(
            num_users=40, num_items=40, num_rows=6000, seed=23, noise=0.0, latent_rank=2, affinity_scale=0.0
        )
        paths = generate_synthetic(schema, spec, tmp_path)
        vocab, ds = load_csv(paths["interactions"], schema)
        train_ds, test_ds = split(ds, 0.8, seed=1)
        result = run_training(
            schema,
            vocab,
            train_ds,
            ModelConfig(kind="two_tower", layer_widths=(64, 32), dropout=0.0),
            TrainConfig(batch_size=256, max_epochs=120, patience=15, seed=7, learning_rate=0.01),
            NO_REG,
        )
        test_auc = auc(score_dataset(result.model, test_ds), test_ds.labels)
        assert test_auc > 0.95


class TestGradcheck:
    @pytest.mark.parametrize("kind", ["two_tower", "single_tower", "interaction_tower"])
    def test_all_parameters_pass(self, kind):
        report = gradcheck(kind, seed=0)
        assert not report.failed, "\n".join(report.lines())
        assert report.worst < 1e-3

    def test_report_lines_cover_every_parameter(self):
        report = gradcheck("two_tower", seed=1)
        assert len(report.entries) >= 8
        text = "\n".join(report.lines())
        assert "PASS" in text
