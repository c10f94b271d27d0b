import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from sparsedti.errors import FormatError, TrainingDiverged, ValidationError
from sparsedti.loss import loss_terms
from sparsedti.model import (Adam, EstimatorModel, backward, forward, forward_batch, init_model,
                             load_model, save_model)
from sparsedti.phantom import NoiseConfig, PhantomConfig, generate_phantom, make_dataset
from sparsedti.train import (HISTORY_HEADER, TrainConfig, baseline_qdl, evaluate, metric_rows,
                             train, write_history)
from sparsedti.volume import six_direction_table


@pytest.fixture(scope="module")
def dataset():
    field = generate_phantom(PhantomConfig(dims=(32, 32, 8)))
    return make_dataset(field, six_direction_table(), NoiseConfig(0.04, 0))


def oracle_dataset(ds):
    """Targets that a single linear 1x1 layer with the output clamp reproduces exactly."""
    return replace(ds, targets=np.clip(ds.inputs[..., 1:4], 0.0, 1.5))


def oracle_model():
    w = np.zeros((7, 3))
    w[1, 0] = w[2, 1] = w[3, 2] = 1.0
    return EstimatorModel((7, 3), [w], [np.zeros(3)], "tanh", 1)


class TestModel:
    def test_zero_parameters_give_zero(self):
        m = init_model(2, (4,), output_bias=0.0)
        m.weights = [np.zeros_like(w) for w in m.weights]
        out = forward(m, np.random.default_rng(0).normal(size=(2, 2, 7)))
        assert np.array_equal(out, np.zeros((2, 2, 3)))

    def test_linear_map(self):
        x = np.random.default_rng(1).uniform(size=(1, 1, 7))
        assert np.array_equal(forward(oracle_model(), x), x[..., 1:4])

    def test_clamp(self):
        m = oracle_model()
        x = np.zeros((1, 1, 7))
        x[0, 0, 1:4] = [-1.0, 0.7, 9.0]
        assert np.array_equal(forward(m, x)[0, 0], [0.0, 0.7, 1.5])

    def test_deterministic(self):
        m = init_model(4, (8, 8), rng=np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(4, 4, 7))
        assert np.array_equal(forward(m, x), forward(m, x))

    def test_shape_checks(self):
        m = init_model(4, (8,))
        with pytest.raises(ValidationError):
            forward(m, np.zeros((3, 4, 7)))
        with pytest.raises(ValidationError):
            EstimatorModel((10, 3), [np.zeros((10, 3))], [np.zeros(3)], "tanh", 1)
        with pytest.raises(ValidationError):
            EstimatorModel((7, 3), [np.full((7, 3), np.nan)], [np.zeros(3)], "tanh", 1)

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_backward_matches_finite_differences(self, activation):
        rng = np.random.default_rng(4)
        m = init_model(2, (5, 4), activation, rng=rng, output_bias=0.5)
        x = rng.normal(size=(3, 2, 2, 7))
        y = rng.uniform(0.2, 0.9, size=(3, 2, 2, 3))

        def total():
            out = forward_batch(m, x)
            d, r, _, _ = loss_terms(out, y)
            return float(np.sum(d + 0.5 * r))

        out, acts = forward_batch(m, x, keep_cache=True)
        _, _, gd, gr = loss_terms(out, y, want_grad=True)
        grads = backward(m, acts, gd + 0.5 * gr)
        h = 1e-6
        for p, g in zip(m.params(), grads):
            for idx in list(np.ndindex(p.shape))[:6]:
                old = p[idx]
                p[idx] = old + h
                up = total()
                p[idx] = old - h
                dn = total()
                p[idx] = old
                assert abs((up - dn) / (2 * h) - g[idx]) < 1e-6 * max(1.0, abs(g[idx]))

    def test_adam_first_step(self):
        p = [np.array([1.0, -2.0])]
        Adam(p, 0.1).step(p, [np.array([3.0, -0.5])])
        assert np.allclose(p[0], [0.9, -1.9], atol=1e-7)

    def test_checkpoint_roundtrip(self, tmp_path):
        m = init_model(3, (6,), rng=np.random.default_rng(5))
        m.meta = {"diffusivity_scale": 1.7e-3}
        save_model(m, str(tmp_path / "m"))
        back = load_model(str(tmp_path / "m"))
        for a, b in zip(m.params(), back.params()):
            assert np.array_equal(a, b)
        assert back.meta == m.meta and back.patch == 3
        raw = (tmp_path / "m.model.raw").read_bytes()
        save_model(back, str(tmp_path / "n"))
        assert (tmp_path / "n.model.raw").read_bytes() == raw

    def test_truncated_checkpoint(self, tmp_path):
        save_model(init_model(1, (2,)), str(tmp_path / "m"))
        raw = (tmp_path / "m.model.raw").read_bytes()
        (tmp_path / "m.model.raw").write_bytes(raw[:-8])
        with pytest.raises(FormatError):
            load_model(str(tmp_path / "m"))


FAST = dict(patch=8, stride=4, hidden=(32, 32), batch_size=8, epochs=30, max_train_patches=200)


class TestTrain:
    def test_loss_decreases(self, dataset):
        res = train(dataset, TrainConfig(lam=0.1, **FAST))
        assert len(res.history) == 30
        assert res.history[-1].train_total < res.history[0].train_total
        assert all(r.lam == 0.1 for r in res.history)

    def test_deterministic_history(self, dataset, tmp_path):
        cfg = TrainConfig(lam="adaptive", **dict(FAST, epochs=4))
        a, b = train(dataset, cfg), train(dataset, cfg)
        write_history(a.history, tmp_path / "a.csv")
        write_history(b.history, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert tuple(rows[0]) == HISTORY_HEADER and len(rows) == 5

    def test_lambda_zero_reports_reg(self, dataset):
        res = train(dataset, TrainConfig(lam=0.0, **dict(FAST, epochs=2)))
        assert all(r.lam == 0.0 and r.val_reg > 0 for r in res.history)
        assert res.model.meta["final_lambda"] == 0.0

    def test_adaptive_moves_lambda(self, dataset):
        res = train(dataset, TrainConfig(lam="adaptive", **dict(FAST, epochs=3)))
        lams = [r.lam for r in res.history]
        assert lams[0] == 0.1 and lams[1] != 0.1
        assert all(1e-4 <= x <= 10 for x in lams)

    def test_divergence_dumps_state(self, dataset):
        cfg = TrainConfig(lam=0.0, lr=1e300, **dict(FAST, epochs=3))
        with pytest.raises(TrainingDiverged) as info:
            train(dataset, cfg)
        assert "weight_norms" in info.value.state

    def test_trained_beats_untrained(self, dataset):
        cfg = TrainConfig(lam=0.0, **FAST)
        trained = evaluate(train(dataset, cfg).model, dataset, "val").aggregate.mse
        fresh = evaluate(init_model(8, (32, 32), rng=np.random.default_rng(0)), dataset, "val")
        assert trained < fresh.aggregate.mse

    @pytest.mark.parametrize("kwargs", [dict(lr=0.0), dict(rho=1.5), dict(lam=-1.0), dict(lam="big"),
                                        dict(lam_min=5.0, lam_max=1.0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)


class TestBaseline:
    @pytest.mark.parametrize("lam", [0.5, "adaptive"])
    def test_patch_one_rejects_regularizer(self, lam):
        with pytest.raises(ValidationError):
            TrainConfig(patch=1, lam=lam)

    def test_baseline_rejects_regularized_config(self, dataset):
        with pytest.raises(ValidationError):
            baseline_qdl(dataset, TrainConfig(lam=0.1))

    def test_runs_on_200_voxels(self, dataset):
        res = baseline_qdl(dataset, TrainConfig(lam=0.0, epochs=3, max_train_patches=200))
        assert res.model.patch == 1 and res.model.layer_sizes == (7, 256, 256, 3)
        assert len(res.history) == 3 and all(math.isfinite(r.train_total) for r in res.history)
        assert all(r.val_reg == 0.0 for r in res.history)


class TestEvaluate:
    def test_perfect_model(self, dataset):
        res = evaluate(oracle_model(), oracle_dataset(dataset), "test")
        assert [r.channel for r in res.rows] == ["FA", "MD", "AD", "aggregate"]
        for r in res.rows:
            assert r.mse == 0.0 and r.psnr == math.inf and abs(r.ssim - 1.0) < 1e-12

    def test_csv_rows(self, dataset, tmp_path):
        res = evaluate(oracle_model(), oracle_dataset(dataset), "val")
        res.write_csv(tmp_path / "e.csv")
        rows = list(csv.reader(open(tmp_path / "e.csv")))
        assert rows[0] == ["channel", "mse", "psnr", "ssim", "peak"]
        assert [r[0] for r in rows[1:]] == ["FA", "MD", "AD", "aggregate"]
        assert rows[1][2] == "inf"

    def test_metric_rows_aggregate(self):
        rng = np.random.default_rng(0)
        ref = rng.uniform(size=(16, 16, 2, 3))
        pred = ref + 0.01 * rng.normal(size=ref.shape)
        rows = metric_rows(pred, ref)
        assert rows[-1].mse == pytest.approx(np.mean((ref - pred) ** 2), rel=1e-12)
        assert rows[-1].ssim == pytest.approx(np.mean([r.ssim for r in rows[:3]]), rel=1e-14)

    def test_empty_split(self, dataset):
        ds = replace(dataset, splits=dict(dataset.splits, test=[]))
        with pytest.raises(ValidationError):
            evaluate(oracle_model(), ds, "test")
