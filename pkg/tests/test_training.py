"""
Tests for the optimizer, checkpoints, datasets and the training loop
"""

import numpy as np
import pandas as pd
import pytest

from ballsparse.cli.requests import TrainRequest
from ballsparse.config import ACCEPTANCE_CONFIG
from ballsparse.exceptions import InvalidArgumentError, ShapeError
from ballsparse.processing.attention.params import init_model_params
from ballsparse.processing.geom.ball_tree import PointCloud
from ballsparse.processing.geom.cloud_io import save_point_cloud
from ballsparse.processing.training.checkpoint import (
    load_checkpoint,
    read_manifest,
    restore_model,
    save_checkpoint,
)
from ballsparse.processing.training.dataset import (
    load_cloud_directory,
    make_synthetic_dataset,
    synthetic_cloud,
)
from ballsparse.processing.training.optim import AdamW, cosine_lr, decays
from ballsparse.processing.training.pipeline import METRIC_COLUMNS, run_training_pipeline, train_model


class TestSchedule:

    def test_cosine_endpoints(self):
        assert cosine_lr(0, 10, 1.0) == pytest.approx(1.0)
        assert cosine_lr(5, 10, 1.0) == pytest.approx(0.5)
        assert cosine_lr(10, 10, 1.0) == pytest.approx(0.0)
        assert cosine_lr(20, 10, 1.0, min_lr=0.1) == pytest.approx(0.1)

    def test_no_steps_keeps_base_rate(self):
        assert cosine_lr(0, 0, 3e-4) == 3e-4

    @pytest.mark.parametrize("name,expected", [
        ("embed.w", True),
        ("embed.b", False),
        ("head.b", False),
        ("blocks.0.w_q", True),
        ("blocks.0.phi_k.w1", True),
        ("blocks.1.norm_attn", False),
        ("blocks.1.gate_slc", False),
    ])
    def test_decay_groups(self, name, expected):
        assert decays(name) is expected


class TestAdamW:

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -2.0, 0.5])}
        AdamW(params, lr=0.1, weight_decay=0.0).step({"w": np.array([3.0, -0.2, 1e-3])})
        np.testing.assert_allclose(params["w"], [0.9, -1.9, 0.4], atol=1e-4)

    def test_decoupled_weight_decay(self):
        params = {"w": np.array([2.0]), "norm_attn": np.array([2.0])}
        optimizer = AdamW(params, lr=0.1, weight_decay=0.5)
        optimizer.step({"w": np.zeros(1), "norm_attn": np.zeros(1)})
        np.testing.assert_allclose(params["w"], [2.0 - 0.1 * 0.5 * 2.0])
        np.testing.assert_allclose(params["norm_attn"], [2.0])

    def test_updates_in_place_and_skips_missing_grads(self):
        w = np.ones(2)
        b = np.ones(2)
        AdamW({"w": w, "b": b}, lr=0.01).step({"w": np.ones(2)})
        assert np.all(w < 1.0)
        np.testing.assert_array_equal(b, 1.0)

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ShapeError):
            AdamW({"w": np.ones(2)}).step({"w": np.ones(3)})

    def test_invalid_learning_rate(self):
        with pytest.raises(InvalidArgumentError):
            AdamW({"w": np.ones(2)}, lr=0.0)


class TestCheckpoint:

    def test_round_trip(self, tmp_path, small_config):
        params = init_model_params(small_config, 4, 2, np.random.default_rng(0), np.float32)
        save_checkpoint(params, tmp_path / "model", config=small_config, metadata={"steps": 3})

        config, restored = restore_model(tmp_path / "model")
        assert config == small_config
        original = params.named_arrays()
        for name, array in restored.named_arrays().items():
            assert array.dtype == np.float32
            np.testing.assert_array_equal(array, original[name])

    def test_manifest_layout(self, tmp_path, small_config):
        params = init_model_params(small_config, 3, 1, np.random.default_rng(1), np.float64)
        blob_path, _ = save_checkpoint(params, tmp_path / "ckpt", config=small_config, metadata={"seed": 7})
        header, entries = read_manifest(tmp_path / "ckpt")

        assert header["seed"] == "7"
        assert header["depth"] == "1"
        assert header["in_dim"] == "3"
        assert [name for name, *_ in entries] == list(params.named_arrays())

        offset = 0
        for name, dtype, shape, start, nbytes in entries:
            assert dtype.str == "<f8"
            assert start == offset
            assert nbytes == int(np.prod(shape)) * 8
            offset += nbytes
        assert blob_path.stat().st_size == offset

    def test_blob_is_little_endian(self, tmp_path, small_config):
        params = init_model_params(small_config, 3, 1, np.random.default_rng(2), np.float32)
        blob_path, _ = save_checkpoint(params, tmp_path / "ckpt")
        first = np.frombuffer(blob_path.read_bytes(), dtype="<f4", count=1)[0]
        assert first == params.embed_w.ravel()[0]

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent")

    def test_restore_needs_config(self, tmp_path, small_config):
        params = init_model_params(small_config, 3, 1, np.random.default_rng(3), np.float32)
        save_checkpoint(params, tmp_path / "bare")
        with pytest.raises(ShapeError):
            restore_model(tmp_path / "bare")


class TestDatasets:

    def test_synthetic_dataset_is_seeded(self):
        first = make_synthetic_dataset(n_train=4, n_test=2, n_points=16, seed=3)
        second = make_synthetic_dataset(n_train=4, n_test=2, n_points=16, seed=3)
        assert len(first[0]) == 4 and len(first[1]) == 2
        for a, b in zip(first[0] + first[1], second[0] + second[1]):
            np.testing.assert_array_equal(a.points.coords, b.points.coords)
            np.testing.assert_array_equal(a.target, b.target)

    def test_synthetic_cloud(self):
        sample = synthetic_cloud(50, np.random.default_rng(0))
        assert sample.points.coords.shape == (50, 3)
        assert sample.target.shape == (50,)
        radii = np.linalg.norm(sample.points.coords, axis=1)
        assert np.all((radii >= 0.6 - 1e-12) & (radii <= 1.4 + 1e-12))

    def test_load_directory(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(5):
            coords = rng.standard_normal((12, 3))
            extra = np.column_stack([rng.standard_normal(12), rng.standard_normal(12)])
            save_point_cloud(tmp_path / f"cloud_{i}.txt", PointCloud(coords), extra=extra)
        train, test = load_cloud_directory(tmp_path, seed=0)
        assert len(train) == 4 and len(test) == 1
        assert train[0].features.shape == (12, 1)
        assert train[0].target.shape == (12,)

    def test_files_without_target(self, tmp_path):
        save_point_cloud(tmp_path / "cloud.txt", PointCloud(np.zeros((4, 3))))
        with pytest.raises(ShapeError):
            load_cloud_directory(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cloud_directory(tmp_path / "absent")
        with pytest.raises(FileNotFoundError):
            load_cloud_directory(tmp_path)


class TestTrainModel:

    @pytest.fixture
    def data(self):
        return make_synthetic_dataset(n_train=3, n_test=1, n_points=32, seed=0)

    def test_zero_steps_evaluates_initial_model(self, data, small_config):
        result = train_model(*data, small_config, depth=1, steps=0)
        assert len(result.metrics) == 1
        assert result.metrics[0]["step"] == 0
        assert np.isfinite(result.final_test_mse)
        assert result.final_test_mse == result.metrics[0]["test_mse"]

    def test_training_is_deterministic(self, data, small_config):
        first = train_model(*data, small_config, depth=1, steps=3, batch_size=2, eval_interval=1)
        second = train_model(*data, small_config, depth=1, steps=3, batch_size=2, eval_interval=1)
        assert pd.DataFrame(first.metrics).equals(pd.DataFrame(second.metrics))
        assert len(first.metrics) == 4

    def test_training_reduces_loss(self, data, small_config):
        result = train_model(
            *data, small_config, depth=1, steps=30, batch_size=3,
            learning_rate=1e-2, weight_decay=0.0, precision="high",
        )
        assert result.final_train_mse < result.metrics[0]["train_loss"]

    def test_invalid_arguments(self, data, small_config):
        with pytest.raises(InvalidArgumentError):
            train_model([], [], small_config)
        with pytest.raises(InvalidArgumentError):
            train_model(*data, small_config, steps=-1)

    def test_pipeline_outputs(self, tmp_path, small_config):
        metrics_path = tmp_path / "metrics.csv"
        result, outputs = run_training_pipeline(
            small_config, depth=1, steps=1, n_points=32,
            output_path=metrics_path, batch_size=1,
        )
        table = pd.read_csv(metrics_path)
        assert list(table.columns) == METRIC_COLUMNS
        assert len(table) == 2
        assert outputs["checkpoint"] == tmp_path / "metrics_checkpoint.bin"
        assert outputs["manifest"].exists()
        config, params = restore_model(tmp_path / "metrics_checkpoint")
        assert config == small_config
        np.testing.assert_array_equal(params.head_w, result.params.head_w)

    @pytest.mark.slow
    def test_toy_task_parity(self, tmp_path):
        request = TrainRequest()
        mse = {}
        for variant in ("full", "bsa"):
            result, outputs = run_training_pipeline(
                request.model_copy(update={"variant": variant}).bsa_config(),
                depth=request.depth,
                steps=request.steps,
                n_points=request.n_points,
                seed=request.seed,
                output_path=tmp_path / f"train_{variant}.csv",
                batch_size=request.batch_size,
                eval_interval=request.eval_interval,
            )
            assert outputs["metrics"].exists()
            mse[variant] = result.final_test_mse
        assert abs(mse["bsa"] - mse["full"]) / mse["full"] <= ACCEPTANCE_CONFIG["parity_tolerance"]
