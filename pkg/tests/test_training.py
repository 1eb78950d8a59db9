import csv
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest
import torch

import modules.training as training
from core.config import RunConfig, TrainConfig
from core.errors import ValidationError
from modules.data_io import VideoSample
from modules.labels import assign_all_scales
from modules.model import DTYPE, build_model
from modules.synthetic import SyntheticSpec, generate_synthetic
from modules.training import (
    AdamState,
    CheckpointFormatError,
    KeyMismatchError,
    NonFiniteGradientError,
    TrainingDiverged,
    adam_step,
    backward,
    batch_gradients,
    check_dataset,
    load_checkpoint,
    load_model,
    save_checkpoint,
    train,
)


def _config(small_encoder, **train_changes):
    params = dict(epochs=2, T=16, batch_size=2, lr=1e-3, seed=7)
    params.update(train_changes)
    return RunConfig(encoder=small_encoder, train=TrainConfig(**params))


class TestBackward:

    def test_linear_loss(self, rng):
        w = torch.from_numpy(rng.standard_normal((3, 4))).requires_grad_()
        grads = backward(w.sum(), OrderedDict(w=w))
        np.testing.assert_array_equal(grads["w"].numpy(), np.ones((3, 4)))

    def test_quadratic_loss(self, rng):
        w = torch.from_numpy(rng.standard_normal(5)).requires_grad_()
        grads = backward(0.5 * (w * w).sum(), OrderedDict(w=w))
        np.testing.assert_allclose(grads["w"].numpy(), w.detach().numpy(), atol=1e-15)

    def test_unreached_tensor_gets_zeros(self):
        a = torch.ones(2, requires_grad=True)
        b = torch.ones(3, requires_grad=True)
        grads = backward(a.sum(), OrderedDict(a=a, b=b))
        assert torch.equal(grads["b"], torch.zeros(3))

    def test_non_finite_gradient_names_tensor(self):
        w = torch.zeros(2, requires_grad=True)
        with pytest.raises(NonFiniteGradientError, match="'w'"):
            backward(torch.sqrt(w).sum(), OrderedDict(w=w))


class TestAdam:

    def test_zero_gradient_keeps_parameters(self, rng):
        w = torch.from_numpy(rng.standard_normal(4))
        before = w.clone()
        state = AdamState()
        adam_step(OrderedDict(w=w), {"w": torch.zeros(4)}, state, TrainConfig(lr=0.1))
        assert torch.equal(w, before)
        assert state.step == 1

    def test_first_step_is_sign_sized(self):
        w = torch.zeros(3)
        g = torch.tensor([2.0, -0.5, 1e-3])
        config = TrainConfig(lr=0.01)
        adam_step(OrderedDict(w=w), {"w": g}, AdamState(), config)
        expected = -0.01 * g / (g.abs() + config.adam_eps)
        np.testing.assert_allclose(w.numpy(), expected.numpy(), rtol=1e-12)

    def test_matches_torch_adam(self, rng):
        start = rng.standard_normal(6)
        ours = torch.from_numpy(start.copy())
        theirs = torch.from_numpy(start.copy()).requires_grad_()
        config = TrainConfig(lr=0.05)
        reference = torch.optim.Adam([theirs], lr=0.05, betas=(0.9, 0.999), eps=config.adam_eps)
        state = AdamState()
        for _ in range(5):
            g = torch.from_numpy(rng.standard_normal(6))
            adam_step(OrderedDict(w=ours), {"w": g}, state, config)
            theirs.grad = g.clone()
            reference.step()
        np.testing.assert_allclose(ours.numpy(), theirs.detach().numpy(), rtol=1e-10, atol=1e-12)

    def test_key_mismatch(self):
        with pytest.raises(KeyMismatchError):
            adam_step(OrderedDict(w=torch.zeros(2)), {"v": torch.zeros(2)}, AdamState(), TrainConfig())


class TestCheckpoint:

    def test_round_trip(self, tmp_path, rng):
        params = OrderedDict(
            [("a.weight", torch.from_numpy(rng.standard_normal((3, 2, 4)))),
             ("b", torch.from_numpy(rng.standard_normal(5)))])
        meta = {"config": {"train": {"lr": 0.1}}, "model": {"T": 4}}
        path = save_checkpoint(tmp_path / "c.tagc", params, meta)
        tensors, back = load_checkpoint(path)
        assert list(tensors) == ["a.weight", "b"]
        for name in params:
            assert tensors[name].numpy().tobytes() == params[name].numpy().tobytes()
        assert back == meta
        assert not (tmp_path / "c.tagc.tmp").exists()

    def test_layout(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.tagc", OrderedDict(w=torch.ones(2, 3)), {})
        data = path.read_bytes()
        assert data[:4] == b"TAGC"
        assert struct.unpack("<II", data[4:12]) == (1, 1)
        assert struct.unpack("<H", data[12:14]) == (1,)
        assert data[14:15] == b"w"
        assert data[15] == 2
        assert struct.unpack("<2I", data[16:24]) == (2, 3)
        assert struct.unpack("<6d", data[24:72]) == (1.0,) * 6
        assert struct.unpack("<I", data[72:76]) == (2,)
        assert data[76:] == b"{}"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.tagc"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.tagc", OrderedDict(w=torch.ones(4)), {"a": 1})
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)


class TestBatchGradients:

    def test_pool_matches_sequential(self, small_dataset, small_encoder):
        samples, annotations = small_dataset
        config = _config(small_encoder)
        model = build_model(8, 3, 16, small_encoder, seed=3)
        targets = [assign_all_scales(s.annotation, 16, model.scales, annotations.classes) for s in samples]
        sequential, terms = batch_gradients(model, samples, targets, config)
        with ThreadPoolExecutor(max_workers=3) as pool:
            pooled, _ = batch_gradients(model, samples, targets, config, pool)
        for name in sequential:
            assert torch.equal(sequential[name], pooled[name])
        assert len(terms) == len(samples)

    def test_mean_of_single_videos(self, small_dataset, small_encoder):
        samples, annotations = small_dataset
        config = _config(small_encoder)
        model = build_model(8, 3, 16, small_encoder, seed=3)
        targets = [assign_all_scales(s.annotation, 16, model.scales, annotations.classes) for s in samples]
        both, _ = batch_gradients(model, samples[:2], targets[:2], config)
        first, _ = batch_gradients(model, samples[:1], targets[:1], config)
        second, _ = batch_gradients(model, samples[1:2], targets[1:2], config)
        for name in both:
            np.testing.assert_allclose(both[name].numpy(), ((first[name] + second[name]) / 2).numpy(),
                                       atol=1e-12)


class TestTrain:

    def test_outputs(self, tmp_path, small_dataset, small_encoder):
        samples, annotations = small_dataset
        result = train(samples, annotations.classes, _config(small_encoder), tmp_path)
        assert result.checkpoint.exists() and result.metrics.exists()
        with open(result.metrics, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["epoch", "L_c", "L_m", "L_pp", "L_fc", "total"]
        assert [int(r["epoch"]) for r in rows] == [1, 2]
        for row in rows:
            parts = sum(float(row[k]) for k in ("L_c", "L_m", "L_pp", "L_fc"))
            assert float(row["total"]) == pytest.approx(parts, rel=1e-9)

    def test_zero_learning_rate_keeps_initial_parameters(self, tmp_path, small_dataset, small_encoder):
        samples, annotations = small_dataset
        result = train(samples, annotations.classes, _config(small_encoder, lr=0.0), tmp_path)
        initial = build_model(8, 3, 16, small_encoder, seed=7).named_tensors()
        for name, param in result.model.named_tensors().items():
            assert torch.equal(param, initial[name])

    def test_same_seed_gives_identical_checkpoints(self, tmp_path, small_dataset, small_encoder):
        samples, annotations = small_dataset
        first = train(samples, annotations.classes, _config(small_encoder), tmp_path / "a")
        second = train(samples, annotations.classes, _config(small_encoder, workers=2), tmp_path / "b")
        assert first.checkpoint.read_bytes() == second.checkpoint.read_bytes()

    def test_reload_reproduces_forward(self, tmp_path, small_dataset, small_encoder):
        samples, annotations = small_dataset
        result = train(samples, annotations.classes, _config(small_encoder, epochs=1), tmp_path)
        model, config, classes = load_model(result.checkpoint)
        assert classes == annotations.classes
        assert config.train.T == 16 and config.encoder.scales == (1, 2)
        x = torch.as_tensor(samples[0].features.values, dtype=DTYPE)
        with torch.no_grad():
            for a, b in zip(result.model(x), model(x)):
                assert torch.equal(a.P, b.P) and torch.equal(a.M, b.M) and torch.equal(a.E, b.E)

    def test_divergence_keeps_last_good_checkpoint(self, tmp_path, small_dataset, small_encoder, monkeypatch):
        samples, annotations = small_dataset
        real = training.total_loss

        def poisoned(*args, **kwargs):
            breakdown = real(*args, **kwargs)
            return replace(breakdown, total=breakdown.total * float("nan"))

        monkeypatch.setattr(training, "total_loss", poisoned)
        with pytest.raises(TrainingDiverged) as info:
            train(samples, annotations.classes, _config(small_encoder), tmp_path)
        assert info.value.epoch == 1
        assert info.value.exit_code == 2
        model, _, _ = load_model(tmp_path / "checkpoint.tagc")
        initial = build_model(8, 3, 16, small_encoder, seed=7).named_tensors()
        for name, param in model.named_tensors().items():
            assert torch.equal(param, initial[name])
        assert (tmp_path / "metrics.csv").read_text().startswith("epoch,L_c")

    def test_dataset_checks(self, small_dataset):
        samples, _ = small_dataset
        with pytest.raises(ValidationError):
            check_dataset([], 16)
        with pytest.raises(ValidationError, match="T=32"):
            check_dataset(samples, 32)


@pytest.mark.slow
def test_total_loss_decreases_on_synthetic_set(tmp_path):
    spec = SyntheticSpec(num_videos=20, K=3, T=64, noise_sigma=0.1, seed=7)
    sequences, annotations = generate_synthetic(spec)
    samples = [VideoSample(s, annotations.videos[s.video_id]) for s in sequences]
    config = RunConfig.from_preset("synthetic").override({"train.epochs": 5})
    result = train(samples, annotations.classes, config, tmp_path)
    totals = [row["total"] for row in result.history]
    rises = sum(b >= a for a, b in zip(totals, totals[1:]))
    assert rises <= 1
    assert totals[-1] < totals[0]
