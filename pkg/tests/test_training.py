import numpy as np
import pytest

from geofield.autodiff import Parameter
from geofield.data import SamplerConfig, SceneSampler, synthetic_datasets
from geofield.errors import CheckpointError, NumericError
from geofield.model import FieldModel, preset
from geofield.modalities import ModalityRegistry, ModalitySpec, TASK_SCALAR, synthetic_registry
from geofield.training import Adam, TrainLog, load_checkpoint, save_checkpoint, train, train_step


def make_setup(model_seed=0, sampler_seed=0, lr=3e-4, clip=1.0, n_points=200):
    registry = synthetic_registry()
    model = FieldModel(preset("micro", seed=model_seed), registry)
    sampler = SceneSampler(
        synthetic_datasets(n_points, seed=17),
        registry,
        SamplerConfig(max_observations=24, max_queries=8, seed=sampler_seed),
    )
    optimizer = Adam(model.parameters(), lr=lr, clip_norm=clip)
    return model, sampler, optimizer


def snapshot(model):
    return {p.name: p.data.copy() for p in model.parameters()}


class TestAdam:
    def test_zero_gradient_leaves_parameter_unchanged(self):
        p = Parameter("p", np.array([1.0, -2.0]))
        opt = Adam([p], lr=1e-3, clip_norm=None)
        p.tensor.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude_is_learning_rate(self):
        p = Parameter("p", np.array([0.0]))
        opt = Adam([p], lr=1e-3, clip_norm=None)
        p.tensor.grad = np.ones(1)
        opt.step()
        # bias-corrected first step: lr * g / (|g| + eps') ~= lr
        assert abs(p.data[0] + 1e-3) < 1e-6

    def test_scalar_quadratic_converges(self):
        p = Parameter("theta", np.array([1.0]))
        opt = Adam([p], lr=1e-2, clip_norm=None)
        for _ in range(2000):
            p.tensor.grad = 2.0 * p.data
            opt.step()
        assert abs(p.data[0]) < 1e-2

    def test_sign_flip_equivariance(self):
        g = np.random.default_rng(0).normal(size=(4,))
        updates = []
        for sign in (1.0, -1.0):
            p = Parameter("p", np.zeros(4))
            opt = Adam([p], lr=1e-3, clip_norm=None)
            p.tensor.grad = sign * g
            opt.step()
            updates.append(p.data.copy())
        assert np.array_equal(updates[0], -updates[1])

    def test_clipping_bounds_update(self):
        p = Parameter("p", np.zeros(3))
        opt = Adam([p], lr=1.0, clip_norm=1.0)
        p.tensor.grad = np.full(3, 100.0)
        norm = opt.step()
        assert norm == pytest.approx(np.sqrt(3) * 100.0)
        clipped = np.linalg.norm(opt.m[p.name] / (1 - 0.9))
        assert clipped <= 1.0 + 1e-9


class TestTrainStep:
    def test_loss_decreases_on_average(self):
        model, sampler, optimizer = make_setup(lr=3e-3)
        log = train(model, sampler, optimizer, steps=300)
        early = np.mean([r["loss"] for r in log.records[:50]])
        late = np.mean([r["loss"] for r in log.records[-50:]])
        assert late < early

    def test_one_record_per_step_with_required_fields(self):
        model, sampler, optimizer = make_setup()
        log = train(model, sampler, optimizer, steps=10)
        assert len(log) == 10
        for rec in log.records:
            for key in ("loss", "per_modality", "n_modalities", "n_tokens", "n_queries", "wall_time", "step"):
                assert key in rec

    def test_deterministic_trajectories_for_100_steps(self):
        final = []
        for _ in range(2):
            model, sampler, optimizer = make_setup(model_seed=1, sampler_seed=2)
            train(model, sampler, optimizer, steps=100)
            final.append(snapshot(model))
        for name in final[0]:
            assert np.array_equal(final[0][name], final[1][name]), name

    def test_empty_subset_step_updates_null_token(self):
        model, sampler, optimizer = make_setup(sampler_seed=3)
        # find and run an empty-subset scene
        scene = sampler.step()
        while scene.observations:
            scene = sampler.step()
        before = model.param("null_token").data.copy()
        train_step(model, scene, optimizer)
        after = model.param("null_token").data
        assert np.linalg.norm(after - before) > 0.0

    def test_forward_is_stateless(self):
        model, sampler, _ = make_setup()
        scene = sampler.step()
        a = model.predict(scene.observations, scene.queries)
        b = model.predict(scene.observations, scene.queries)
        assert np.array_equal(a, b)

    def test_non_finite_loss_names_modality(self):
        model, sampler, optimizer = make_setup()
        model.param("decoder.head.w").data = np.full_like(model.param("decoder.head.w").data, np.nan)
        scene = sampler.step()
        with pytest.raises(NumericError, match="modality|loss"):
            train_step(model, scene, optimizer)

    def test_gradients_zeroed_after_step(self):
        model, sampler, optimizer = make_setup()
        train_step(model, sampler.step(), optimizer)
        for p in model.parameters():
            assert p.grad is None

    def test_no_parameter_goes_non_finite_over_long_run(self):
        model, sampler, optimizer = make_setup(lr=3e-3)
        train(model, sampler, optimizer, steps=1000)
        for p in model.parameters():
            assert np.isfinite(p.data).all(), p.name


class TestTrainLog:
    def test_jsonl_roundtrip(self, tmp_path):
        model, sampler, optimizer = make_setup()
        log = train(model, sampler, optimizer, steps=5)
        path = tmp_path / "log.jsonl"
        log.write_jsonl(path)
        again = TrainLog.read_jsonl(path)
        assert again.records == log.records

    def test_smoothed_loss_window(self):
        log = TrainLog(records=[{"loss": float(i)} for i in range(10)])
        sm = log.smoothed_loss(window=3)
        assert sm[0] == 0.0
        assert sm[-1] == pytest.approx(8.0)


class TestCheckpoint:
    def test_roundtrip_restores_every_parameter_bit_exactly(self, tmp_path):
        model, sampler, optimizer = make_setup()
        train(model, sampler, optimizer, steps=20)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, optimizer=optimizer, sampler=sampler)
        bundle = load_checkpoint(path)
        for p in model.parameters():
            assert np.array_equal(bundle.model.param(p.name).data, p.data), p.name
        assert bundle.optimizer.step_count == optimizer.step_count

    def test_save_load_save_is_byte_identical(self, tmp_path):
        model, sampler, optimizer = make_setup()
        train(model, sampler, optimizer, steps=5)
        first = tmp_path / "a.ckpt"
        save_checkpoint(first, model, optimizer=optimizer, sampler=sampler)
        bundle = load_checkpoint(first)
        second = tmp_path / "b.ckpt"
        restored_sampler = bundle.restore_sampler(synthetic_datasets(200, seed=17))
        save_checkpoint(second, bundle.model, optimizer=bundle.optimizer, sampler=restored_sampler)
        assert first.read_bytes() == second.read_bytes()

    def test_resume_matches_unbroken_run(self, tmp_path):
        # unbroken: 100 steps
        model_a, sampler_a, opt_a = make_setup(model_seed=4, sampler_seed=5)
        train(model_a, sampler_a, opt_a, steps=50)
        mid = tmp_path / "mid.ckpt"
        save_checkpoint(mid, model_a, optimizer=opt_a, sampler=sampler_a)
        log_a = train(model_a, sampler_a, opt_a, steps=50, start_step=50)

        bundle = load_checkpoint(mid)
        sampler_b = bundle.restore_sampler(synthetic_datasets(200, seed=17))
        log_b = train(bundle.model, sampler_b, bundle.optimizer, steps=50, start_step=50)

        for ra, rb in zip(log_a.records, log_b.records):
            assert ra["loss"] == rb["loss"]
        for p in model_a.parameters():
            assert np.array_equal(bundle.model.param(p.name).data, p.data), p.name

    def test_registry_mismatch_rejected(self, tmp_path):
        model, sampler, optimizer = make_setup()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        other = ModalityRegistry([
            ModalitySpec(name="other", task_kind=TASK_SCALAR, description="other field",
                         value_range=(0.0, 1.0), normalizer=1.0),
        ])
        with pytest.raises(CheckpointError, match="registry"):
            load_checkpoint(path, registry=other)

    def test_truncated_archive_rejected(self, tmp_path):
        model, _, _ = make_setup()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "noise.ckpt"
        path.write_bytes(b"not a zip at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
