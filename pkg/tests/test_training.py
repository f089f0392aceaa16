"""Optimiser, schedule, truncated backprop and training-loop determinism."""

import json
import math

import numpy as np
import pytest

from adamatting import tensor as T
from adamatting import training
from adamatting.errors import ConfigError
from adamatting.losses import quarter_targets, total_loss
from adamatting.model import MattingModel, ModelConfig
from adamatting.nn import Parameter, batch_norms, freeze_batch_norm
from adamatting.pipeline import init_session, step_frame
from adamatting.synth import generate_sequence, random_scene
from adamatting.training import (
    AdamW, TrainConfig, TrainData, TrainingDiverged, augment_clip, clip_grad_norm, clip_loss_step,
    default_schedule, lr_at, make_dataset, make_segmentation_set, native_tail, recalibrate_batch_norm, smoothed,
    train_desk_model, train_stage,
)


def tiny_model(seed=5):
    return MattingModel(ModelConfig.small(seed=seed))


@pytest.fixture(scope="module")
def data():
    return TrainData(make_dataset([0, 1], frames=8, size=(32, 32)),
                     make_segmentation_set([1000, 1001], frames=8, size=(32, 32)))


def grads(model):
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in model.named_parameters()}


class TestLearningRate:
    def test_endpoints(self):
        assert lr_at(0, 100, 1e-3, 10) == 0.0
        assert lr_at(10, 100, 1e-3, 10) == pytest.approx(1e-3)
        assert lr_at(99, 100, 1e-3, 10) == pytest.approx(0.0, abs=1e-15)

    def test_linear_warmup(self):
        assert lr_at(5, 100, 1e-3, 10) == pytest.approx(5e-4)

    def test_cosine_midpoint(self):
        # half-way through the decay span (10 → 99) the cosine sits at half the base rate
        assert lr_at(10 + 89 / 2, 100, 2e-3, 10) == pytest.approx(1e-3)

    def test_monotone_after_warmup(self):
        lrs = [lr_at(s, 50, 1.0, 5) for s in range(5, 50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_no_warmup(self):
        assert lr_at(0, 10, 1.0, 0) == 1.0


class TestAdamW:
    def test_first_step_oracle(self):
        w = Parameter(np.array([[1.0, -2.0]]))
        b = Parameter(np.array([0.5]))
        w.grad, b.grad = np.array([[0.3, -0.1]]), np.array([2.0])
        opt = AdamW([w, b], weight_decay=0.1, eps=1e-8)
        opt.step(0.01)
        # bias-corrected first step moves each entry by lr * g / (|g| + eps)
        g = np.array([0.3, -0.1])
        expect_w = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(w.data[0], expect_w, rtol=1e-12)
        # one-dimensional parameters are not decayed
        np.testing.assert_allclose(b.data, [0.5 - 0.01 * 2.0 / (2.0 + 1e-8)], rtol=1e-12)

    def test_second_step_oracle(self):
        p = Parameter(np.array([[0.0]]))
        opt = AdamW([p], weight_decay=0.0)
        g1, g2 = 1.0, -3.0
        p.grad = np.array([[g1]])
        opt.step(0.1)
        p.grad = np.array([[g2]])
        opt.step(0.1)
        m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1 - 0.9 ** 2)
        v = (0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
        expect = -0.1 * g1 / (abs(g1) + 1e-8) - 0.1 * m / (math.sqrt(v) + 1e-8)
        assert p.data[0, 0] == pytest.approx(expect, rel=1e-10)

    def test_skips_missing_grad(self):
        p = Parameter(np.ones((2, 2)))
        AdamW([p], weight_decay=0.5).step(0.1)
        np.testing.assert_array_equal(p.data, 1.0)

    def test_minimises_quadratic(self):
        p = Parameter(np.array([[3.0, -4.0]]))
        opt = AdamW([p])
        for _ in range(500):
            p.grad = 2 * p.data
            opt.step(0.05)
        assert np.abs(p.data).max() < 0.05


class TestClipGradNorm:
    def test_scales_to_max(self):
        a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        assert math.hypot(*a.grad, *b.grad) == pytest.approx(1.0)

    def test_leaves_small_gradients(self):
        a = Parameter(np.zeros(2))
        a.grad = np.array([0.3, 0.4])
        clip_grad_norm([a], 1.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])


class TestTrainConfig:
    def test_default_schedule_shape(self):
        s1, s2, s3 = default_schedule()
        assert (s1.stage, s1.steps, s1.base_lr, s1.weight_decay) == (1, 1000, 1e-3, 0.03)
        assert (s2.stage, s2.steps, s2.base_lr, s2.weight_decay, s2.alternate) == (2, 2000, 5e-4, 0.07, True)
        assert (s3.stage, s3.steps, s3.base_lr, s3.scale) == (3, 300, 1e-4, 2)
        assert s3.scale >= s2.scale

    @pytest.mark.parametrize("kw", [{"stage": 4}, {"steps": 0}, {"window": 0}, {"warmup_steps": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestAugmentClip:
    def test_consistent_transform(self, data):
        seq = data.matting[0]
        for seed in range(6):
            clip = augment_clip(seq, 2, 4, np.random.default_rng(seed))
            assert len(clip) == 4
            for f, a, m in zip(clip.frames, clip.alpha_gt, clip.mask_gt):
                assert f.shape == (3, 32, 32) and a.shape == m.shape == (1, 32, 32)
                np.testing.assert_array_equal(m, (a >= 0.5).astype(np.float32))

    def test_is_a_rearrangement(self, data):
        seq = data.matting[0]
        clip = augment_clip(seq, 0, 4, np.random.default_rng(3))
        src = sorted(float(seq.alpha_gt[t].sum()) for t in range(4))
        assert sorted(float(a.sum()) for a in clip.alpha_gt) == pytest.approx(src)
        # channel permutation and flip only reorder the pixels of some source frame
        pixels = [np.sort(seq.frames[t].ravel()) for t in range(4)]
        assert any(np.array_equal(np.sort(clip.frames[0].ravel()), p) for p in pixels)


class TestTruncatedBackprop:
    @pytest.fixture
    def setup(self):
        seq = generate_sequence(random_scene(3, frames=8, size=(32, 32)))
        return tiny_model(), seq

    def second_window_grads(self, model, seq, n=8, window=4):
        """Gradients of the second window's loss with the first window run off the tape."""
        model.zero_grad()
        sess = init_session(seq.frames[0], seq.mask_gt[0], model)
        with T.no_grad():
            for t in range(window):
                step_frame(sess, seq.frames[t])
        loss = None
        for t in range(window, n):
            out = step_frame(sess, seq.frames[t])
            q, m = quarter_targets(seq.alpha_gt[t])
            part = total_loss(out, seq.alpha_gt[t], q, m).total * (1.0 / n)
            loss = part if loss is None else loss + part
        loss.backward()
        return grads(model)

    def clip_grads(self, model, seq, clip_len, window):
        model.zero_grad()
        cfg = TrainConfig(clip_len=clip_len, window=window, init_corruption=0.0, augment=False)
        clip_loss_step(model, seq, 0, cfg, False, np.random.default_rng(0))
        return grads(model)

    def test_no_gradient_crosses_window_boundary(self, setup):
        model, seq = setup
        model.train()
        full = self.clip_grads(model, seq, 8, 4)
        first = self.clip_grads(model, seq, 4, 4)    # same frames, loss scaled by 1/4 instead of 1/8
        second = self.second_window_grads(model, seq)
        for name in full:
            np.testing.assert_allclose(full[name] - first[name] / 2, second[name], rtol=1e-3,
                                       atol=1e-6 * max(1.0, np.abs(full[name]).max()), err_msg=name)

    def test_single_window_differs(self, setup):
        model, seq = setup
        model.train()
        full = self.clip_grads(model, seq, 8, 8)
        first = self.clip_grads(model, seq, 4, 4)
        second = self.second_window_grads(model, seq)
        diff = max(np.abs(full[n] - first[n] / 2 - second[n]).max() for n in full)
        assert diff > 1e-4


class TestTrainStage:
    def cfg(self, **kw):
        base = dict(stage=2, steps=4, base_lr=1e-3, warmup_steps=1, clip_len=3, window=3, seed=11)
        return TrainConfig(**{**base, **kw})

    def test_trace_deterministic(self, data, tmp_path):
        a = train_stage(tiny_model(), self.cfg(), data, tmp_path / "a.jsonl")
        b = train_stage(tiny_model(), self.cfg(), data, tmp_path / "b.jsonl")
        assert a == b
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_trace_records(self, data, tmp_path):
        trace = train_stage(tiny_model(), self.cfg(), data, tmp_path / "t.jsonl")
        lines = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert lines == trace and len(trace) == 4
        assert set(trace[0]) == {"stage", "step", "lr", "kind", "grad_norm", "total", "mask", "coarse", "fine"}
        assert trace[0]["lr"] == 0.0

    def test_alternation(self, data):
        kinds = [r["kind"] for r in train_stage(tiny_model(), self.cfg(steps=4), data)]
        assert kinds == ["matting", "segmentation", "matting", "segmentation"]

    def test_segmentation_steps_are_mask_only(self, data):
        for r in train_stage(tiny_model(), self.cfg(stage=1, teacher_forcing=True), data):
            assert r["kind"] == "segmentation" and r["coarse"] == r["fine"] == 0.0
            assert r["total"] == r["mask"]

    def test_parameters_change(self, data):
        model = tiny_model()
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        train_stage(model, self.cfg(steps=2), data)
        assert any(not np.array_equal(before[n], p.data) for n, p in model.named_parameters())

    def test_non_finite_aborts_with_dump(self, data, tmp_path):
        model = tiny_model()
        model.decoder.parameters()[0].data[:] = np.nan
        log = tmp_path / "t.jsonl"
        with pytest.raises(TrainingDiverged):
            train_stage(model, self.cfg(), data, log)
        dump = json.loads(log.with_suffix(".diverged.json").read_text())
        assert dump["step"] == 0 and dump["config"]["stage"] == 2

    def test_frozen_batch_norm_stats_unchanged(self, data):
        model = tiny_model()
        bn = batch_norms(model)[0]
        before = bn.running_mean.copy()
        train_stage(model, self.cfg(steps=2, freeze_bn=True), data)
        np.testing.assert_array_equal(bn.running_mean, before)


class TestBatchNormCalibration:
    def test_recalibration_pools_statistics(self, data):
        model = tiny_model()
        recalibrate_batch_norm(model, data.matting[:1])
        bn = batch_norms(model)[0]
        # the first encoder layer sees every frame once per step plus frame 0 at init
        seq = data.matting[0]
        frames = [seq.frames[0]] + list(seq.frames)
        conv = model.encoder.stages[0].layers[0].conv
        with T.no_grad():
            acts = np.stack([conv(T.Tensor(f)).data.astype(np.float64) for f in frames])
        np.testing.assert_allclose(bn.running_mean, acts.mean(axis=(0, 2, 3)), rtol=1e-4, atol=1e-6)
        n = acts.shape[0] * acts.shape[2] * acts.shape[3]
        np.testing.assert_allclose(bn.running_var, acts.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-3)

    def test_freeze_switches_to_running_stats(self):
        model = tiny_model()
        model.train()
        freeze_batch_norm(model)
        assert all(not bn.training for bn in batch_norms(model))


class TestDeskRecipe:
    def tiny_stages(self):
        return [TrainConfig(stage=c.stage, steps=2, warmup_steps=1, alternate=c.alternate, scale=c.scale,
                            teacher_forcing=c.teacher_forcing, clip_len=2, window=2, seed=c.seed)
                for c in default_schedule()]

    def test_bn_frozen_after_stage_2(self, monkeypatch):
        seen = []
        real = training.train_stage

        def spy(model, cfg, data, log_path=None, weights=None):
            before = {n: b.copy() for n, b in model.named_buffers()}
            trace = real(model, cfg, data, log_path)
            unchanged = all(np.array_equal(before[n], b) for n, b in model.named_buffers())
            seen.append((cfg.stage, cfg.scale, cfg.freeze_bn, unchanged))
            return trace

        monkeypatch.setattr(training, "train_stage", spy)
        tail = TrainConfig(stage=3, steps=2, warmup_steps=1, clip_len=2, window=2, seed=4)
        res = train_desk_model(tiny_model(), self.tiny_stages(), train_seeds=[0], frames=4, size=(32, 32), tail=tail)
        assert seen == [(1, 1, False, False), (2, 1, False, False), (3, 2, True, True), (3, 1, True, True)]
        assert len(res.trace) == 8 and "calibration" in res.seconds

    def test_stages_use_pooled_statistics(self):
        stages = [c for c in self.tiny_stages() if c.stage < 3]
        model = tiny_model()
        train_desk_model(model, stages, train_seeds=[0], frames=4, size=(32, 32), tail=None)
        pooled = {n: b.copy() for n, b in model.named_buffers()}
        recalibrate_batch_norm(model, make_dataset([0], frames=4, size=(32, 32)))
        for n, b in model.named_buffers():
            np.testing.assert_array_equal(pooled[n], b)

    def test_native_tail_defaults(self):
        tail = native_tail()
        assert (tail.stage, tail.scale, tail.steps) == (3, 1, 300)


class TestSmoothed:
    def test_trailing_mean(self):
        np.testing.assert_allclose(smoothed([1, 2, 3, 4], k=2), [1, 1.5, 2.5, 3.5])

    def test_constant(self):
        np.testing.assert_allclose(smoothed(np.full(10, 2.0), k=3), 2.0)
