import numpy as np
import pytest

from qcdiff import adapter as ad
from qcdiff import rng as qrng
from qcdiff import synthdata as sd
from qcdiff.diffusion import (
    DiffusionSchedule,
    SamplerConfig,
    cfg_predict,
    forward_noise,
    sample,
    strided_timesteps,
    train_adapter,
    train_step,
)
from qcdiff.errors import ConfigurationError, ParameterError
from qcdiff.iqa import QualityCondition
from qcdiff.optim import AdamW
from qcdiff.unet import NULL_CLASS, DenoiserModel

from test_unet import make_attachment, make_model


class TestSchedule:
    def test_linear_invariants(self):
        s = DiffusionSchedule.linear()
        assert s.T == 200
        assert np.all(s.betas > 0) and np.all(s.betas < 1)
        assert np.all(np.diff(s.betas) > 0)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[0] == 1.0
        assert s.alpha_bars[-1] < 0.05

    def test_bad_params(self):
        with pytest.raises(ParameterError):
            DiffusionSchedule.linear(T=0)
        with pytest.raises(ParameterError):
            DiffusionSchedule.linear(beta_start=0.0)
        with pytest.raises(ParameterError):
            DiffusionSchedule.linear(beta_start=0.5, beta_end=0.1)


class TestForwardNoise:
    def setup_method(self):
        self.s = DiffusionSchedule.linear()

    def test_t_zero_identity(self):
        x0 = np.random.default_rng(0).standard_normal((3, 8, 8)).astype(np.float32)
        eps = np.ones_like(x0)
        assert np.allclose(forward_noise(x0, 0, eps, self.s), x0, atol=1e-6)

    def test_linearity_basis_vector(self):
        x0 = np.zeros((4,), dtype=np.float32)
        eps = np.array([1.0, 0, 0, 0], dtype=np.float32)
        t = 100
        out = forward_noise(x0, t, eps, self.s)
        assert out[0] == pytest.approx(np.sqrt(1 - self.s.alpha_bars[t]), rel=1e-6)
        assert np.all(out[1:] == 0)

    def test_monte_carlo_variance(self):
        """Var(x_t) over 10k draws matches 1 - alpha_bar_t within 5%."""
        rng = np.random.default_rng(3)
        t = 150
        x0 = np.full((1,), 0.3, dtype=np.float32)
        draws = np.array(
            [forward_noise(x0, t, rng.standard_normal(1).astype(np.float32), self.s)[0]
             for _ in range(10000)]
        )
        want = 1 - self.s.alpha_bars[t]
        assert draws.var() == pytest.approx(want, rel=0.05)

    def test_out_of_range_t(self):
        x0 = np.zeros((2,), dtype=np.float32)
        with pytest.raises(ParameterError):
            forward_noise(x0, self.s.T + 1, x0, self.s)
        with pytest.raises(ParameterError):
            forward_noise(x0, -1, x0, self.s)


class TestStridedTimesteps:
    def test_covers_endpoints_descending(self):
        ts = strided_timesteps(200, 35)
        assert ts[0] == 200 and ts[-1] == 1
        assert np.all(np.diff(ts) < 0)
        assert len(ts) <= 35

    def test_full_schedule(self):
        ts = strided_timesteps(10, 10)
        assert list(ts) == list(range(10, 0, -1))

    def test_bad_steps(self):
        with pytest.raises(ParameterError):
            strided_timesteps(10, 0)
        with pytest.raises(ParameterError):
            strided_timesteps(10, 11)


class TestTrainStep:
    def setup_method(self):
        self.s = DiffusionSchedule.linear()
        self.records = sd.build_dataset(16, 0.75, qrng.stream(1, "data"))

    def test_untrained_loss_near_one(self):
        """Zero-initialized output head predicts 0 against unit noise."""
        model = DenoiserModel(np.random.default_rng(0))
        losses = [
            train_step(model, self.records, self.s, 0.1, np.random.default_rng(i)).item()
            for i in range(4)
        ]
        assert np.mean(losses) == pytest.approx(1.0, abs=0.1)

    def test_empty_batch_rejected(self):
        model = DenoiserModel(np.random.default_rng(0))
        with pytest.raises(ParameterError):
            train_step(model, [], self.s, 0.1, np.random.default_rng(0))

    def test_bad_dropout_rejected(self):
        model = DenoiserModel(np.random.default_rng(0))
        with pytest.raises(ParameterError):
            train_step(model, self.records, self.s, 1.0, np.random.default_rng(0))

    def test_loss_decreases_with_training(self):
        model = DenoiserModel(np.random.default_rng(0))
        opt = AdamW(model.store.tensors(), lr=2e-3)
        rng = np.random.default_rng(1)
        losses = []
        for _ in range(30):
            loss = train_step(model, self.records, self.s, 0.1, rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_frozen_base_gets_no_gradients(self):
        model = make_model(live_attention=True)
        att = make_attachment()
        model.store.freeze()
        model.attach(att)
        q = np.random.default_rng(0).standard_normal((16, 2)).astype(np.float32)
        loss = train_step(
            model, self.records, self.s, 0.1, np.random.default_rng(2),
            adapter=att, quality_inputs=q,
        )
        loss.backward()
        assert all(p.grad is None for p in model.store.tensors().values())
        adapter_grads = [p.grad for p in att.weights.store.tensors().values()]
        assert any(g is not None and np.abs(g).sum() > 0 for g in adapter_grads)
        model.detach()
        model.store.unfreeze()

    def test_adapter_without_inputs_rejected(self):
        model = make_model()
        att = make_attachment()
        model.attach(att)
        with pytest.raises(ConfigurationError):
            train_step(model, self.records, self.s, 0.1, np.random.default_rng(0), adapter=att)
        model.detach()


class TestCfgPredict:
    def setup_method(self):
        self.s = DiffusionSchedule.linear()
        self.model = make_model(live_attention=True)
        rng = np.random.default_rng(5)
        self.x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        self.t = np.array([50, 120])
        self.ids = np.array([1, 6])

    def test_g1_is_conditional_exactly(self):
        got = cfg_predict(self.model, self.x, self.t, self.ids, 1.0)
        want = self.model.predict(self.x, self.t, self.ids)
        assert np.array_equal(got, want)

    def test_g0_is_unconditional_exactly(self):
        got = cfg_predict(self.model, self.x, self.t, self.ids, 0.0)
        null_ids = np.full(2, NULL_CLASS)
        want = self.model.predict(self.x, self.t, null_ids)
        assert np.array_equal(got, want)

    def test_g2_two_pass_oracle(self):
        got = cfg_predict(self.model, self.x, self.t, self.ids, 2.0)
        cond = self.model.predict(self.x, self.t, self.ids)
        uncond = self.model.predict(self.x, self.t, np.full(2, NULL_CLASS))
        assert np.allclose(got, uncond + 2.0 * (cond - uncond), atol=1e-6)


class TestSample:
    def setup_method(self):
        self.s = DiffusionSchedule.linear()
        self.model = make_model(live_attention=True)

    def test_same_seed_bitwise_identical(self):
        cfg = SamplerConfig(g=7.5, steps=10, rng_seed=42)
        ids = np.array([0, 3])
        a = sample(self.model, self.s, cfg, ids)
        b = sample(self.model, self.s, cfg, ids)
        assert np.array_equal(a, b)

    def test_output_range_and_shape(self):
        cfg = SamplerConfig(g=2.0, steps=8, rng_seed=1)
        out = sample(self.model, self.s, cfg, np.array([5]))
        assert out.shape == (1, 3, 32, 32)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_different_seeds_differ(self):
        ids = np.array([2])
        a = sample(self.model, self.s, SamplerConfig(steps=8, rng_seed=1), ids)
        b = sample(self.model, self.s, SamplerConfig(steps=8, rng_seed=2), ids)
        assert not np.array_equal(a, b)

    def test_conditions_without_adapter_rejected(self):
        cfg = SamplerConfig(steps=8, rng_seed=1)
        cond = [QualityCondition(scores=np.array([1.0, 0.5]), provenance="raw")]
        with pytest.raises(ConfigurationError):
            sample(self.model, self.s, cfg, np.array([0]), cond)

    def test_negative_guidance_requires_adapter(self):
        from qcdiff.diffusion import NegativeGuidanceConfig

        cfg = SamplerConfig(steps=8, rng_seed=1, negative=NegativeGuidanceConfig(0.3))
        with pytest.raises(ConfigurationError):
            sample(self.model, self.s, cfg, np.array([0]))


class TestTrainAdapter:
    def test_base_checksum_unchanged(self):
        records = sd.build_dataset(24, 0.8, qrng.stream(9, "data"))
        model = make_model(live_attention=True)
        before = model.store.checksum()
        q = np.random.default_rng(1).standard_normal((24, 2)).astype(np.float32)
        att, losses = train_adapter(
            model, records, q, steps=10, batch_size=8, rng=np.random.default_rng(0)
        )
        assert model.store.checksum() == before
        assert model.adapter is None
        assert len(losses) == 10
        assert att.weights.input_dim == 2

    def test_mismatched_rows_rejected(self):
        records = sd.build_dataset(10, 0.8, qrng.stream(9, "data"))
        model = make_model()
        q = np.zeros((5, 2), dtype=np.float32)
        with pytest.raises(ConfigurationError):
            train_adapter(model, records, q, steps=1, rng=np.random.default_rng(0))
