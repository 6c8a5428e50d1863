import numpy as np
import pytest
from scipy import stats

from qcdiff import rng as qrng
from qcdiff import synthdata as sd
from qcdiff import tensor as T
from qcdiff.errors import DegenerateDataError, DimensionError, ParameterError
from qcdiff.iqa import (
    CONDITION_METRICS,
    IqaModel,
    QualityCondition,
    ScoreStandardizer,
    analytic_metrics,
    condition_scores,
    fit_standardizer,
    percentile_condition,
    train_iqa,
    load_iqa,
    save_iqa,
)
from qcdiff.tensor import Tensor


class TestAnalyticMetrics:
    def test_constant_image_all_zero(self):
        m = analytic_metrics(np.full((3, 32, 32), 0.4, dtype=np.float32))
        assert m.sharpness == pytest.approx(0.0, abs=1e-10)
        assert m.noise_level == pytest.approx(0.0, abs=1e-10)
        assert m.contrast == pytest.approx(0.0, abs=1e-10)
        assert m.blockiness == pytest.approx(0.0, abs=1e-10)

    def test_horizontal_flip_invariance(self):
        img = sd.render_scene(sd.SceneSpec(0, 17))
        a = analytic_metrics(img).as_vector()
        b = analytic_metrics(np.ascontiguousarray(img[:, :, ::-1])).as_vector()
        assert np.abs(a - b).max() <= 1e-6

    def test_blur_drops_sharpness_90pct(self):
        img = sd.render_scene(sd.SceneSpec(3, 42))
        clean = analytic_metrics(img).sharpness
        blurred = sd.degrade(
            img,
            sd.DegradationSpec(sd.DegradationKind.GAUSSIAN_BLUR, 0.9),
            np.random.default_rng(0),
        )
        assert analytic_metrics(blurred).sharpness < 0.1 * clean

    def test_wrong_shape_rejected(self):
        with pytest.raises(DimensionError):
            analytic_metrics(np.zeros((3, 16, 16), dtype=np.float32))

    def test_noise_raises_noise_level(self):
        img = sd.render_scene(sd.SceneSpec(4, 3))
        noisy = sd.degrade(
            img,
            sd.DegradationSpec(sd.DegradationKind.ADDITIVE_NOISE, 0.7),
            np.random.default_rng(1),
        )
        assert analytic_metrics(noisy).noise_level > analytic_metrics(img).noise_level


class TestIqaModel:
    def setup_method(self):
        self.model = IqaModel(np.random.default_rng(7))
        self.img = sd.render_scene(sd.SceneSpec(2, 5))

    def test_score_deterministic(self):
        assert self.model.score(self.img) == self.model.score(self.img)

    def test_embed_deterministic_and_finite_on_zero(self):
        a = self.model.embed(self.img).vector
        b = self.model.embed(self.img).vector
        assert np.array_equal(a, b) and a.shape == (64,)
        z = self.model.embed(np.zeros((3, 32, 32), dtype=np.float32)).vector
        assert np.all(np.isfinite(z))

    def test_score_gradient_matches_finite_differences(self):
        """Spec contract: rel. err < 1e-2 on 10 random pixels."""
        x = Tensor(self.img[None].copy(), requires_grad=True)
        self.model.score_tensor(x).sum().backward()
        ana = x.grad[0]
        rng = np.random.default_rng(0)
        h = 2e-3
        for _ in range(10):
            c, i, j = rng.integers(0, [3, 32, 32])
            pert = self.img.astype(np.float64)
            pert[c, i, j] += h
            hi = self.model.score(pert.astype(np.float32))
            pert[c, i, j] -= 2 * h
            lo = self.model.score(pert.astype(np.float32))
            num = (hi - lo) / (2 * h)
            denom = max(abs(num), 1e-2)
            assert abs(ana[c, i, j] - num) / denom < 1e-2

    def test_checkpoint_round_trip(self, tmp_path):
        path = tmp_path / "iqa.qda"
        save_iqa(path, self.model)
        loaded = load_iqa(path)
        assert loaded.score(self.img) == pytest.approx(self.model.score(self.img))


class TestTrainIqa:
    def test_two_record_separability(self):
        clean = sd.render_scene(sd.SceneSpec(3, 11))
        bad = sd.degrade(
            clean,
            sd.DegradationSpec(sd.DegradationKind.ADDITIVE_NOISE, 0.9),
            np.random.default_rng(0),
        )
        records = [
            sd.TrainingRecord(clean, 3, sd.DegradationSpec(sd.DegradationKind.NONE, 0.0), 1.0, 11),
            sd.TrainingRecord(
                bad, 3, sd.DegradationSpec(sd.DegradationKind.ADDITIVE_NOISE, 0.9), 0.1, 11
            ),
        ]
        model, _ = train_iqa(records, epochs=120, lr=5e-3, rng=np.random.default_rng(2))
        assert model.score(clean) > model.score(bad)

    def test_all_clean_degenerate(self):
        records = sd.build_dataset(20, 0.0, qrng.stream(5, "data"))
        with pytest.raises(DegenerateDataError):
            train_iqa(records, epochs=1, rng=np.random.default_rng(0))

    def test_loss_decreases(self):
        records = sd.build_dataset(200, 0.8, qrng.stream(6, "data"))
        _, report = train_iqa(records, epochs=6, lr=2e-3, rng=np.random.default_rng(0))
        losses = report["losses"]
        k = max(1, len(losses) // 10)
        assert np.median(losses[-k:]) < np.median(losses[:k])

    def test_shuffled_labels_null_srocc(self):
        records = sd.build_dataset(400, 0.85, qrng.stream(7, "data"))
        rng = np.random.default_rng(3)
        labels = np.array([r.pseudo_mos for r in records])
        rng.shuffle(labels)
        shuffled = [
            sd.TrainingRecord(r.image, r.class_id, r.degradation, float(l), r.scene_seed)
            for r, l in zip(records, labels)
        ]
        _, report = train_iqa(shuffled, epochs=4, lr=2e-3, rng=np.random.default_rng(4))
        assert abs(report["holdout_srocc"]) < 0.15


class TestStandardizer:
    def test_zero_two_maps_to_plus_minus_one(self):
        st = fit_standardizer(np.array([[0.0], [2.0]]))
        out = st.apply(np.array([[0.0], [2.0]]))
        assert out == pytest.approx(np.array([[-1.0], [1.0]]))

    def test_apply_invert_identity(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(3.0, 2.0, size=(50, 2))
        st = fit_standardizer(scores)
        back = st.invert(st.apply(scores))
        assert np.abs(back - scores).max() < 1e-5

    def test_constant_column_named(self):
        scores = np.stack([np.arange(10.0), np.full(10, 2.0)], axis=1)
        with pytest.raises(DegenerateDataError, match="1"):
            fit_standardizer(scores)

    def test_round_trip_json(self):
        st = fit_standardizer(np.random.default_rng(1).normal(size=(20, 3)))
        st2 = ScoreStandardizer.from_json(st.to_json())
        x = np.random.default_rng(2).normal(size=(4, 3))
        assert np.allclose(st.apply(x), st2.apply(x))


class TestPercentileCondition:
    def setup_method(self):
        rng = np.random.default_rng(8)
        self.scores = rng.uniform(0.0, 1.0, size=(10000, 1))
        self.st = fit_standardizer(self.scores)

    def test_median_of_symmetric_is_zero(self):
        cond = percentile_condition(self.st, self.scores, 50.0)
        assert abs(float(cond.scores[0])) < 0.05

    def test_p99_uniform_closed_form(self):
        cond = percentile_condition(self.st, self.scores, 99.0)
        expected = (0.99 - self.scores.mean()) / self.scores.std()
        assert float(cond.scores[0]) == pytest.approx(expected, abs=0.05)

    def test_percentiles_monotone(self):
        vals = [
            float(percentile_condition(self.st, self.scores, p).scores[0])
            for p in (0.0, 50.0, 100.0)
        ]
        assert vals[0] <= vals[1] <= vals[2]

    def test_out_of_range_rejected(self):
        with pytest.raises(ParameterError):
            percentile_condition(self.st, self.scores, 101.0)

    def test_provenance_recorded(self):
        cond = percentile_condition(self.st, self.scores, 25.0)
        assert cond.provenance == "percentile" and cond.percentile == 25.0


def test_condition_scores_shape():
    model = IqaModel(np.random.default_rng(0))
    imgs = np.stack([sd.render_scene(sd.SceneSpec(i % 8, i)) for i in range(5)])
    out = condition_scores(model, imgs)
    assert out.shape == (5, len(CONDITION_METRICS))
    assert np.all(np.isfinite(out))


def test_null_condition():
    cond = QualityCondition.null()
    assert cond.provenance == "null" and cond.scores is None
