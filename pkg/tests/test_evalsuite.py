import csv

import numpy as np
import pytest
from scipy import stats

from qcdiff import evalsuite as ev
from qcdiff import synthdata as sd
from qcdiff.errors import DimensionError, ParameterError


class TestRelGain:
    def test_known_percentage(self):
        base = np.array([1.0, 2.0, 4.0])
        cond = np.array([1.1, 2.2, 4.4])
        res = ev.rel_gain(base, cond)
        assert res.percent == pytest.approx(10.0, abs=1e-9)
        assert res.offset == 0.0
        assert res.n_pairs == 3 and res.n_excluded == 0

    def test_identical_pairing_is_exactly_zero(self):
        base = np.array([1.3, 2.7, 0.4])
        assert ev.rel_gain(base, base.copy()).percent == 0.0

    def test_symmetric_changes_cancel(self):
        """+10% and -10% average to exactly 0%."""
        res = ev.rel_gain(np.array([1.0, 1.0]), np.array([1.1, 0.9]))
        assert res.percent == pytest.approx(0.0, abs=1e-12)

    def test_mean_of_per_pair_changes(self):
        """Per-pair percentages averaged, not the ratio of the means."""
        base = np.array([1.0, 10.0])
        cond = np.array([2.0, 10.0])
        res = ev.rel_gain(base, cond)
        assert res.percent == pytest.approx(50.0)

    def test_negative_gain(self):
        res = ev.rel_gain(np.array([2.0, 2.0]), np.array([1.0, 1.0]))
        assert res.percent == pytest.approx(-50.0)

    def test_offset_applied_when_baseline_touches_zero(self):
        base = np.array([0.0, 1.0])
        cond = np.array([0.5, 1.5])
        res = ev.rel_gain(base, cond)
        # offset = 1 + |0| = 1: pairs become (1, 1.5) and (2, 2.5)
        assert res.offset == 1.0
        assert res.percent == pytest.approx((50.0 + 25.0) / 2)

    def test_offset_uses_abs_min_for_negative_baseline(self):
        base = np.array([-2.0, 1.0])
        res = ev.rel_gain(base, base + 1.0)
        assert res.offset == pytest.approx(3.0)
        # shifted baselines are (1, 4): gains 100% and 25%
        assert res.percent == pytest.approx((100.0 + 25.0) / 2)

    def test_no_offset_for_strictly_positive_baseline(self):
        res = ev.rel_gain(np.array([0.5, 3.0]), np.array([0.6, 3.0]))
        assert res.offset == 0.0

    def test_shape_mismatch_and_empty(self):
        with pytest.raises(DimensionError):
            ev.rel_gain(np.zeros(3), np.zeros(4))
        with pytest.raises(ParameterError):
            ev.rel_gain(np.array([]), np.array([]))


class TestSeedConsistency:
    def test_sign_test_matches_binomial_oracle(self):
        base = np.zeros(10)
        cond = np.array([1.0] * 8 + [-1.0] * 2)
        res = ev.seed_consistency(base, cond)
        assert res.p_value == pytest.approx(
            float(stats.binomtest(8, 10, 0.5).pvalue)
        )
        assert res.positive_share == pytest.approx(0.8)
        assert res.mean_gain == pytest.approx(0.6)

    def test_ties_excluded_from_test(self):
        base = np.zeros(6)
        cond = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        res = ev.seed_consistency(base, cond)
        assert res.p_value == pytest.approx(float(stats.binomtest(3, 3, 0.5).pvalue))

    def test_all_ties_give_p_one(self):
        res = ev.seed_consistency(np.ones(5), np.ones(5))
        assert res.p_value == 1.0
        assert res.mean_gain == 0.0


class TestSsim:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.img = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)

    def test_self_similarity_is_one(self):
        assert ev.ssim(self.img, self.img) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self):
        other = np.clip(self.img + 0.1, 0, 1)
        assert ev.ssim(self.img, other) == pytest.approx(ev.ssim(other, self.img))

    def test_anticorrelated_below_zero(self):
        a = np.zeros((32, 32))
        a[:, ::2] = 1.0
        b = 1.0 - a
        assert ev.ssim(a, b) < 0.0

    def test_degradation_ordering(self):
        kind = sd.DegradationKind.ADDITIVE_NOISE
        mild = sd.degrade(self.img, sd.DegradationSpec(kind, 0.1), np.random.default_rng(1))
        harsh = sd.degrade(self.img, sd.DegradationSpec(kind, 0.9), np.random.default_rng(1))
        assert ev.ssim(self.img, mild) > ev.ssim(self.img, harsh)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ev.ssim(self.img, self.img[:, :16, :16])


@pytest.fixture(scope="module")
def trained():
    # small run: enough signal to beat chance decisively, fast enough for
    # the unit suite; the full-strength defaults are exercised by the
    # acceptance battery
    return ev.train_content_classifier(n=640, epochs=6, rng=np.random.default_rng(0))


class TestContentClassifier:
    def test_beats_chance_on_fresh_renders(self, trained):
        clf, acc = trained
        assert acc > 0.5
        imgs = np.stack([sd.render_scene(sd.SceneSpec(i % 8, 5000 + i)) for i in range(160)])
        labs = np.arange(160) % 8
        assert ev.content_probe(clf, imgs, labs) > 0.5

    def test_uniform_noise_near_chance(self, trained):
        clf, _ = trained
        rng = np.random.default_rng(3)
        imgs = rng.uniform(0, 1, (160, 3, 32, 32)).astype(np.float32)
        preds = clf.predict(imgs)
        # a constant prediction is fine; it must not spread evenly over
        # classes as if noise carried scene structure
        assert len(np.unique(preds)) < 8 or (
            np.bincount(preds, minlength=8).max() > 160 // 4
        )

    def test_probe_length_mismatch(self, trained):
        clf, _ = trained
        with pytest.raises(DimensionError):
            ev.content_probe(clf, np.zeros((2, 3, 32, 32), dtype=np.float32), np.zeros(3))

    def test_checkpoint_round_trip(self, trained, tmp_path):
        clf, _ = trained
        path = tmp_path / "clf.qda"
        ev.save_classifier(path, clf)
        loaded = ev.load_classifier(path)
        imgs = np.stack([sd.render_scene(sd.SceneSpec(i % 8, 77 + i)) for i in range(16)])
        assert np.array_equal(clf.predict(imgs), loaded.predict(imgs))


def _stub_generate(percentile):
    """Images whose mean brightness tracks the requested percentile."""
    rng = np.random.default_rng(int(percentile * 10))
    base = rng.uniform(0, 0.2, (6, 3, 32, 32)).astype(np.float32)
    return np.clip(base + percentile / 100.0 * 0.8, 0, 1)


def _brightness(images):
    return images.mean(axis=(1, 2, 3))


class TestSweeps:
    def test_percentile_sweep_monotone_stub_gives_perfect_srocc(self):
        res = ev.percentile_sweep(_stub_generate, _brightness)
        assert res.srocc == pytest.approx(1.0)
        assert [p.x for p in res.points] == [1.0, 25.0, 50.0, 75.0, 99.0]

    def test_percentile_sweep_anti_monotone(self):
        res = ev.percentile_sweep(lambda p: _stub_generate(100 - p), _brightness)
        assert res.srocc == pytest.approx(-1.0)

    def test_lambda_sweep_shape(self):
        def gen(lam, cond):
            scale = lam if cond == "high" else -lam
            return np.full((4, 3, 32, 32), 0.5 + 0.4 * scale, dtype=np.float32)

        out = ev.lambda_sweep(gen, _brightness, lambdas=(0.0, 0.5, 1.0))
        assert set(out) == {"low", "high"}
        hi = [p.mean_score for p in out["high"].points]
        lo = [p.mean_score for p in out["low"].points]
        assert hi == sorted(hi)
        assert lo == sorted(lo, reverse=True)

    def test_csv_round_trip(self, tmp_path):
        res = ev.percentile_sweep(_stub_generate, _brightness)
        path = tmp_path / "out" / "sweep.csv"
        ev.write_sweep_csv(path, res)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 5
        assert rows[0].keys() == {"x", "label", "mean_score", "n"}
        assert float(rows[0]["x"]) == 1.0
        assert int(rows[0]["n"]) == 6

    def test_csv_deterministic_bytes(self, tmp_path):
        res = ev.percentile_sweep(_stub_generate, _brightness)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        ev.write_sweep_csv(p1, res)
        ev.write_sweep_csv(p2, res)
        assert p1.read_bytes() == p2.read_bytes()
