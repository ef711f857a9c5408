import json

import numpy as np
import pytest

from latentvideo import metrics
from latentvideo import synthdata as sd


def static_video(value=0.4, frames=4, h=16, w=16):
    return np.full((frames, 3, h, w), value, np.float32)


def moving_videos(n=2, seed=0):
    out = []
    for i in range(n):
        spec = sd.SceneSpec(
            sd.Identity(f"id{i}", "disk", sd.PALETTE[i], 5.0),
            sd.Motion("m", "horizontal-bounce", 1.0, phase=float(i)),
        )
        out.append(sd.render_video(spec, 6, 16, 16))
    return out


class TestExtractor:
    def test_deterministic_from_seed(self):
        a = metrics.FeatureExtractor(seed=3)
        b = metrics.FeatureExtractor(seed=3)
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(a.features(x), b.features(x))

    def test_seed_changes_features(self):
        x = np.random.default_rng(0).uniform(0, 1, (1, 3, 16, 16)).astype(np.float32)
        a = metrics.FeatureExtractor(seed=0).features(x)
        b = metrics.FeatureExtractor(seed=1).features(x)
        assert not np.array_equal(a, b)

    def test_feature_shape(self):
        x = np.zeros((5, 3, 16, 16), np.float32)
        f = metrics.FeatureExtractor().features(x)
        assert f.shape == (5, 32 * 4 * 4)


class TestMotionSummary:
    def test_static_videos_zero(self):
        ex = metrics.FeatureExtractor()
        f = metrics.motion_summary([static_video(), static_video(0.7)], ex)
        np.testing.assert_array_equal(f, np.zeros_like(f))

    def test_duplicating_set_invariant(self):
        ex = metrics.FeatureExtractor()
        vids = moving_videos(2)
        f1 = metrics.motion_summary(vids, ex)
        f2 = metrics.motion_summary(vids + vids, ex)
        np.testing.assert_allclose(f1, f2, atol=1e-12)

    def test_matches_stepwise_oracle(self):
        ex = metrics.FeatureExtractor(seed=1)
        vids = moving_videos(2)
        expected = []
        for v in vids:
            feats = [ex.features(v[i : i + 1])[0].astype(np.float64) for i in range(v.shape[0])]
            expected.extend(feats[i + 1] - feats[i] for i in range(len(feats) - 1))
        # batched vs per-frame conv reorders float32 sums; compare accordingly
        np.testing.assert_allclose(
            metrics.motion_summary(vids, ex), np.mean(expected, axis=0), atol=1e-6
        )

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError):
            metrics.motion_summary([np.zeros((1, 3, 16, 16))], metrics.FeatureExtractor())


class TestMcs:
    def test_identical_sets_floor(self):
        vids = moving_videos(2)
        assert metrics.mcs(vids, vids, metrics.FeatureExtractor()) == -12.0

    def test_symmetry(self):
        ex = metrics.FeatureExtractor()
        a, b = moving_videos(2, seed=0), [static_video(0.3), static_video(0.8)]
        assert metrics.mcs(a, b, ex) == pytest.approx(metrics.mcs(b, a, ex))

    def test_unit_distance_zero(self):
        # summaries differing by a unit vector: log10(1) = 0
        class FakeExtractor:
            seed = 0

            def __init__(self):
                self.calls = 0

            def features(self, frames):
                n = np.asarray(frames).shape[0]
                self.calls += 1
                base = np.zeros((n, 4))
                if self.calls > 1:
                    base[1:, 0] = 1.0  # unit feature step per frame
                return base

        ex = FakeExtractor()
        v = [np.zeros((2, 3, 16, 16), np.float32)]
        assert metrics.mcs(v, v, ex) == pytest.approx(0.0)


class TestSsim:
    def test_identical_is_one(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (3, 16, 16))
        assert metrics.ssim(x, x) == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(0, 1, (3, 16, 16)), rng.uniform(0, 1, (3, 16, 16))
        assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), rel=1e-12)

    def test_constant_pair_closed_form(self):
        a = np.full((3, 16, 16), 0.2)
        b = np.full((3, 16, 16), 0.8)
        expected = (2 * 0.2 * 0.8 + metrics.SSIM_C1) / (0.2**2 + 0.8**2 + metrics.SSIM_C1)
        got = metrics.ssim(a, b)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.4707, abs=1e-3)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="window"):
            metrics.ssim(np.zeros((3, 5, 5)), np.zeros((3, 5, 5)))

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a, b = rng.uniform(0, 1, (1, 12, 12)), rng.uniform(0, 1, (1, 12, 12))
            assert -1.0 <= metrics.ssim(a, b) <= 1.0


class TestFcs:
    def test_static_is_one(self):
        assert metrics.fcs([static_video(), static_video(0.9)]) == pytest.approx(1.0, abs=1e-6)

    def test_single_video_is_its_trace_mean(self):
        v = moving_videos(1)[0]
        assert metrics.fcs([v]) == pytest.approx(float(np.mean(metrics.ssim_trace(v))))

    def test_three_frame_recomputation(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(0, 1, (3, 3, 16, 16))
        expected = (metrics.ssim(v[0], v[1]) + metrics.ssim(v[0], v[2])) / 2
        assert metrics.fcs([v]) == pytest.approx(expected, rel=1e-12)

    def test_range(self):
        vids = moving_videos(2)
        assert -1.0 <= metrics.fcs(vids) <= 1.0


class TestReport:
    def test_fields_and_fcs_consistency(self, tmp_path):
        vids = moving_videos(2)
        report = metrics.evaluate(vids, vids, metrics.FeatureExtractor(seed=7))
        assert report.mcs == -12.0
        per_video = [float(np.mean(t)) for t in report.ssim_traces]
        assert report.fcs == pytest.approx(float(np.mean(per_video)))
        path = tmp_path / "report.json"
        report.save(path)
        loaded = json.loads(path.read_text())
        assert set(loaded) == {"mcs", "fcs", "n_real", "n_gen", "extractor_seed"}
        assert loaded["extractor_seed"] == 7
        assert loaded["n_real"] == loaded["n_gen"] == 2
