import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dcacseg.data import DatasetManifest, Sample, load_image
from dcacseg.planner import (PRESETS, Fingerprint, PlanConfig, PlanError, compute_fingerprint,
                             plan)


def fingerprint(h, w, k=1):
    return Fingerprint(h, w, (0.0,) * 3, (1.0,) * 3, k, 3)


def manifest_with_sizes(tmp_path, sizes):
    samples = []
    rng = np.random.default_rng(0)
    for i, (h, w) in enumerate(sizes):
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        Image.fromarray(img, "RGB").save(tmp_path / f"{i}.png")
        Image.fromarray(np.zeros((h, w), np.uint8), "L").save(tmp_path / f"{i}_m.png")
        samples.append(Sample(tmp_path / f"{i}.png", tmp_path / f"{i}_m.png", 0))
    return DatasetManifest(samples, ["d"])


class TestFingerprint:
    def test_median_of_sizes(self, tmp_path):
        fp = compute_fingerprint(manifest_with_sizes(tmp_path, [(64, 64), (96, 96), (128, 128)]))
        assert fp.median_height == 96 and fp.median_width == 96
        assert fp.num_samples == 3 and fp.num_domains == 1

    def test_single_image_stats(self, tmp_path):
        m = manifest_with_sizes(tmp_path, [(40, 50)])
        fp = compute_fingerprint(m)
        img = load_image(m.samples[0].image_path).reshape(-1, 3)
        assert (fp.median_height, fp.median_width) == (40, 50)
        np.testing.assert_allclose(fp.percentile_low, np.percentile(img, 0.5, axis=0))
        np.testing.assert_allclose(fp.percentile_high, np.percentile(img, 99.5, axis=0))

    def test_empty(self):
        with pytest.raises(PlanError):
            compute_fingerprint(DatasetManifest([], ["d"]))


class TestPlan:
    def test_large_roi(self):
        # ROIs of about 1500 x 1500 pixels
        p = plan(fingerprint(1500, 1500))
        assert (p.patch_size, p.depth) == (512, 5)
        assert p.channels == [32, 64, 128, 256, 320, 320]

    def test_small(self):
        p = plan(fingerprint(64, 64))
        assert (p.patch_size, p.depth) == (64, 4)

    def test_non_square_uses_smaller_side(self):
        p = plan(fingerprint(300, 100))
        assert p.patch_size == 64

    def test_defaults(self):
        p = plan(fingerprint(256, 256))
        assert p.batch_size == 2 and p.minibatches_per_epoch == 250
        assert p.initial_lr == 0.01 and p.momentum == 0.99
        assert p.epochs == 1000 and p.poly_exponent == 0.9 and p.ema_alpha == 0.9

    def test_dcac_epochs(self):
        p = plan(fingerprint(256, 256, k=3), {"dcac_enabled": True, "epochs": 2500})
        assert p.epochs == 2500 and p.dcac_enabled
        assert plan(fingerprint(256, 256, k=3), {"dcac_enabled": True}).epochs == 2500

    def test_too_small(self):
        with pytest.raises(PlanError):
            plan(fingerprint(31, 100))

    def test_invalid_override(self):
        with pytest.raises(PlanError):
            plan(fingerprint(64, 64), {"depth": 5})

    def test_desk_preset(self):
        p = plan(fingerprint(96, 96), PRESETS["desk"])
        assert (p.patch_size, p.depth, p.base_channels, p.minibatches_per_epoch, p.epochs) == (64, 4, 16, 20, 60)

    def test_serialisation_roundtrip(self, tmp_path):
        p = plan(fingerprint(200, 180, 3), {"dcac_enabled": True}, out_path=tmp_path / "plan.json")
        assert PlanConfig.load(tmp_path / "plan.json") == p
        q = plan(fingerprint(200, 180, 3), {"dcac_enabled": True}, out_path=tmp_path / "plan2.json")
        assert (tmp_path / "plan.json").read_bytes() == (tmp_path / "plan2.json").read_bytes()
        assert q == p

    def test_unknown_key(self):
        with pytest.raises(PlanError):
            PlanConfig.from_dict({"patch_sizes": 3})

    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(32, 5000), w=st.integers(32, 5000))
    def test_invariants(self, h, w):
        p = plan(fingerprint(h, w))
        assert p.patch_size % 2 ** p.depth == 0
        assert p.patch_size // 2 ** p.depth >= 4
        assert 1 <= p.depth <= 5
        assert p.patch_size <= min(h, w, 512)
        assert p.patch_size & (p.patch_size - 1) == 0
