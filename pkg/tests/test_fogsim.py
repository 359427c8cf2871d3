import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defogseg.errors import ConfigError, DataError, DimensionError, DomainError, IntegrityError
from defogseg.fogsim import (IGNORE, DatasetConfig, SceneConfig, apply_fog, build_dataset,
                             from_u8, gen_scene, load_dataset, read_manifest, to_u8, transmittance)

from oracles import scatter


def small_dataset_cfg(**kw):
    d = dict(scene=SceneConfig(height=32, width=32), n_train=4, n_test=2, n_real=3, n_real_test=1, seed=3)
    d.update(kw)
    return DatasetConfig(**d)


class TestGenScene:
    def test_deterministic(self):
        a = gen_scene(7, SceneConfig())
        b = gen_scene(7, SceneConfig())
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_label_range_and_shapes(self):
        clean, depth, label = gen_scene(11, SceneConfig(num_classes=5))
        assert clean.shape == (64, 64, 3) and clean.dtype == np.float32
        assert depth.shape == label.shape == (64, 64)
        assert set(np.unique(label)) <= set(range(5))
        assert 0.0 <= clean.min() and clean.max() <= 1.0
        assert np.all(np.isfinite(depth)) and depth.min() >= 0

    def test_seeds_differ(self):
        for s in range(0, 40, 2):
            assert (gen_scene(s)[2] != gen_scene(s + 1)[2]).any()

    def test_at_least_two_classes(self):
        for s in range(30):
            assert len(np.unique(gen_scene(s, SceneConfig(num_classes=2))[2])) >= 2

    def test_depth_grows_toward_horizon(self):
        cfg = SceneConfig(min_shapes=0, max_shapes=0)
        _, depth, label = gen_scene(5, cfg)
        ground_rows = np.where((label == 1).all(axis=1))[0]
        col = depth[ground_rows, 0]
        # rows nearer the bottom are closer to the camera
        assert np.all(np.diff(col) <= 0)

    @pytest.mark.parametrize("h,w", [(48, 64), (64, 20), (16, 16)])
    def test_bad_dimensions(self, h, w):
        with pytest.raises(ConfigError):
            gen_scene(0, SceneConfig(height=h, width=w))


class TestApplyFog:
    def test_beta_zero_identity(self):
        clean, depth, _ = gen_scene(1)
        assert apply_fog(clean, depth, 0.0, 0.9).tobytes() == clean.tobytes()

    def test_scalar_formula(self):
        clean = np.full((32, 32, 3), 0.8, np.float32)
        depth = np.full((32, 32), 2.0, np.float32)
        out = apply_fog(clean, depth, 0.5, 1.0)
        # 0.8 e^-1 + (1 - e^-1)
        assert out[0, 0, 0] == pytest.approx(0.92642411, abs=1e-6)
        assert out[0, 0, 0] == pytest.approx(scatter(0.8, 2.0, 0.5, 1.0), abs=1e-6)

    def test_dense_fog_limit(self):
        clean, depth, _ = gen_scene(2)
        beta = 20.0 / depth.min()
        out = apply_fog(clean, depth, beta, 0.7)
        assert np.abs(out - np.float32(0.7)).max() <= 1e-6

    def test_errors(self):
        clean, depth, _ = gen_scene(2)
        with pytest.raises(DimensionError):
            apply_fog(clean, depth[:-1], 0.1, 0.5)
        with pytest.raises(DomainError):
            apply_fog(clean, depth, -0.1, 0.5)
        with pytest.raises(DomainError):
            apply_fog(clean, depth, 0.1, 1.5)

    def test_spatial_airlight(self):
        clean, depth, _ = gen_scene(4)
        a = np.linspace(0.7, 0.9, depth.size).reshape(depth.shape)
        out = apply_fog(clean, depth, 0.05, a)
        ref = np.clip(scatter(clean, depth[..., None], 0.05, a[..., None]), 0, 1)
        np.testing.assert_allclose(out, ref, atol=1e-6)

    @settings(max_examples=200, deadline=None)
    @given(c=st.floats(0, 1), a=st.floats(0, 1), d=st.floats(0, 200),
           b1=st.floats(0, 2), b2=st.floats(0, 2))
    def test_monotone_toward_airlight(self, c, a, d, b1, b2):
        lo, hi = sorted((b1, b2))
        clean = np.full((32, 32, 3), c, np.float32)
        depth = np.full((32, 32), d, np.float32)
        o_lo = apply_fog(clean, depth, lo, a)[0, 0, 0]
        o_hi = apply_fog(clean, depth, hi, a)[0, 0, 0]
        if np.float32(c) < a:
            assert o_hi >= o_lo
        elif np.float32(c) > a:
            assert o_hi <= o_lo

    @given(beta=st.floats(0, 1e3), d=st.floats(0, 1e3))
    def test_transmittance_bounds(self, beta, d):
        t = float(transmittance(d, beta))
        assert 0.0 <= t <= 1.0
        if beta * d < 700:
            assert t > 0.0


class TestDataset:
    def test_counts_and_flags(self, tmp_path):
        cfg = small_dataset_cfg()
        m = build_dataset(cfg, tmp_path)
        assert len(m["samples"]) == 10
        splits = [s["split"] for s in m["samples"]]
        assert splits.count("train") == 4 and splits.count("real") == 3
        for s in read_manifest(tmp_path)["samples"]:
            assert s["labels_visible"] == (s["split"] in ("train", "test"))

    def test_default_counts(self):
        cfg = DatasetConfig(n_train=200, n_test=50, n_real=0, n_real_test=0)
        assert cfg.count("train") + cfg.count("test") == 250

    def test_deterministic_manifest(self, tmp_path):
        cfg = small_dataset_cfg()
        a = build_dataset(cfg, tmp_path / "a")
        b = build_dataset(cfg, tmp_path / "b")
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()

    def test_beta_ranges_disjoint(self, tmp_path):
        m = build_dataset(small_dataset_cfg(), tmp_path)
        for s in m["samples"]:
            lo, hi = (0.02, 0.06) if s["domain"] == "synthetic" else (0.08, 0.16)
            assert lo <= s["beta"] <= hi
            assert (s["airlight_amplitude"] > 0) == (s["domain"] == "real")

    def test_load_withholds_hidden_labels(self, tmp_path):
        build_dataset(small_dataset_cfg(), tmp_path)
        hidden = list(load_dataset(tmp_path, splits=["real"]))
        assert hidden and all(s.label is None and s.clean is None for s in hidden)
        shown = list(load_dataset(tmp_path, splits=["real"], evaluation=True))
        assert all(s.label is not None for s in shown)
        assert [s.id for s in load_dataset(tmp_path)] == [s["id"] for s in read_manifest(tmp_path)["samples"]]

    def test_round_trip_regeneration(self, tmp_path):
        build_dataset(small_dataset_cfg(), tmp_path)
        for s in load_dataset(tmp_path, evaluation=True, verify=True):
            regen = to_u8(apply_fog(s.clean, s.depth, s.beta, s.airlight))
            assert regen.tobytes() == to_u8(s.fog).tobytes(), s.id
            assert set(np.unique(s.label)) <= set(range(5)) | {IGNORE}

    def test_missing_file(self, tmp_path):
        build_dataset(small_dataset_cfg(), tmp_path)
        victim = tmp_path / "train" / "train_00001.fog.png"
        victim.unlink()
        with pytest.raises(IntegrityError, match="train_00001.fog.png"):
            list(load_dataset(tmp_path))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IntegrityError):
            read_manifest(tmp_path)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError):
            build_dataset(small_dataset_cfg(), blocker / "sub")

    def test_u8_round_trip(self):
        x = np.linspace(0, 1, 256, dtype=np.float32)
        assert to_u8(from_u8(to_u8(x))).tobytes() == to_u8(x).tobytes()
