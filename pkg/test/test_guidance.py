import numpy as np
import pytest

from conftest import frontal_camera, random_scene
from splat_guidance import (
    GuidanceSet, bicubic_fallback, build_guidance, build_internal_guidance, guidance_cache_key, ingest_external,
    read_manifest, save_external_guidance, validate_guidance, write_manifest,
)
from splat_models import GuidanceConfig, GuidanceManifest, ManifestEntry, RenderConfig
from splat_renderer import DepthBuffer, ImageBuffer, TrainingView, render, sr_splat
from utils.errors import ConfigurationError, GuidanceError
from utils.guidance_sources import detect_source_type, get_source, list_sources
from utils.guidance_sources.base import depth_standin
from utils.image_io import write_fimg


@pytest.fixture
def scene(rng):
    return random_scene(rng, 10)


@pytest.fixture
def views(scene):
    cams = [frontal_camera(width=16, height=12, focal=20.0, distance=4.5 + 0.5 * k, view_id=f"{k:03d}")
            for k in range(3)]
    return [TrainingView(c, render(scene, c).image) for c in cams]


def hr_pair(rng, width, height):
    return (ImageBuffer(rng.uniform(size=(height, width, 3))),
            DepthBuffer(rng.uniform(1.0, 3.0, size=(height, width))))


class TestInternalGuidance:
    def test_factor_one_equals_render(self, scene, views):
        out = build_internal_guidance(scene, [v.camera for v in views], 1)
        image, depth = render(scene, views[0].camera)
        np.testing.assert_array_equal(out["000"][0].data, image.data)
        np.testing.assert_array_equal(out["000"][1].data, depth.data)

    def test_matches_sr_splat(self, scene, views):
        out = build_internal_guidance(scene, [views[1].camera], 2)
        image, _ = sr_splat(scene, views[1].camera, 2)
        assert out["001"][0].shape == (24, 32, 3)
        np.testing.assert_array_equal(out["001"][0].data, image.data)

    def test_cold_and_warm_cache_agree(self, scene, views, tmp_path):
        cams = [v.camera for v in views]
        cold = build_internal_guidance(scene, cams, 2, cache_dir=tmp_path)
        key = guidance_cache_key(scene, cams, RenderConfig())
        assert (tmp_path / "internal" / key / "x2" / "002_depth.fimg").exists()
        warm = build_internal_guidance(scene, cams, 2, cache_dir=tmp_path)
        for vid in cold:
            np.testing.assert_array_equal(cold[vid][0].data, warm[vid][0].data)
            np.testing.assert_array_equal(cold[vid][1].data, warm[vid][1].data)
            np.testing.assert_array_equal(cold[vid][1].coverage, warm[vid][1].coverage)

    def test_cache_key_tracks_scene_and_settings(self, scene, views):
        cams = [v.camera for v in views]
        base = guidance_cache_key(scene, cams, RenderConfig())
        moved = scene.copy()
        moved.positions[0, 0] += 1e-3
        assert guidance_cache_key(moved, cams, RenderConfig()) != base
        assert guidance_cache_key(scene, cams, RenderConfig(dilation=0.1)) != base
        assert guidance_cache_key(scene, cams[:2], RenderConfig()) != base

    def test_corrupt_cache_entry_is_regenerated(self, scene, views, tmp_path):
        cams = [views[0].camera]
        cold = build_internal_guidance(scene, cams, 2, cache_dir=tmp_path)
        key = guidance_cache_key(scene, cams, RenderConfig())
        (tmp_path / "internal" / key / "x2" / "000.fimg").write_bytes(b"junk")
        again = build_internal_guidance(scene, cams, 2, cache_dir=tmp_path)
        np.testing.assert_array_equal(again["000"][0].data, cold["000"][0].data)


class TestBicubicFallback:
    def test_constant_stays_constant(self):
        lr = ImageBuffer(np.full((5, 7, 3), 0.37))
        hr = bicubic_fallback(lr, 3)
        assert hr.shape == (15, 21, 3)
        np.testing.assert_allclose(hr.data, 0.37, atol=1e-12)

    def test_reproduces_linear_ramp_away_from_borders(self):
        ramp = np.tile(np.arange(8, dtype=np.float64), (4, 1))
        hr = bicubic_fallback(ImageBuffer(ramp), 2)
        cols = np.arange(5, 11)
        expected = (cols + 0.5) / 2.0 - 0.5
        np.testing.assert_allclose(hr.data[3, 5:11, 0], expected, atol=1e-12)

    def test_impulse_response_is_local_and_symmetric(self):
        lr = np.zeros((1, 9))
        lr[0, 4] = 1.0
        hr = bicubic_fallback(ImageBuffer(lr), 2).data[0, :, 0]
        np.testing.assert_allclose(hr, hr[::-1], atol=1e-12)
        assert np.all(hr[:4] == 0.0) and np.all(hr[-4:] == 0.0)

    def test_rejects_small_factor(self):
        with pytest.raises(ValueError):
            bicubic_fallback(ImageBuffer(np.zeros((4, 4, 3))), 1)


class TestManifest:
    def test_write_and_read(self, tmp_path):
        entries = [ManifestEntry(view_id=f"{k:03d}", image_path=tmp_path / "ext" / f"{k:03d}.png",
                                 depth_path=tmp_path / "ext" / f"{k:03d}_depth.fimg") for k in range(2)]
        path = write_manifest(GuidanceManifest(entries=entries, scale_factor=4, provenance="bicubic-fallback"),
                              tmp_path / "manifest.tsv")
        text = path.read_text(encoding="utf-8")
        assert "# scale_factor: 4" in text
        assert "001\text/001.png\text/001_depth.fimg" in text
        back = read_manifest(path)
        assert back.scale_factor == 4
        assert back.provenance == "bicubic-fallback"
        assert back.by_view()["001"].depth_path.resolve() == entries[1].depth_path.resolve()

    def test_missing_scale_header(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("000\ta.fimg\tb.fimg\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="scale_factor"):
            read_manifest(path)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("# scale_factor: 2\n000\ta.fimg\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match=":2:"):
            read_manifest(path)

    def test_duplicate_view(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("# scale_factor: 2\n000\ta.fimg\tb.fimg\n000\tc.fimg\td.fimg\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="Duplicate"):
            read_manifest(path)

    def test_view_id_with_separator(self):
        with pytest.raises(ValueError):
            ManifestEntry(view_id="a/b", image_path="x.png", depth_path="y.fimg")


class TestIngest:
    def _saved(self, rng, tmp_path, width=8, height=6):
        guidance = {}
        for vid in ("000", "001"):
            e_img, e_dep = hr_pair(rng, width, height)
            i_img, i_dep = hr_pair(rng, width, height)
            guidance[vid] = GuidanceSet(vid, e_img, e_dep, i_img, i_dep)
        return guidance, save_external_guidance(guidance, tmp_path, factor=2)

    def test_round_trip_through_standard_layout(self, rng, tmp_path):
        guidance, path = self._saved(rng, tmp_path)
        assert (tmp_path / "external" / "000.png").exists()
        loaded = ingest_external(read_manifest(path), {"000": (8, 6), "001": (8, 6)})
        for vid, gset in guidance.items():
            image, depth = loaded[vid]
            np.testing.assert_allclose(image.data, gset.external_image.data, atol=1e-6)
            np.testing.assert_allclose(depth.data, gset.external_depth.data, rtol=1e-6)

    def test_non_finite_depth_names_view(self, rng, tmp_path):
        _, path = self._saved(rng, tmp_path)
        bad = np.ones((6, 8))
        bad[2, 3] = np.nan
        write_fimg(tmp_path / "external" / "001_depth.fimg", bad)
        with pytest.raises(GuidanceError) as info:
            ingest_external(read_manifest(path))
        assert list(info.value.diagnostics) == ["001"]
        assert "non-finite" in str(info.value)

    def test_dimension_mismatch(self, rng, tmp_path):
        _, path = self._saved(rng, tmp_path)
        with pytest.raises(GuidanceError) as info:
            ingest_external(read_manifest(path), {"000": (16, 12), "001": (8, 6)})
        assert set(info.value.diagnostics) == {"000"}

    def test_missing_file_and_missing_view(self, rng, tmp_path):
        _, path = self._saved(rng, tmp_path)
        (tmp_path / "external" / "000.fimg").unlink()
        with pytest.raises(GuidanceError) as info:
            ingest_external(read_manifest(path), {"000": (8, 6), "001": (8, 6), "002": (8, 6)})
        assert "missing file" in info.value.diagnostics["000"][0]
        assert info.value.diagnostics["002"] == ["no external entry in manifest"]
        assert "001" not in info.value.diagnostics

    def test_png_image_accepted(self, rng, tmp_path):
        guidance, _ = self._saved(rng, tmp_path)
        entries = [ManifestEntry(view_id="000", image_path=tmp_path / "external" / "000.png",
                                 depth_path=tmp_path / "external" / "000_depth.fimg")]
        loaded = ingest_external(GuidanceManifest(entries=entries, scale_factor=2))
        np.testing.assert_allclose(loaded["000"][0].data, guidance["000"].external_image.data, atol=0.5 / 255 + 1e-9)


class TestSources:
    def test_registry(self):
        assert set(list_sources()) >= {"ingested", "bicubic", "ground_truth"}
        with pytest.raises(ConfigurationError, match="Unknown guidance source"):
            get_source("diffusion")

    def test_manifest_implies_ingested(self, tmp_path):
        assert detect_source_type(GuidanceConfig(source="bicubic", manifest=tmp_path / "m.tsv")) == "ingested"
        assert detect_source_type(GuidanceConfig(source="bicubic")) == "bicubic"

    def test_depth_standin_is_seeded_per_view(self, rng):
        internal = DepthBuffer(rng.uniform(2.0, 3.0, size=(16, 16)))
        cfg = GuidanceConfig(depth_noise=0.1, seed=7)
        a = depth_standin("000", cfg, internal)
        b = depth_standin("000", cfg, internal)
        c = depth_standin("001", cfg, internal)
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
        assert not np.array_equal(a.data, internal.data)

    def test_depth_standin_without_noise(self, rng):
        internal = DepthBuffer(rng.uniform(2.0, 3.0, size=(8, 8)))
        out = depth_standin("000", GuidanceConfig(depth_noise=0.0), internal)
        np.testing.assert_array_equal(out.data, internal.data)

    def test_depth_standin_from_ground_truth(self, rng):
        gt = DepthBuffer(rng.uniform(2.0, 3.0, size=(8, 8)))
        out = depth_standin("000", GuidanceConfig(depth_source="ground_truth"), None, gt)
        np.testing.assert_array_equal(out.data, gt.data)
        with pytest.raises(ValueError):
            depth_standin("000", GuidanceConfig(depth_source="ground_truth"), None, None)


class TestBuildGuidance:
    def test_bicubic_guidance_sizes(self, scene, views):
        guidance = build_guidance(views, scene, 2, GuidanceConfig(source="bicubic"), use_cache=False)
        assert sorted(guidance) == ["000", "001", "002"]
        for gset in guidance.values():
            assert gset.size == (32, 24)
            assert gset.external_image.shape == (24, 32, 3)
            assert gset.problems() == []

    def test_bicubic_needs_upsampling(self, scene, views):
        with pytest.raises(ConfigurationError):
            build_guidance(views, scene, 1, GuidanceConfig(source="bicubic"), use_cache=False)

    def test_ground_truth_source(self, rng, scene, views):
        gt = {v.view_id: hr_pair(rng, 32, 24) for v in views}
        cfg = GuidanceConfig(source="ground_truth", depth_source="ground_truth")
        guidance = build_guidance(views, scene, 2, cfg, ground_truth=gt, use_cache=False)
        np.testing.assert_array_equal(guidance["001"].external_image.data, gt["001"][0].data)
        np.testing.assert_array_equal(guidance["001"].external_depth.data, gt["001"][1].data)

    def test_ground_truth_source_requires_renders(self, scene, views):
        with pytest.raises(ConfigurationError):
            build_guidance(views, scene, 2, GuidanceConfig(source="ground_truth"), use_cache=False)

    def test_ingested_source(self, rng, scene, views, tmp_path):
        external = {}
        for v in views:
            e_img, e_dep = hr_pair(rng, 32, 24)
            external[v.view_id] = GuidanceSet(v.view_id, e_img, e_dep, e_img, e_dep)
        path = save_external_guidance(external, tmp_path / "ext", factor=2)
        guidance = build_guidance(views, scene, 2, GuidanceConfig(manifest=path), use_cache=False)
        np.testing.assert_allclose(guidance["002"].external_image.data, external["002"].external_image.data,
                                   atol=1e-6)

    def test_ingested_scale_mismatch(self, rng, scene, views, tmp_path):
        external = {v.view_id: GuidanceSet(v.view_id, *hr_pair(rng, 32, 24), *hr_pair(rng, 32, 24)) for v in views}
        path = save_external_guidance(external, tmp_path / "ext", factor=2)
        with pytest.raises(ConfigurationError, match="scale factor"):
            build_guidance(views, scene, 4, GuidanceConfig(manifest=path), use_cache=False)

    def test_validate_reports_every_bad_view(self, rng, views):
        good = GuidanceSet("000", *hr_pair(rng, 32, 24), *hr_pair(rng, 32, 24))
        small = GuidanceSet("001", *hr_pair(rng, 16, 12), *hr_pair(rng, 16, 12))
        with pytest.raises(GuidanceError) as info:
            validate_guidance({"000": good, "001": small}, views, 2)
        assert set(info.value.diagnostics) == {"001", "002"}
        assert info.value.diagnostics["002"] == ["no guidance for this view"]
