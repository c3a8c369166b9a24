import numpy as np
import pytest

from conftest import frontal_camera, random_scene
from splat_core import (
    Camera, Gaussian3D, GaussianScene, apply_3d_smoothing, compute_filter_sigmas, compute_sampling_sigma,
    evaluate_density, project, quaternion_multiply, quaternion_to_rotation, rotation_to_quaternion,
)
from splat_models import CoreConfig


def gaussian(position=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0), rotation=(1.0, 0.0, 0.0, 0.0),
             color=(0.5, 0.5, 0.5), opacity=0.8) -> Gaussian3D:
    return Gaussian3D(position=position, scale=scale, rotation=rotation, color=color, opacity=opacity)


def axis_camera(focal=100.0, width=64, height=64) -> Camera:
    """Camera at the world origin looking down +z."""
    return Camera(focal=(focal, focal), principal_point=(width / 2, height / 2), width=width, height=height,
                  rotation=np.eye(3), translation=np.zeros(3))


class TestGaussian3D:
    def test_quaternion_is_normalized(self):
        g = gaussian(rotation=(2.0, 0.0, 0.0, 0.0))
        assert np.linalg.norm(g.rotation) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("scale", [(0.0, 1.0, 1.0), (1.0, -0.1, 1.0)])
    def test_rejects_non_positive_scale(self, scale):
        with pytest.raises(ValueError):
            gaussian(scale=scale)

    @pytest.mark.parametrize("color", [(1.2, 0.5, 0.5), (0.5, -0.01, 0.5)])
    def test_rejects_color_outside_unit_range(self, color):
        with pytest.raises(ValueError, match="color"):
            gaussian(color=color)

    @pytest.mark.parametrize("opacity", [-0.2, 1.01])
    def test_rejects_opacity_outside_unit_range(self, opacity):
        with pytest.raises(ValueError, match="opacity"):
            gaussian(opacity=opacity)

    def test_accepts_range_end_points(self):
        assert gaussian(color=(0.0, 1.0, 0.0), opacity=1.0).opacity == 1.0
        assert gaussian(opacity=0.0).opacity == 0.0

    def test_covariance_is_symmetric_positive_definite(self, rng):
        q = rng.normal(size=4)
        g = gaussian(scale=(0.3, 1.2, 0.05), rotation=q)
        cov = g.covariance
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_quaternion_round_trip(self, rng):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        back = rotation_to_quaternion(quaternion_to_rotation(q))
        assert min(np.linalg.norm(back - q), np.linalg.norm(back + q)) < 1e-12


class TestEvaluateDensity:
    def test_peak_at_mean(self):
        g = gaussian(position=(1.0, -2.0, 0.5))
        assert evaluate_density(g, g.position) == 1.0

    def test_isotropic_one_sigma(self):
        g = gaussian()
        assert evaluate_density(g, (1.0, 0.0, 0.0)) == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_anisotropic_along_long_axis(self):
        g = gaussian(scale=(2.0, 1.0, 1.0))
        assert evaluate_density(g, (2.0, 0.0, 0.0)) == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_matches_dense_inverse(self, rng):
        for _ in range(10):
            g = gaussian(position=rng.normal(size=3), scale=rng.uniform(0.2, 2.0, size=3), rotation=rng.normal(size=4))
            x = g.position + rng.normal(size=3)
            d = x - g.position
            expected = np.exp(-0.5 * d @ np.linalg.inv(g.covariance) @ d)
            assert evaluate_density(g, x) == pytest.approx(expected, rel=1e-9)

    def test_maximum_over_grid_is_at_mean(self, rng):
        g = gaussian(scale=(0.5, 0.3, 0.8), rotation=rng.normal(size=4))
        axis = np.linspace(-1.0, 1.0, 9)
        values = [evaluate_density(g, (x, y, z)) for x in axis for y in axis for z in axis]
        assert max(values) == evaluate_density(g, g.position) == 1.0


class TestSmoothing:
    def test_zero_sigma_is_identity(self):
        g = gaussian(scale=(0.1, 0.2, 0.3))
        assert apply_3d_smoothing(g, 0.0) is g

    def test_isotropic_closed_form(self):
        s = 0.25
        g = gaussian(scale=(s, s, s), opacity=0.8)
        out = apply_3d_smoothing(g, s)
        np.testing.assert_allclose(out.scale, np.full(3, s * np.sqrt(2.0)), rtol=1e-12)
        assert out.opacity == pytest.approx(0.8 * 2.0 ** -1.5, rel=1e-12)

    def test_preserves_integrated_mass(self, rng):
        g = gaussian(scale=rng.uniform(0.05, 0.5, size=3), rotation=rng.normal(size=4), opacity=0.6)
        out = apply_3d_smoothing(g, 0.13)
        before = g.opacity * np.sqrt(np.linalg.det(g.covariance))
        after = out.opacity * np.sqrt(np.linalg.det(out.covariance))
        assert after == pytest.approx(before, abs=1e-9)

    def test_covariance_is_sigma_plus_isotropic(self, rng):
        g = gaussian(scale=rng.uniform(0.05, 0.5, size=3), rotation=rng.normal(size=4))
        out = apply_3d_smoothing(g, 0.2)
        np.testing.assert_allclose(out.covariance, g.covariance + 0.04 * np.eye(3), atol=1e-12)
        assert np.all(np.linalg.eigvalsh(out.covariance) >= np.linalg.eigvalsh(g.covariance) - 1e-15)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            apply_3d_smoothing(gaussian(), -0.1)


class TestSamplingSigma:
    def test_single_camera(self):
        g = gaussian(position=(0.0, 0.0, 10.0))
        assert compute_sampling_sigma(g, [axis_camera(100.0)]) == pytest.approx(0.02, rel=1e-12)

    def test_uses_highest_sampling_rate(self):
        g = gaussian(position=(0.0, 0.0, 10.0))
        sigma = compute_sampling_sigma(g, [axis_camera(100.0), axis_camera(200.0)])
        assert sigma == pytest.approx(0.01, rel=1e-12)

    def test_vanishes_for_long_focal(self):
        g = gaussian(position=(0.0, 0.0, 10.0))
        assert compute_sampling_sigma(g, [axis_camera(1e9)]) < 1e-8

    def test_fallback_behind_every_camera(self):
        g = gaussian(position=(0.0, 0.0, -3.0))
        assert compute_sampling_sigma(g, [axis_camera()], CoreConfig(fallback_sigma=0.5)) == 0.5

    def test_scene_version_matches_per_gaussian(self, rng):
        scene = random_scene(rng, 8)
        cams = [frontal_camera(focal=40.0), frontal_camera(focal=60.0, distance=4.0)]
        sigmas = compute_filter_sigmas(scene, cams)
        expected = [compute_sampling_sigma(g, cams) for g in scene.to_gaussians()]
        np.testing.assert_allclose(sigmas, expected, rtol=1e-12)


class TestProject:
    def test_on_axis_isotropic(self):
        s, d, f = 0.1, 5.0, 80.0
        cam = axis_camera(f)
        p = project(gaussian(position=(0.0, 0.0, d), scale=(s, s, s)), cam)
        assert p.visible
        np.testing.assert_allclose(p.mean2d, cam.principal_point, atol=1e-12)
        np.testing.assert_allclose(p.cov2d, ((f * s / d) ** 2 + 0.3) * np.eye(2), atol=1e-12)
        assert p.depth == pytest.approx(d)

    def test_behind_camera_is_culled(self):
        assert not project(gaussian(position=(0.0, 0.0, -1.0)), axis_camera()).visible

    def test_closer_than_near_plane_is_culled(self):
        assert not project(gaussian(position=(0.0, 0.0, 0.005), scale=(0.001,) * 3), axis_camera()).visible

    def test_doubling_focal_doubles_footprint(self, rng):
        g = gaussian(position=(0.3, -0.2, 6.0), scale=(0.2, 0.1, 0.3), rotation=rng.normal(size=4))
        a = project(g, axis_camera(50.0), dilation=0.0)
        b = project(g, axis_camera(100.0), dilation=0.0)
        np.testing.assert_allclose(b.cov2d, 4.0 * a.cov2d, rtol=1e-12)

    def test_covariance_matches_numeric_jacobian(self, rng):
        cam = frontal_camera(focal=60.0)
        g = gaussian(position=(0.4, -0.3, 0.2), scale=(0.2, 0.05, 0.1), rotation=rng.normal(size=4))

        def pixel(x):
            pc = cam.to_camera_space(x[None, :])[0]
            return cam.focal * pc[:2] / pc[2] + cam.principal_point

        h = 1e-6
        jac = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            jac[:, k] = (pixel(g.position + e) - pixel(g.position - e)) / (2 * h)
        expected = jac @ g.covariance @ jac.T + 0.3 * np.eye(2)
        np.testing.assert_allclose(project(g, cam).cov2d, expected, rtol=1e-3)

    def test_rotation_equivariance(self, rng):
        cam = frontal_camera(focal=50.0)
        g = gaussian(position=(0.2, 0.1, -0.3), scale=(0.2, 0.05, 0.1), rotation=rng.normal(size=4))
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        rot = quaternion_to_rotation(q)
        moved = gaussian(position=rot @ g.position, scale=g.scale, rotation=quaternion_multiply(q, g.rotation))
        counter = Camera(focal=cam.focal, principal_point=cam.principal_point, width=cam.width, height=cam.height,
                         rotation=cam.rotation @ rot.T, translation=cam.translation)
        a, b = project(g, cam), project(moved, counter)
        np.testing.assert_allclose(b.mean2d, a.mean2d, atol=1e-9)
        np.testing.assert_allclose(b.cov2d, a.cov2d, atol=1e-9)
        assert b.depth == pytest.approx(a.depth, abs=1e-9)


class TestCamera:
    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            Camera(focal=(0.0, 1.0), principal_point=(1, 1), width=2, height=2, rotation=np.eye(3), translation=np.zeros(3))

    def test_rejects_empty_image(self):
        with pytest.raises(ValueError):
            Camera(focal=(1.0, 1.0), principal_point=(1, 1), width=0, height=2, rotation=np.eye(3), translation=np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            Camera(focal=(1.0, 1.0), principal_point=(1, 1), width=2, height=2, rotation=np.diag([1.0, 1.0, -1.0]),
                   translation=np.zeros(3))

    def test_look_at_centres_target(self):
        cam = Camera.look_at((3.0, 1.0, 2.0), (0.1, 0.2, 0.3), (0.0, 0.0, 1.0), focal=40.0, width=32, height=24)
        np.testing.assert_allclose(cam.center, (3.0, 1.0, 2.0), atol=1e-12)
        p = project(gaussian(position=(0.1, 0.2, 0.3), scale=(0.1,) * 3), cam)
        np.testing.assert_allclose(p.mean2d, (16.0, 12.0), atol=1e-9)

    def test_scaled(self):
        cam = frontal_camera(width=32, height=24, focal=40.0, view_id="007")
        big = cam.scaled(2.5)
        assert (big.width, big.height) == (80, 60)
        np.testing.assert_allclose(big.focal, (100.0, 100.0))
        np.testing.assert_allclose(big.principal_point, (40.0, 30.0))
        assert big.view_id == "007"
        np.testing.assert_array_equal(big.rotation, cam.rotation)


class TestGaussianScene:
    def test_gaussian_list_round_trip(self, rng):
        scene = random_scene(rng, 5)
        again = GaussianScene.from_gaussians(scene.to_gaussians())
        np.testing.assert_allclose(again.positions, scene.positions)
        np.testing.assert_allclose(again.covariances(), scene.covariances(), atol=1e-14)

    def test_subset_append_and_hash(self, rng):
        scene = random_scene(rng, 6)
        keep = np.array([True, False, True, True, False, True])
        part = scene.subset(keep)
        assert len(part) == 4
        assert len(part.append(scene)) == 10
        assert part.content_hash() != scene.content_hash()
        assert scene.copy().content_hash() == scene.content_hash()

    def test_empty(self):
        assert len(GaussianScene.empty()) == 0
        assert len(GaussianScene.from_gaussians([])) == 0
