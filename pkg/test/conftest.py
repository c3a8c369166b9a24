"""
Shared fixtures: small random scenes, a frontal camera and an isolated
environment (no IESR_* variables leak in from the caller's shell).
"""
import numpy as np
import pytest

from splat_core import Camera, GaussianScene
from splat_models import RenderConfig

ENV_VARS = ("IESR_PROFILE", "IESR_THREADS", "IESR_SEED", "IESR_WORKSPACE", "WORKSPACE_DIR")


def frontal_camera(width: int = 32, height: int = 32, focal: float = 40.0, distance: float = 5.0,
                   view_id: str = "000") -> Camera:
    """Identity-rotation camera with the world origin on its optical axis at `distance`."""
    return Camera(
        focal=(focal, focal),
        principal_point=(width / 2.0, height / 2.0),
        width=width,
        height=height,
        rotation=np.eye(3),
        translation=(0.0, 0.0, distance),
        view_id=view_id,
    )


def random_scene(rng: np.random.Generator, n: int, spread: float = 0.6,
                 scale_range=(0.05, 0.2), opacity_range=(0.3, 0.9)) -> GaussianScene:
    q = rng.normal(size=(n, 4))
    return GaussianScene(
        positions=np.column_stack([rng.uniform(-spread, spread, size=(n, 2)), rng.uniform(-0.5, 0.5, size=n)]),
        scales=rng.uniform(*scale_range, size=(n, 3)),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
        opacities=rng.uniform(*opacity_range, size=n),
    )


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return frontal_camera()


@pytest.fixture
def small_scene(rng):
    return random_scene(rng, 12)


@pytest.fixture
def smooth_render_cfg():
    """Cutoff and early termination pushed out of the way for finite differences."""
    return RenderConfig(cutoff_sigma=10.0, transmittance_threshold=0.0)


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("IESR_WORKSPACE", str(tmp_path))
    return tmp_path
