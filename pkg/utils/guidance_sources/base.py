"""
Abstract base class for external-guidance sources.

Each source (ingested files, bicubic stand-in, ground truth) implements this
interface to provide an HR image and a depth map for every training view.
"""
import logging
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from splat_models import GuidanceConfig
from splat_renderer import DepthBuffer, ImageBuffer, TrainingView
from ..resampling import gaussian_blur

logger = logging.getLogger(__name__)

ExternalPair = Tuple[ImageBuffer, DepthBuffer]


@dataclass(eq=False)
class GuidanceContext:
    """Everything a source may draw on when producing external guidance."""
    views: List[TrainingView]
    factor: int
    cfg: GuidanceConfig
    internal: Dict[str, Tuple[ImageBuffer, DepthBuffer]] = field(default_factory=dict)
    ground_truth: Optional[Dict[str, Tuple[ImageBuffer, DepthBuffer]]] = None

    def hr_size(self, view: TrainingView) -> Tuple[int, int]:
        """(width, height) of the HR buffers of a view."""
        scaled = view.camera.scaled(self.factor)
        return scaled.width, scaled.height


def smooth_noise(shape: Tuple[int, int], correlation: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-std noise field blurred to the given correlation length."""
    noise = gaussian_blur(rng.standard_normal(shape), correlation)
    std = float(np.std(noise))
    return (noise - noise.mean()) / std if std > 0 else noise


def depth_standin(view_id: str, cfg: GuidanceConfig, internal_depth: Optional[DepthBuffer],
                  gt_depth: Optional[DepthBuffer] = None) -> DepthBuffer:
    """
    External depth when no estimator output is supplied: ground-truth depth or
    the internal model's HR depth perturbed by seeded smooth noise, optionally
    blurred to emulate a weaker estimator.
    """
    if cfg.depth_source == "ground_truth":
        if gt_depth is None:
            raise ValueError(f"view '{view_id}': depth_source 'ground_truth' needs ground-truth depth")
        depth = gt_depth.copy()
    else:
        if internal_depth is None:
            raise ValueError(f"view '{view_id}': depth_source 'internal_noisy' needs internal depth")
        depth = internal_depth.copy()
        if cfg.depth_noise > 0:
            rng = np.random.default_rng([cfg.seed, zlib.crc32(view_id.encode("utf-8"))])
            valid = depth.valid(0.05)
            level = float(np.mean(depth.data[valid])) if np.any(valid) else 1.0
            depth.data = depth.data + cfg.depth_noise * level * smooth_noise(depth.data.shape, cfg.depth_noise_scale, rng)
    if cfg.depth_blur > 0:
        depth.data = gaussian_blur(depth.data, cfg.depth_blur)
    return depth


class GuidanceSource(ABC):
    """Abstract base class for external-guidance providers."""

    provenance: str = ""

    @abstractmethod
    def validate_config(self, context: GuidanceContext) -> None:
        """
        Check that the source can serve this context.

        Raises:
            ConfigurationError: If required inputs (manifest, ground truth) are missing
        """

    @abstractmethod
    def load_external(self, context: GuidanceContext) -> Dict[str, ExternalPair]:
        """
        Produce (E_image, E_depth) for every training view.

        Returns:
            Mapping view_id -> (image, depth) at HR resolution
        """
