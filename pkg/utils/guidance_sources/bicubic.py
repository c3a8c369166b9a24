"""
Bicubic stand-in for a 2D super-resolution network.
"""
import logging
from typing import Dict

from splat_renderer import ImageBuffer
from ..errors import ConfigurationError
from ..resampling import resize
from .base import ExternalPair, GuidanceContext, GuidanceSource, depth_standin

logger = logging.getLogger(__name__)


def bicubic_upsample(lr: ImageBuffer, factor: int) -> ImageBuffer:
    """Catmull-Rom upsampling, channel-independent, edge-clamped."""
    if factor < 2:
        raise ValueError(f"bicubic fallback needs factor >= 2, got {factor}")
    return ImageBuffer(resize(lr.data, lr.height * factor, lr.width * factor))


class BicubicSource(GuidanceSource):
    """Upsampled LR inputs plus a depth stand-in."""

    provenance = "bicubic-fallback"

    def validate_config(self, context: GuidanceContext) -> None:
        if context.factor < 2:
            raise ConfigurationError(f"bicubic guidance needs factor >= 2, got {context.factor}")
        missing = [v.view_id for v in context.views if v.view_id not in context.internal]
        if missing and context.cfg.depth_source == "internal_noisy":
            raise ConfigurationError(f"internal guidance missing for views {missing}")

    def load_external(self, context: GuidanceContext) -> Dict[str, ExternalPair]:
        out = {}
        for view in context.views:
            image = bicubic_upsample(view.image, context.factor)
            gt = (context.ground_truth or {}).get(view.view_id)
            internal = context.internal.get(view.view_id)
            depth = depth_standin(view.view_id, context.cfg, internal[1] if internal else None,
                                  gt[1] if gt else None)
            out[view.view_id] = (image, depth)
        logger.info(f"Built bicubic external guidance for {len(out)} views at x{context.factor}")
        return out
