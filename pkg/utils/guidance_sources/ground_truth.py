"""
Exact HR renders of a generated scene used as external guidance.
"""
from typing import Dict

from ..errors import ConfigurationError
from .base import ExternalPair, GuidanceContext, GuidanceSource, depth_standin


class GroundTruthSource(GuidanceSource):
    """Ground-truth HR images; depth follows cfg.depth_source."""

    provenance = "ground-truth"

    def validate_config(self, context: GuidanceContext) -> None:
        if context.ground_truth is None:
            raise ConfigurationError("guidance source 'ground_truth' is only available for generated scenes")
        missing = [v.view_id for v in context.views if v.view_id not in context.ground_truth]
        if missing:
            raise ConfigurationError(f"no ground truth for views {missing}")

    def load_external(self, context: GuidanceContext) -> Dict[str, ExternalPair]:
        out = {}
        for view in context.views:
            image, gt_depth = context.ground_truth[view.view_id]
            internal = context.internal.get(view.view_id)
            depth = depth_standin(view.view_id, context.cfg, internal[1] if internal else gt_depth, gt_depth)
            out[view.view_id] = (image.copy(), depth)
        return out
