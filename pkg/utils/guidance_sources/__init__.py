"""
External-guidance source registry.

Sources register themselves here and can be retrieved by name.
"""
from typing import Dict, List, Type

from splat_models import GuidanceConfig
from ..errors import ConfigurationError
from .base import GuidanceContext, GuidanceSource

_sources: Dict[str, Type[GuidanceSource]] = {}


def register_source(name: str, source_class: Type[GuidanceSource]) -> None:
    """
    Register a guidance source.

    Args:
        name: Source name (e.g., 'ingested', 'bicubic')
        source_class: Class implementing GuidanceSource
    """
    _sources[name.lower()] = source_class


def get_source(name: str) -> GuidanceSource:
    """
    Get a source instance by name.

    Raises:
        ConfigurationError: If the source is not registered
    """
    source_name = name.lower()
    if source_name not in _sources:
        available = ", ".join(_sources.keys())
        raise ConfigurationError(f"Unknown guidance source '{name}'. Available sources: {available}")
    return _sources[source_name]()


def detect_source_type(cfg: GuidanceConfig) -> str:
    """
    Detection order:
    1. A manifest path always means ingested files
    2. The configured source name
    """
    if cfg.manifest is not None:
        return "ingested"
    return cfg.source


def list_sources() -> List[str]:
    return list(_sources.keys())


from .bicubic import BicubicSource  # noqa: E402
from .ground_truth import GroundTruthSource  # noqa: E402
from .ingested import IngestedSource  # noqa: E402

register_source("ingested", IngestedSource)
register_source("bicubic", BicubicSource)
register_source("ground_truth", GroundTruthSource)

__all__ = ["GuidanceContext", "GuidanceSource", "detect_source_type", "get_source", "list_sources", "register_source"]
