"""
Pydantic models for viewer API validation and serialization.
"""
from typing import Dict, List, Optional, Union

from pydantic import BaseModel, Field, field_validator

Metric = Union[float, str, None]


def _relative_path(v: str) -> str:
    v = v.strip()
    if not v:
        raise ValueError("Path cannot be empty")
    if v.startswith("/") or ".." in v.replace("\\", "/").split("/"):
        raise ValueError("Path must be relative to the workspace")
    return v


class RenderRequest(BaseModel):
    """Model for rendering one view of a checkpoint."""
    checkpoint: str = Field(..., description="Checkpoint (.iesr) or scene text file, relative to the workspace")
    cameras: str = Field(..., description="Camera file, relative to the workspace")
    view_id: str = Field(..., min_length=1, description="View to render")
    factor: float = Field(1.0, gt=0, le=16, description="SR-splat scale factor")
    depth: bool = Field(False, description="Return the depth visualization instead of the image")

    @field_validator("checkpoint", "cameras")
    @classmethod
    def validate_paths(cls, v: str) -> str:
        """Paths stay inside the workspace."""
        return _relative_path(v)


class EvalRequest(BaseModel):
    """Model for comparing an image against a reference."""
    image: str = Field(..., description="Image path (.png or .fimg), relative to the workspace")
    reference: str = Field(..., description="Reference image path, relative to the workspace")

    @field_validator("image", "reference")
    @classmethod
    def validate_paths(cls, v: str) -> str:
        """Paths stay inside the workspace."""
        return _relative_path(v)


class EvalResponse(BaseModel):
    """PSNR and SSIM; identical images report PSNR as 'inf'."""
    psnr: Union[float, str]
    ssim: float


class CheckpointInfo(BaseModel):
    path: str
    size_bytes: int
    kind: str = Field(..., description="'checkpoint' for .iesr containers, 'scene' for text scenes")


class ConfigResponse(BaseModel):
    profile: str
    workspace: str
    train: Dict


class MetricRow(BaseModel):
    """One row of a run's results table."""
    name: str
    psnr: Metric = None
    ssim: Metric = None
    num_gaussians: int = 0
    threshold: Optional[float] = None
    status: str = "ok"


class RunMetrics(BaseModel):
    run: str
    rows: List[MetricRow]
