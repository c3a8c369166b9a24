"""
Pydantic models for configuration, manifests and experiment reports.

Every scalar hyperparameter of the pipeline lives in one of these models so
that app.yaml profiles, config files and CLI flags all validate the same way.
"""
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class CoreConfig(BaseModel):
    """3D smoothing constants."""
    model_config = ConfigDict(extra="forbid")

    sampling_k: float = Field(0.2, gt=0, description="k in sigma_low = k / max sampling rate")
    fallback_sigma: float = Field(0.0, ge=0, description="sigma_low for Gaussians behind every camera")


class RenderConfig(BaseModel):
    """Rasterizer constants."""
    model_config = ConfigDict(extra="forbid")

    background: Tuple[float, float, float] = Field((0.0, 0.0, 0.0), description="Background RGB in [0,1]")
    tile_size: int = Field(16, ge=1, le=256)
    transmittance_threshold: float = Field(1e-4, ge=0, lt=1)
    cutoff_sigma: float = Field(3.0, gt=0, description="Splat ignored beyond this Mahalanobis radius")
    near_plane: float = Field(0.01, gt=0)
    dilation: float = Field(0.3, ge=0, description="Added to the diagonal of every 2D covariance (px^2)")
    num_threads: int = Field(1, ge=1, le=256)

    @field_validator("background")
    @classmethod
    def validate_background(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        """Background must be a displayable color."""
        if any(c < 0.0 or c > 1.0 for c in v):
            raise ValueError("Background components must lie in [0, 1]")
        return v


class LossConfig(BaseModel):
    """Weights, thresholds and switches of every texture and geometry term."""
    model_config = ConfigDict(extra="forbid")

    lambda_ds: float = Field(0.2, ge=0, le=1, description="D-SSIM weight (lambda)")
    lambda_i: float = Field(0.001, ge=0, description="Internal geometry weight")
    lambda_e: float = Field(0.0001, ge=0, description="External geometry weight")
    threshold: float = Field(0.6, ge=0, le=1, description="Discrepancy threshold T")
    epsilon: float = Field(1e-6, gt=0, description="Discrepancy stabilizer")
    ssim_window: int = Field(11, ge=3)
    ssim_sigma: float = Field(1.5, gt=0)
    c1: float = Field(0.01 ** 2, gt=0)
    c2: float = Field(0.03 ** 2, gt=0)
    min_coverage: float = Field(0.05, ge=0, le=1, description="Depth pixels below this coverage are invalid")
    pearson_mode: Literal["global", "patch"] = "global"
    pearson_patch: int = Field(8, ge=2)
    pearson_var_floor: float = Field(1e-8, gt=0)
    masked_ssim_mode: Literal["substitute", "multiply"] = "substitute"
    fusion: Literal["mask", "sum", "external", "internal"] = "mask"
    use_internal_texture: bool = True
    use_external_texture: bool = True
    use_internal_geometry: bool = True
    use_external_geometry: bool = True

    @field_validator("ssim_window")
    @classmethod
    def validate_window(cls, v: int) -> int:
        """Window must have a centre pixel."""
        if v % 2 == 0:
            raise ValueError("ssim_window must be odd")
        return v


class TrainConfig(BaseModel):
    """Optimization schedule for both training stages."""
    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(30000, ge=0)
    hr_iterations: Optional[int] = Field(None, ge=0, description="Stage-2 iterations (defaults to iterations)")
    mv_views: int = Field(3, ge=1, description="Views per step (MV-Regulation)")
    mv_views_hr: Optional[int] = Field(None, ge=1)
    scale_factor: int = Field(4, ge=1)
    seed: int = 0

    lr_position: float = Field(1.6e-4, gt=0)
    lr_position_final: float = Field(1.6e-6, gt=0)
    lr_position_max_steps: Optional[int] = Field(None, ge=1)
    lr_scale: float = Field(5e-3, gt=0)
    lr_rotation: float = Field(1e-3, gt=0)
    lr_color: float = Field(2.5e-3, gt=0)
    lr_opacity: float = Field(5e-2, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    densify: bool = True
    densify_in_hr: bool = True
    densify_from: int = Field(500, ge=0)
    densify_until: int = Field(15000, ge=0)
    densify_interval: int = Field(100, ge=1)
    densify_grad_threshold: float = Field(2e-4, gt=0)
    percent_dense: float = Field(0.01, gt=0)
    prune_opacity: float = Field(0.005, ge=0, lt=1)
    max_gaussians: int = Field(100_000, ge=1)

    eval_interval: int = Field(0, ge=0, description="Holdout PSNR every N steps (0 = end only)")

    loss: LossConfig = Field(default_factory=LossConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    core: CoreConfig = Field(default_factory=CoreConfig)

    @property
    def stage2_iterations(self) -> int:
        return self.iterations if self.hr_iterations is None else self.hr_iterations

    @property
    def stage2_mv_views(self) -> int:
        return self.mv_views if self.mv_views_hr is None else self.mv_views_hr


class GuidanceConfig(BaseModel):
    """Where external guidance comes from and how stand-ins are built."""
    model_config = ConfigDict(extra="forbid")

    source: Literal["ingested", "bicubic", "ground_truth"] = "bicubic"
    depth_source: Literal["internal_noisy", "ground_truth"] = "internal_noisy"
    depth_noise: float = Field(0.05, ge=0, description="Relative amplitude of smooth depth noise")
    depth_noise_scale: float = Field(4.0, gt=0, description="Noise correlation length in HR pixels")
    depth_blur: float = Field(0.0, ge=0, description="Gaussian blur (HR px) emulating a weaker estimator")
    manifest: Optional[Path] = None
    cache_dir: Path = Path("guidance")
    seed: int = 0


class ManifestEntry(BaseModel):
    """One line of a guidance manifest."""
    view_id: str = Field(..., min_length=1)
    image_path: Path
    depth_path: Path

    @field_validator("view_id")
    @classmethod
    def validate_view_id(cls, v: str) -> str:
        """View ids are used as file stems; no whitespace or separators."""
        v = v.strip()
        if not v or any(ch in v for ch in " \t/\\"):
            raise ValueError(f"Invalid view id '{v}'")
        return v


class GuidanceManifest(BaseModel):
    """External guidance files for every training view."""
    entries: List[ManifestEntry]
    scale_factor: int = Field(..., ge=1)
    provenance: Literal["ingested", "bicubic-fallback", "ground-truth"] = "ingested"

    @model_validator(mode="after")
    def validate_unique_views(self) -> "GuidanceManifest":
        """Every training view has exactly one external entry."""
        seen = set()
        for entry in self.entries:
            if entry.view_id in seen:
                raise ValueError(f"Duplicate manifest entry for view '{entry.view_id}'")
            seen.add(entry.view_id)
        return self

    def by_view(self) -> Dict[str, ManifestEntry]:
        return {e.view_id: e for e in self.entries}


class ExperimentSpec(BaseModel):
    """A desk-scale super-resolution experiment."""
    model_config = ConfigDict(extra="forbid")

    scene_source: Literal["generated", "files"] = "generated"
    scene_dir: Optional[Path] = None
    n_gaussians: int = Field(100, ge=1)
    layout: Literal["cluster", "shell", "textured-grid"] = "cluster"
    init: Literal["points", "random"] = Field("points", description="Stage-1 start: jittered scene points or a random ball")
    init_jitter: float = Field(0.05, ge=0, description="Position noise of the point initialization")
    init_count: Optional[int] = Field(None, ge=1, description="Initial Gaussians (defaults to n_gaussians)")
    num_views: int = Field(10, ge=2)
    holdout_views: List[int] = Field(default_factory=lambda: [4, 9])
    lr_resolution: int = Field(32, ge=1)
    scale: int = Field(4, ge=1)
    down_factor: Optional[int] = Field(None, ge=1, description="LR construction factor (defaults to scale)")
    metrics: List[Literal["psnr", "ssim"]] = Field(default_factory=lambda: ["psnr", "ssim"])
    output_dir: Path = Path("runs/experiment")
    seed: int = 0
    seeds: List[int] = Field(default_factory=list, description="Repeat per seed and report per-row medians")
    ablation: bool = False
    thresholds: List[Annotated[float, Field(ge=0, le=1)]] = Field(default_factory=lambda: [0.0, 0.3, 0.6, 0.9, 1.0])
    depth_estimators: List[str] = Field(default_factory=list)
    train: TrainConfig = Field(default_factory=TrainConfig)
    guidance: GuidanceConfig = Field(default_factory=lambda: GuidanceConfig(source="ground_truth", depth_source="ground_truth"))

    @model_validator(mode="after")
    def validate_views(self) -> "ExperimentSpec":
        """Holdout views are distinct, in range, and leave enough training views; seeds are distinct."""
        if len(set(self.holdout_views)) != len(self.holdout_views):
            raise ValueError("holdout_views contains duplicates")
        for v in self.holdout_views:
            if v < 0 or v >= self.num_views:
                raise ValueError(f"holdout view {v} outside [0, {self.num_views})")
        n_train = self.num_views - len(self.holdout_views)
        if n_train < 1:
            raise ValueError("No training views left after holdout selection")
        if self.train.mv_views > n_train:
            raise ValueError(f"mv_views={self.train.mv_views} exceeds {n_train} training views")
        if self.scene_source == "files" and self.scene_dir is None:
            raise ValueError("scene_source 'files' requires scene_dir")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds contains duplicates")
        return self

    @property
    def effective_down_factor(self) -> int:
        return self.scale if self.down_factor is None else self.down_factor

    @property
    def train_views(self) -> List[int]:
        held = set(self.holdout_views)
        return [v for v in range(self.num_views) if v not in held]


class ExperimentRow(BaseModel):
    """One configuration evaluated on the holdout views."""
    name: str
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    num_gaussians: int = 0
    threshold: Optional[float] = None
    status: str = "ok"


class ExperimentReport(BaseModel):
    """Everything run_experiment produced, including partial failures."""
    output_dir: Path
    seed: int
    seeds: List[int] = Field(default_factory=list, description="Seeds behind median rows (empty for one run)")
    rows: List[ExperimentRow] = Field(default_factory=list)
    failures: Dict[str, str] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    files: List[str] = Field(default_factory=list)

    def row(self, name: str) -> Optional[ExperimentRow]:
        for r in self.rows:
            if r.name == name:
                return r
        return None
