"""
Per-view guidance for HR training.

A GuidanceSet pairs the external references (a 2D super-resolved image and an
estimated depth map, or their stand-ins) with the internal references obtained
by SR-splatting the frozen stage-1 model. External sources are pluggable, see
utils/guidance_sources.
"""
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from splat_core import Camera, GaussianScene
from splat_models import GuidanceConfig, GuidanceManifest, ManifestEntry, RenderConfig
from splat_renderer import DepthBuffer, ImageBuffer, TrainingView, sr_splat
from utils.errors import GuidanceError, ImageFormatError
from utils.guidance_sources import GuidanceContext, detect_source_type, get_source
from utils.guidance_sources.bicubic import bicubic_upsample
from utils.guidance_sources.ingested import load_entries, read_manifest, write_manifest
from utils.image_io import read_fimg, write_fimg, write_png

logger = logging.getLogger(__name__)

BufferPair = Tuple[ImageBuffer, DepthBuffer]

__all__ = [
    "GuidanceSet", "bicubic_fallback", "build_guidance", "build_internal_guidance", "ingest_external",
    "read_manifest", "save_external_guidance", "validate_guidance", "write_manifest",
]


@dataclass(eq=False)
class GuidanceSet:
    """External and internal HR references of one training view."""
    view_id: str
    external_image: ImageBuffer
    external_depth: DepthBuffer
    internal_image: ImageBuffer
    internal_depth: DepthBuffer

    @property
    def size(self) -> Tuple[int, int]:
        return self.internal_image.width, self.internal_image.height

    def problems(self, expected: Optional[Tuple[int, int]] = None) -> List[str]:
        """Dimension and finiteness violations (empty when the set is usable)."""
        issues = []
        want = expected or self.size
        for name in ("external_image", "external_depth", "internal_image", "internal_depth"):
            buf = getattr(self, name)
            if (buf.width, buf.height) != want:
                issues.append(f"{name} is {buf.width}x{buf.height}, expected {want[0]}x{want[1]}")
        if not np.all(np.isfinite(self.external_depth.data)):
            issues.append("external depth has non-finite values")
        if not np.all(np.isfinite(self.external_image.data)):
            issues.append("external image has non-finite values")
        return issues


def ingest_external(manifest: GuidanceManifest,
                    expected: Optional[Dict[str, Tuple[int, int]]] = None) -> Dict[str, BufferPair]:
    """
    Load (E_image, E_depth) for every manifest entry.

    Raises GuidanceError listing every offending view (missing file, dimension
    mismatch, non-finite values).
    """
    return load_entries(manifest, expected)


def bicubic_fallback(lr: ImageBuffer, factor: int) -> ImageBuffer:
    """Catmull-Rom upsampling used when no 2D SR output is available."""
    return bicubic_upsample(lr, factor)


def guidance_cache_key(scene: GaussianScene, cameras: Sequence[Camera], render_cfg: RenderConfig) -> str:
    """sha256 over the scene content, every camera and the rasterizer settings."""
    h = hashlib.sha256(scene.content_hash().encode("ascii"))
    for cam in cameras:
        h.update(cam.view_id.encode("utf-8"))
        for arr in (cam.focal, cam.principal_point, cam.rotation, cam.translation):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(f"{cam.width}x{cam.height}".encode("ascii"))
    h.update(render_cfg.model_dump_json().encode("utf-8"))
    return h.hexdigest()


def _read_cached(image_path: Path, depth_path: Path, size: Tuple[int, int]) -> Optional[BufferPair]:
    if not (image_path.exists() and depth_path.exists()):
        return None
    try:
        image = read_fimg(image_path)
        depth = read_fimg(depth_path)
    except ImageFormatError as e:
        logger.info(f"Guidance cache entry {image_path.parent} is corrupt ({e}); regenerating")
        return None
    if image.shape != (size[1], size[0], 3) or depth.shape != (size[1], size[0], 2):
        logger.info(f"Guidance cache entry {image_path} has unexpected shape; regenerating")
        return None
    return ImageBuffer(image), DepthBuffer(depth[:, :, 0], depth[:, :, 1])


def build_internal_guidance(internal_scene: GaussianScene, cameras: Sequence[Camera], factor: int,
                            render_cfg: Optional[RenderConfig] = None,
                            cache_dir: Optional[Path] = None) -> Dict[str, BufferPair]:
    """
    SR-splat the frozen internal model into every camera at `factor`.

    With a cache directory, buffers live under
    <cache_dir>/internal/<sha256>/x<factor>/{view}.fimg and {view}_depth.fimg
    (depth and coverage channels). Cached values are f32, and freshly rendered
    buffers are rounded the same way so cold and warm runs agree bit for bit.
    """
    render_cfg = render_cfg or RenderConfig()
    out: Dict[str, BufferPair] = {}
    folder = None
    if cache_dir is not None:
        folder = Path(cache_dir) / "internal" / guidance_cache_key(internal_scene, cameras, render_cfg) / f"x{factor}"
    for cam in cameras:
        size = (int(round(cam.width * factor)), int(round(cam.height * factor)))
        if folder is not None:
            image_path = folder / f"{cam.view_id}.fimg"
            depth_path = folder / f"{cam.view_id}_depth.fimg"
            cached = _read_cached(image_path, depth_path, size)
            if cached is not None:
                out[cam.view_id] = cached
                continue
        image, depth = sr_splat(internal_scene, cam, factor, smoothing=True, cfg=render_cfg)
        if folder is not None:
            write_fimg(image_path, image.data)
            write_fimg(depth_path, np.stack([depth.data, depth.coverage], axis=2))
            image = ImageBuffer(image.data.astype(np.float32).astype(np.float64))
            depth = DepthBuffer(depth.data.astype(np.float32).astype(np.float64),
                                depth.coverage.astype(np.float32).astype(np.float64))
        out[cam.view_id] = (image, depth)
    logger.info(f"Internal guidance ready for {len(out)} views at x{factor}")
    return out


def validate_guidance(guidance: Dict[str, GuidanceSet], views: Sequence[TrainingView], factor: int) -> None:
    """Every training view has a complete, dimension-consistent GuidanceSet."""
    problems: Dict[str, List[str]] = {}
    for view in views:
        scaled = view.camera.scaled(factor)
        gset = guidance.get(view.view_id)
        if gset is None:
            problems[view.view_id] = ["no guidance for this view"]
            continue
        issues = gset.problems((scaled.width, scaled.height))
        if issues:
            problems[view.view_id] = issues
    if problems:
        raise GuidanceError(problems)


def build_guidance(views: Sequence[TrainingView], internal_scene: GaussianScene, factor: int,
                   cfg: Optional[GuidanceConfig] = None, render_cfg: Optional[RenderConfig] = None,
                   ground_truth: Optional[Dict[str, BufferPair]] = None,
                   use_cache: bool = True) -> Dict[str, GuidanceSet]:
    """Internal guidance plus external guidance from the configured source, validated."""
    cfg = cfg or GuidanceConfig()
    cameras = [v.camera for v in views]
    internal = build_internal_guidance(internal_scene, cameras, factor, render_cfg,
                                       cfg.cache_dir if use_cache else None)
    context = GuidanceContext(views=list(views), factor=factor, cfg=cfg, internal=internal,
                              ground_truth=ground_truth)
    source = get_source(detect_source_type(cfg))
    source.validate_config(context)
    try:
        external = source.load_external(context)
    except ValueError as e:
        raise GuidanceError({"*": [str(e)]}) from e
    guidance = {}
    for view in views:
        if view.view_id not in external:
            continue
        e_img, e_dep = external[view.view_id]
        i_img, i_dep = internal[view.view_id]
        guidance[view.view_id] = GuidanceSet(view.view_id, e_img, e_dep, i_img, i_dep)
    validate_guidance(guidance, views, factor)
    logger.info(f"Guidance built for {len(guidance)} views (source={source.provenance}, x{factor})")
    return guidance


def save_external_guidance(guidance: Dict[str, GuidanceSet], out_dir: Path, factor: int,
                           provenance: str = "ingested") -> Path:
    """
    Write external references in the standard layout
    (<out_dir>/external/{view}.fimg, {view}.png preview, {view}_depth.fimg)
    and a manifest pointing at them; returns the manifest path.
    """
    out_dir = Path(out_dir)
    entries = []
    for view_id, gset in sorted(guidance.items()):
        image_path = write_fimg(out_dir / "external" / f"{view_id}.fimg", gset.external_image.data)
        write_png(out_dir / "external" / f"{view_id}.png", gset.external_image.data)
        depth_path = write_fimg(out_dir / "external" / f"{view_id}_depth.fimg",
                                np.stack([gset.external_depth.data, gset.external_depth.coverage], axis=2))
        entries.append(ManifestEntry(view_id=view_id, image_path=image_path, depth_path=depth_path))
    manifest = GuidanceManifest(entries=entries, scale_factor=factor, provenance=provenance)
    return write_manifest(manifest, out_dir / "manifest.tsv")
