"""
Ingested guidance: HR images and depth maps produced by external tools.

Manifest file: UTF-8 lines `view_id <tab> image_path <tab> depth_path`,
relative paths resolved against the manifest's directory. Header comments
`# scale_factor: <int>` and `# provenance: <tag>` carry the remaining fields.
"""
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from splat_models import GuidanceManifest, ManifestEntry
from splat_renderer import DepthBuffer, ImageBuffer
from ..errors import ConfigurationError, GuidanceError, ImageFormatError
from ..image_io import read_fimg, read_image
from .base import ExternalPair, GuidanceContext, GuidanceSource

logger = logging.getLogger(__name__)


def read_manifest(path: Path) -> GuidanceManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot read guidance manifest {path}: {e}") from e
    header = {"scale_factor": None, "provenance": "ingested"}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            if key.strip() in header:
                header[key.strip()] = value.strip()
            continue
        parts = raw.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise ConfigurationError(f"{path}:{lineno}: expected 3 tab-separated fields, found {len(parts)}")
        view_id, image_path, depth_path = (p.strip() for p in parts)
        try:
            entries.append(ManifestEntry(
                view_id=view_id,
                image_path=(path.parent / image_path),
                depth_path=(path.parent / depth_path),
            ))
        except ValidationError as e:
            raise ConfigurationError(f"{path}:{lineno}: {e}") from e
    if header["scale_factor"] is None:
        raise ConfigurationError(f"{path}: missing '# scale_factor: <int>' header")
    try:
        return GuidanceManifest(entries=entries, scale_factor=int(header["scale_factor"]),
                                provenance=header["provenance"])
    except (ValidationError, ValueError) as e:
        raise ConfigurationError(f"{path}: {e}") from e


def write_manifest(manifest: GuidanceManifest, path: Path) -> Path:
    """Write a manifest; paths are stored relative to the manifest when possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(Path(p).resolve())

    lines = [f"# scale_factor: {manifest.scale_factor}", f"# provenance: {manifest.provenance}"]
    for entry in manifest.entries:
        lines.append(f"{entry.view_id}\t{rel(entry.image_path)}\t{rel(entry.depth_path)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_entries(manifest: GuidanceManifest,
                 expected: Optional[Dict[str, Tuple[int, int]]] = None) -> Dict[str, ExternalPair]:
    """
    Load every manifest entry, collecting one diagnostic per offending view.

    `expected` maps view_id -> (width, height); views listed there but absent
    from the manifest are reported as well.
    """
    problems: Dict[str, list] = {}
    loaded: Dict[str, ExternalPair] = {}
    by_view = manifest.by_view()
    for view_id in sorted(expected or {}):
        if view_id not in by_view:
            problems.setdefault(view_id, []).append("no external entry in manifest")

    for entry in manifest.entries:
        issues = []
        image = depth = None
        for p in (entry.image_path, entry.depth_path):
            if not Path(p).exists():
                issues.append(f"missing file {p}")
        if not issues:
            try:
                image = ImageBuffer(read_image(entry.image_path))
                raw = read_fimg(entry.depth_path)
                if raw.shape[2] not in (1, 2):
                    issues.append(f"depth {entry.depth_path} must have 1 or 2 channels, found {raw.shape[2]}")
                else:
                    depth = DepthBuffer(raw[:, :, 0], raw[:, :, 1] if raw.shape[2] == 2 else None)
            except (ImageFormatError, ValueError) as e:
                issues.append(str(e))
        if image is not None and depth is not None:
            if not np.all(np.isfinite(image.data)):
                issues.append(f"non-finite values in {entry.image_path}")
            if not np.all(np.isfinite(depth.data)):
                issues.append(f"non-finite values in {entry.depth_path}")
            if (image.width, image.height) != (depth.width, depth.height):
                issues.append(f"image {image.width}x{image.height} and depth {depth.width}x{depth.height} disagree")
            want = (expected or {}).get(entry.view_id)
            if want is not None and (image.width, image.height) != want:
                issues.append(f"{entry.image_path} is {image.width}x{image.height}, expected {want[0]}x{want[1]}")
        if issues:
            problems[entry.view_id] = problems.get(entry.view_id, []) + issues
        else:
            loaded[entry.view_id] = (image, depth)
    if problems:
        raise GuidanceError(problems)
    logger.info(f"Ingested external guidance for {len(loaded)} views (provenance={manifest.provenance})")
    return loaded


class IngestedSource(GuidanceSource):
    """External guidance read from a manifest of files."""

    provenance = "ingested"

    def validate_config(self, context: GuidanceContext) -> None:
        if context.cfg.manifest is None:
            raise ConfigurationError("guidance source 'ingested' requires a manifest path")

    def load_external(self, context: GuidanceContext) -> Dict[str, ExternalPair]:
        manifest = read_manifest(context.cfg.manifest)
        if manifest.scale_factor != context.factor:
            raise ConfigurationError(
                f"manifest scale factor {manifest.scale_factor} does not match requested factor {context.factor}"
            )
        expected = {v.view_id: context.hr_size(v) for v in context.views}
        pairs = load_entries(manifest, expected)
        return {view_id: pairs[view_id] for view_id in expected}
