"""
FastAPI viewer for trained scenes and experiment runs.

This app provides:
- Health check endpoint
- Effective configuration of the active profile
- Checkpoint listing and rendering (PNG)
- PSNR/SSIM evaluation of two images
- Result tables of finished experiment runs

Every path is resolved inside the workspace directory (IESR_WORKSPACE).
"""
import json
import logging
import os
from pathlib import Path
from typing import List

from fastapi import FastAPI, HTTPException, Response

from api_models import CheckpointInfo, ConfigResponse, EvalRequest, EvalResponse, MetricRow, RenderRequest, RunMetrics
from splat_bench import psnr, read_results_csv, row_payload, ssim
from splat_renderer import ImageBuffer, sr_splat
from splat_trainer import load_scene
from utils.app_config import get_profile_name, get_workspace_dir, resolve_train_config
from utils.errors import IESRError
from utils.image_io import depth_visual, encode_png, read_image
from utils.scene_io import read_cameras
from utils.timing_utils import TimingContext, TimingInfo

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

app = FastAPI(
    title="IESR Viewer",
    version="1.0.0",
)


def resolve_path(relative: str) -> Path:
    """Workspace-relative path; anything escaping the workspace is rejected."""
    base = get_workspace_dir().resolve()
    path = (base / relative).resolve()
    if base != path and base not in path.parents:
        raise HTTPException(status_code=400, detail="Invalid file path")
    if not path.exists():
        raise HTTPException(status_code=404, detail=f"File not found: {relative}")
    return path


def _set_timing(response: Response, timing_info: TimingInfo) -> None:
    response.headers["X-Timing"] = timing_info.to_header_string()
    response.headers["X-Timing-JSON"] = json.dumps(timing_info.to_dict())


@app.get("/api/healthcheck")
async def healthcheck():
    """Health check endpoint for readiness probes."""
    workspace = get_workspace_dir()
    return {
        "status": "healthy",
        "workspace": str(workspace),
        "workspace_exists": workspace.exists(),
        "workspace_writable": os.access(workspace, os.W_OK) if workspace.exists() else False,
        "profile": get_profile_name(),
    }


@app.get("/api/config", response_model=ConfigResponse)
async def get_config():
    """Training configuration after profile and environment overrides."""
    try:
        cfg = resolve_train_config()
    except (IESRError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        raise HTTPException(status_code=400, detail=f"Configuration error: {str(e)}")
    return ConfigResponse(profile=get_profile_name(), workspace=str(get_workspace_dir()),
                          train=cfg.model_dump(mode="json"))


@app.get("/api/checkpoints", response_model=List[CheckpointInfo])
async def list_checkpoints():
    """Checkpoints and scene files under the workspace."""
    workspace = get_workspace_dir()
    if not workspace.exists():
        return []
    found = []
    for pattern, kind in (("*.iesr", "checkpoint"), ("*.scene", "scene")):
        for path in sorted(workspace.rglob(pattern)):
            found.append(CheckpointInfo(path=str(path.relative_to(workspace)), size_bytes=path.stat().st_size,
                                        kind=kind))
    return found


@app.post("/api/render")
async def render_view(request: RenderRequest):
    """SR-splat one view of a checkpoint and return it as PNG."""
    timing_info = TimingInfo()
    try:
        with TimingContext(timing_info, "load"):
            scene = load_scene(resolve_path(request.checkpoint))
            cameras = {c.view_id: c for c in read_cameras(resolve_path(request.cameras))}
        if request.view_id not in cameras:
            raise HTTPException(status_code=404, detail=f"View '{request.view_id}' not in {request.cameras}")
        with TimingContext(timing_info, "render"):
            image, depth = sr_splat(scene, cameras[request.view_id], request.factor, cfg=resolve_train_config().render)
        with TimingContext(timing_info, "encode"):
            content = encode_png(depth_visual(depth.data, depth.coverage) if request.depth else image.data)
        response = Response(content=content, media_type="image/png")
        _set_timing(response, timing_info)
        return response
    except HTTPException:
        raise
    except IESRError as e:
        logger.error(f"Cannot render {request.checkpoint} view {request.view_id}: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Unexpected error rendering {request.checkpoint}: {e}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@app.post("/api/eval", response_model=EvalResponse)
async def evaluate_images(request: EvalRequest, response: Response):
    """PSNR and SSIM of an image against a reference."""
    timing_info = TimingInfo()
    try:
        with TimingContext(timing_info, "load"):
            a = ImageBuffer(read_image(resolve_path(request.image)))
            b = ImageBuffer(read_image(resolve_path(request.reference)))
        with TimingContext(timing_info, "metrics"):
            p = psnr(a, b)
            s = ssim(a, b)
        _set_timing(response, timing_info)
        return EvalResponse(psnr="inf" if p == float("inf") else p, ssim=s)
    except HTTPException:
        raise
    except (IESRError, ValueError) as e:
        logger.error(f"Cannot evaluate {request.image} against {request.reference}: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Unexpected error evaluating {request.image}: {e}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@app.get("/api/runs/{name}/metrics", response_model=RunMetrics)
async def run_metrics(name: str):
    """Rows of a run's results.csv (and threshold sweep, when present)."""
    run_dir = resolve_path(name)
    csv_path = run_dir / "results.csv"
    if not csv_path.exists():
        raise HTTPException(status_code=404, detail=f"No results.csv in run '{name}'")
    try:
        rows = read_results_csv(csv_path)
        sweep = run_dir / "threshold_sweep.csv"
        if sweep.exists():
            rows.extend(read_results_csv(sweep))
    except (KeyError, ValueError) as e:
        logger.error(f"Malformed results in run '{name}': {e}")
        raise HTTPException(status_code=400, detail=f"Malformed results table: {str(e)}")
    return RunMetrics(run=name, rows=[MetricRow(**row_payload(r)) for r in rows])


if __name__ == "__main__":
    import uvicorn

    port = int(os.getenv("PORT", "8000"))
    host = os.getenv("HOST", "0.0.0.0")

    uvicorn.run(
        app,
        host=host,
        port=port,
        log_level="info",
    )
