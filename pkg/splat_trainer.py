"""
Two-stage optimization of a Gaussian scene.

Stage 1 fits the internal model to the LR views with 3D smoothing and
multi-view batches. Stage 2 warm-starts from a copy of it and fits HR renders
to the fused internal/external guidance. Both stages share the Adam optimizer,
positional learning-rate decay and adaptive density control below.
"""
import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from splat_core import Camera, GaussianScene, compute_filter_sigmas, quaternion_to_rotation
from splat_guidance import GuidanceSet, validate_guidance
from splat_losses import MaskCache, final_loss, texture_loss
from splat_models import TrainConfig
from splat_renderer import RenderGradients, RenderResult, TrainingView, render, render_backward
from utils.errors import CheckpointFormatError, ConfigurationError, NumericalFailureError
from utils.scene_io import read_container, read_scene, write_container, write_scene

logger = logging.getLogger(__name__)

PARAM_GROUPS = ("position", "scale", "rotation", "color", "opacity")
LOG_COLUMNS = ["step", "loss_total", "loss_tex", "loss_gem", "psnr_holdout", "num_gaussians"]
LOSS_HISTORY = 10
PROBABILITY_EPS = 1e-6

Evaluator = Callable[[GaussianScene], float]


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)
    return np.log(p) - np.log1p(-p)


@dataclass(eq=False)
class GaussianModel:
    """
    Unconstrained parameters of a scene: positions, softplus^-1 scales, raw
    quaternions, logit colors and logit opacities. filter_sigmas are derived
    from the training cameras and are not optimized.
    """
    params: Dict[str, np.ndarray]
    filter_sigmas: np.ndarray

    @classmethod
    def from_scene(cls, scene: GaussianScene) -> "GaussianModel":
        return cls(
            params={
                "position": scene.positions.copy(),
                "scale": inverse_softplus(scene.scales),
                "rotation": scene.rotations / np.linalg.norm(scene.rotations, axis=1, keepdims=True)
                if len(scene) else scene.rotations.copy(),
                "color": logit(scene.colors),
                "opacity": logit(scene.opacities),
            },
            filter_sigmas=scene.filter_sigmas.copy(),
        )

    def __len__(self) -> int:
        return self.params["position"].shape[0]

    def to_scene(self) -> GaussianScene:
        return GaussianScene(
            positions=self.params["position"].copy(),
            scales=softplus(self.params["scale"]),
            rotations=self.params["rotation"].copy(),
            colors=sigmoid(self.params["color"]),
            opacities=sigmoid(self.params["opacity"]),
            filter_sigmas=self.filter_sigmas.copy(),
        )

    def raw_gradients(self, grads: RenderGradients) -> Dict[str, np.ndarray]:
        """Chain activated-parameter gradients through the activations."""
        color = sigmoid(self.params["color"])
        opacity = sigmoid(self.params["opacity"])
        return {
            "position": grads.positions.copy(),
            "scale": grads.scales * sigmoid(self.params["scale"]),
            "rotation": grads.rotations.copy(),
            "color": grads.colors * color * (1.0 - color),
            "opacity": grads.opacities * opacity * (1.0 - opacity),
        }

    def normalize_rotations(self) -> None:
        q = self.params["rotation"]
        if len(q):
            self.params["rotation"] = q / np.linalg.norm(q, axis=1, keepdims=True)


@dataclass(eq=False)
class AdamState:
    """First/second moments per parameter group plus the step count."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    nonfinite: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})

    def check_sync(self, n: int) -> None:
        for k in self.m:
            if self.m[k].shape[0] != n or self.v[k].shape[0] != n:
                raise RuntimeError(f"optimizer state '{k}' has {self.m[k].shape[0]} rows for {n} Gaussians")


def optimizer_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
                   lrs: Dict[str, float], beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    Bias-corrected Adam update of every group in `lrs`, in place.

    Non-finite gradient entries are zeroed and counted in state.nonfinite.
    """
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    zeroed = 0
    for k, lr in lrs.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != params[k].shape:
            raise ValueError(f"gradient '{k}' has shape {g.shape}, parameter has {params[k].shape}")
        bad = ~np.isfinite(g)
        if np.any(bad):
            zeroed += int(np.sum(bad))
            g = np.where(bad, 0.0, g)
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k] -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    if zeroed:
        state.nonfinite += zeroed
        logger.warning(f"Zeroed {zeroed} non-finite gradient entries at optimizer step {state.step}")
    return params, state


def position_lr(step: int, cfg: TrainConfig, iterations: int, spatial_scale: float = 1.0) -> float:
    """Log-linear decay from lr_position to lr_position_final."""
    max_steps = cfg.lr_position_max_steps or max(iterations, 1)
    t = float(np.clip(step / max_steps, 0.0, 1.0))
    lr = np.exp((1.0 - t) * np.log(cfg.lr_position) + t * np.log(cfg.lr_position_final))
    return float(lr * spatial_scale)


def learning_rates(step: int, cfg: TrainConfig, iterations: int, spatial_scale: float = 1.0) -> Dict[str, float]:
    return {
        "position": position_lr(step, cfg, iterations, spatial_scale),
        "scale": cfg.lr_scale,
        "rotation": cfg.lr_rotation,
        "color": cfg.lr_color,
        "opacity": cfg.lr_opacity,
    }


def cameras_extent(cameras: Sequence[Camera]) -> float:
    """1.1 x the largest camera-centre distance from their mean; 1 for coincident cameras."""
    centers = np.stack([c.center for c in cameras])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return 1.1 * radius if radius > 0 else 1.0


@dataclass(eq=False)
class DensifyStats:
    """Accumulated screen-space gradient norms (NDC units) since the last densify event."""
    accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, mean2d_grad: np.ndarray, visible: np.ndarray, width: int, height: int) -> None:
        ndc = mean2d_grad * np.array([0.5 * width, 0.5 * height])
        norm = np.linalg.norm(ndc, axis=1)
        self.accum[visible] += norm[visible]
        self.denom[visible] += 1

    def average(self) -> np.ndarray:
        return np.where(self.denom > 0, self.accum / np.maximum(self.denom, 1.0), 0.0)


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    capped: bool = False


def _rows(arrays: Dict[str, np.ndarray], idx: np.ndarray) -> Dict[str, np.ndarray]:
    return {k: a[idx] for k, a in arrays.items()}


def _concat(base: Dict[str, np.ndarray], extra: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: np.concatenate([base[k], extra[k]]) for k in base}


def densify_and_prune(model: GaussianModel, state: AdamState, stats: DensifyStats, cfg: TrainConfig,
                      extent: float, rng: np.random.Generator) -> DensifyReport:
    """
    Clone small and split large high-gradient Gaussians, then prune
    near-transparent ones. Optimizer moment rows follow their Gaussians:
    new rows copy their parent's moments, removed rows are dropped.
    """
    report = DensifyReport()
    n = len(model)
    avg = stats.average()
    selected = avg >= cfg.densify_grad_threshold
    max_scale = softplus(model.params["scale"]).max(axis=1) if n else np.zeros(0)
    clone = selected & (max_scale <= cfg.percent_dense * extent)
    split = selected & ~clone

    projected = n + int(clone.sum()) + int(split.sum())
    if projected > cfg.max_gaussians:
        logger.warning(f"Densification would grow the scene to {projected} Gaussians "
                       f"(cap {cfg.max_gaussians}); skipping clone/split")
        report.capped = True
        clone[:] = False
        split[:] = False

    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)
    parent_idx = np.concatenate([clone_idx, np.repeat(split_idx, 2)])
    new_params = _rows(model.params, parent_idx)
    if split_idx.size:
        scales = softplus(model.params["scale"][split_idx])
        samples = rng.normal(size=(2 * split_idx.size, 3)) * np.repeat(scales, 2, axis=0)
        rot = np.repeat(quaternion_to_rotation(model.params["rotation"][split_idx]), 2, axis=0)
        offset = np.einsum("nij,nj->ni", rot, samples)
        k = clone_idx.size
        new_params["position"][k:] = np.repeat(model.params["position"][split_idx], 2, axis=0) + offset
        new_params["scale"][k:] = inverse_softplus(np.repeat(scales, 2, axis=0) / 1.6)

    model.params = _concat(model.params, new_params)
    model.filter_sigmas = np.concatenate([model.filter_sigmas, model.filter_sigmas[parent_idx]])
    state.m = _concat(state.m, _rows(state.m, parent_idx))
    state.v = _concat(state.v, _rows(state.v, parent_idx))
    report.cloned = int(clone_idx.size)
    report.split = int(split_idx.size)

    keep = np.ones(len(model), dtype=bool)
    keep[split_idx] = False
    low = sigmoid(model.params["opacity"]) < cfg.prune_opacity
    report.pruned = int(np.sum(low & keep))
    keep &= ~low
    model.params = _rows(model.params, keep)
    model.filter_sigmas = model.filter_sigmas[keep]
    state.m = _rows(state.m, keep)
    state.v = _rows(state.v, keep)
    state.check_sync(len(model))
    logger.info(f"Densify: +{report.cloned} cloned, {report.split} split, -{report.pruned} pruned "
                f"-> {len(model)} Gaussians")
    return report


@dataclass(eq=False)
class ViewLoss:
    """Loss terms and parameter gradients of one view."""
    total: float
    texture: float
    geometry: float
    grads: RenderGradients
    forward: RenderResult
    camera: Camera


def accumulate_view_gradients(results: Sequence[ViewLoss], n: int) -> RenderGradients:
    """Ordered sum of per-view gradients (MV-Regulation)."""
    total = RenderGradients.zeros(n)
    for r in results:
        total += r.grads
    return total


def internal_view_loss(scene: GaussianScene, view: TrainingView, cfg: TrainConfig) -> ViewLoss:
    """Stage-1 texture loss of one LR view and its gradients."""
    fwd = render(scene, view.camera, smoothing=True, cfg=cfg.render)
    term = texture_loss(view.image, fwd.image, cfg.loss)
    grads = render_backward(scene, view.camera, term.grad, None, smoothing=True, cfg=cfg.render, forward=fwd)
    return ViewLoss(term.value, term.value, 0.0, grads, fwd, view.camera)


def hr_view_loss(scene: GaussianScene, view: TrainingView, guidance: GuidanceSet, factor: int,
                 cfg: TrainConfig, masks: Optional[MaskCache] = None) -> ViewLoss:
    """Stage-2 final loss of one view rendered at HR, and its gradients."""
    cam = view.camera.scaled(factor)
    fwd = render(scene, cam, smoothing=True, cfg=cfg.render)
    mask = None
    if cfg.loss.fusion != "sum":
        masks = masks or MaskCache(cfg.loss)
        mask = masks.get(view.view_id, guidance.internal_image, guidance.external_image)
    fl = final_loss(fwd.image, fwd.depth, guidance, cfg.loss, mask)
    grads = render_backward(scene, cam, fl.grad_image, fl.grad_depth, smoothing=True, cfg=cfg.render, forward=fwd)
    return ViewLoss(fl.total, fl.texture, fl.geometry, grads, fwd, cam)


@dataclass(eq=False)
class TrainResult:
    scene: GaussianScene
    model: GaussianModel
    state: AdamState
    log: List[dict] = field(default_factory=list)
    densify_events: List[DensifyReport] = field(default_factory=list)
    steps: int = 0


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    if np.isinf(value):
        return "inf"
    return repr(float(value))


def write_training_log(path: Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["step"], _fmt(row["loss_total"]), _fmt(row["loss_tex"]), _fmt(row["loss_gem"]),
                             _fmt(row.get("psnr_holdout")), row["num_gaussians"]])
    return path


def _run_stage(stage: str, model: GaussianModel, state: AdamState, n_views: int, iterations: int, mv_views: int,
               view_loss: Callable[[GaussianScene, int], ViewLoss], sigma_cameras: Sequence[Camera],
               cfg: TrainConfig, densify: bool, extent: float, evaluator: Optional[Evaluator],
               quiet: bool, start_step: int) -> TrainResult:
    if mv_views > n_views:
        raise ConfigurationError(f"mv_views={mv_views} exceeds the {n_views} available training views")
    rng = np.random.default_rng([cfg.seed, 1 if stage == "internal" else 2])
    stats = DensifyStats.zeros(len(model))
    history: deque = deque(maxlen=LOSS_HISTORY)
    result = TrainResult(scene=model.to_scene(), model=model, state=state)

    progress = tqdm(range(start_step, iterations), desc=stage, disable=quiet, leave=False)
    for step in progress:
        scene = model.to_scene()
        picks = rng.choice(n_views, size=mv_views, replace=False)
        results = [view_loss(scene, int(i)) for i in picks]
        total = float(sum(r.total for r in results))
        history.append(total)
        if not np.isfinite(total):
            raise NumericalFailureError(f"{stage} training diverged", recent_losses=list(history), step=step + 1)

        grads = accumulate_view_gradients(results, len(model))
        for r in results:
            stats.add(r.grads.mean2d, r.forward.projected.visible, r.camera.width, r.camera.height)
        optimizer_step(model.params, model.raw_gradients(grads), state,
                       learning_rates(step, cfg, iterations, extent),
                       cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        model.normalize_rotations()

        done = step + 1
        if densify and cfg.densify_from <= done < cfg.densify_until and done % cfg.densify_interval == 0:
            report = densify_and_prune(model, state, stats, cfg, extent, rng)
            result.densify_events.append(report)
            model.filter_sigmas = compute_filter_sigmas(model.to_scene(), sigma_cameras, cfg.core, cfg.render.near_plane)
            stats = DensifyStats.zeros(len(model))

        psnr = None
        if evaluator is not None and (done == iterations or (cfg.eval_interval and done % cfg.eval_interval == 0)):
            psnr = evaluator(model.to_scene())
        result.log.append({
            "step": done,
            "loss_total": total,
            "loss_tex": float(sum(r.texture for r in results)),
            "loss_gem": float(sum(r.geometry for r in results)),
            "psnr_holdout": psnr,
            "num_gaussians": len(model),
        })
        progress.set_postfix(loss=f"{total:.4f}", n=len(model))
        result.steps = done

    result.scene = model.to_scene()
    logger.info(f"{stage} training finished: {result.steps} steps, {len(model)} Gaussians")
    return result


def train_internal(views: Sequence[TrainingView], initial: GaussianScene, cfg: Optional[TrainConfig] = None,
                   evaluator: Optional[Evaluator] = None, quiet: bool = True,
                   resume: Optional[Tuple[GaussianModel, AdamState, int]] = None) -> TrainResult:
    """
    Stage 1: fit the multi-scale internal model to the LR views.

    Each step samples mv_views views without replacement, sums their texture
    losses against the LR ground truth and takes one optimizer step on the
    summed gradient.
    """
    cfg = cfg or TrainConfig()
    if len(views) < cfg.mv_views:
        raise ConfigurationError(f"stage 1 needs at least mv_views={cfg.mv_views} views, got {len(views)}")
    cameras = [v.camera for v in views]
    if resume is not None:
        model, state, start = resume
    else:
        scene = initial.copy()
        scene.filter_sigmas = compute_filter_sigmas(scene, cameras, cfg.core, cfg.render.near_plane)
        model = GaussianModel.from_scene(scene)
        state = AdamState.zeros_like(model.params)
        start = 0
    if cfg.iterations == 0 and resume is None:
        return TrainResult(scene=model.to_scene(), model=model, state=state)
    return _run_stage(
        "internal", model, state, len(views), cfg.iterations, cfg.mv_views,
        lambda scene, i: internal_view_loss(scene, views[i], cfg),
        cameras, cfg, cfg.densify, cameras_extent(cameras), evaluator, quiet, start,
    )


def train_hr(views: Sequence[TrainingView], internal_scene: GaussianScene, guidance: Dict[str, GuidanceSet],
             cfg: Optional[TrainConfig] = None, evaluator: Optional[Evaluator] = None, quiet: bool = True,
             resume: Optional[Tuple[GaussianModel, AdamState, int]] = None) -> TrainResult:
    """
    Stage 2: warm-start from a copy of the internal scene and fit HR renders
    (scaled-intrinsics cameras) to the fused guidance with the final loss.

    The stage-1 filter sigmas are kept on entry, so the first step starts
    from exactly the internal model. They are only recomputed (from the HR
    cameras) at densification points. A scene loaded without sigmas gets
    the stage-1 ones from the LR cameras.
    """
    cfg = cfg or TrainConfig()
    factor = cfg.scale_factor
    validate_guidance(guidance, views, factor)
    iterations = cfg.stage2_iterations
    mv_views = cfg.stage2_mv_views
    if len(views) < mv_views:
        raise ConfigurationError(f"stage 2 needs at least mv_views={mv_views} views, got {len(views)}")
    if iterations == 0 and resume is None:
        scene = internal_scene.copy()
        model = GaussianModel.from_scene(scene)
        return TrainResult(scene=scene, model=model, state=AdamState.zeros_like(model.params))

    hr_cameras = [v.camera.scaled(factor) for v in views]
    if resume is not None:
        model, state, start = resume
    else:
        scene = internal_scene.copy()
        if not np.any(scene.filter_sigmas):
            scene.filter_sigmas = compute_filter_sigmas(scene, [v.camera for v in views], cfg.core, cfg.render.near_plane)
        model = GaussianModel.from_scene(scene)
        state = AdamState.zeros_like(model.params)
        start = 0
    masks = MaskCache(cfg.loss)
    if cfg.loss.fusion != "sum":
        masks.populate(guidance)
    return _run_stage(
        "hr", model, state, len(views), iterations, mv_views,
        lambda scene, i: hr_view_loss(scene, views[i], guidance[views[i].view_id], factor, cfg, masks),
        hr_cameras, cfg, cfg.densify and cfg.densify_in_hr, cameras_extent(hr_cameras), evaluator, quiet, start,
    )


def save_checkpoint(path: Path, model: GaussianModel, state: AdamState, step: int, stage: str = "internal") -> Path:
    """
    IESR container with raw parameters, filter sigmas and Adam moments, plus
    the activated scene as a text file next to it (<path>.scene).
    """
    path = Path(path)
    fields = {f"param.{k}": v for k, v in model.params.items()}
    fields["filter_sigmas"] = model.filter_sigmas
    fields.update({f"adam.m.{k}": v for k, v in state.m.items()})
    fields.update({f"adam.v.{k}": v for k, v in state.v.items()})
    meta = {"stage": stage, "step": int(step), "adam_step": int(state.step),
            "nonfinite": int(state.nonfinite), "num_gaussians": len(model)}
    write_container(path, fields, meta)
    write_scene(path.with_suffix(".scene"), model.to_scene())
    logger.info(f"Checkpoint written to {path} (stage={stage}, step={step}, {len(model)} Gaussians)")
    return path


def load_checkpoint(path: Path) -> Tuple[GaussianModel, AdamState, dict]:
    fields, meta = read_container(path)
    try:
        params = {k: fields[f"param.{k}"] for k in PARAM_GROUPS}
        model = GaussianModel(params=params, filter_sigmas=fields["filter_sigmas"])
        state = AdamState(
            m={k: fields[f"adam.m.{k}"] for k in PARAM_GROUPS},
            v={k: fields[f"adam.v.{k}"] for k in PARAM_GROUPS},
            step=int(meta.get("adam_step", 0)),
            nonfinite=int(meta.get("nonfinite", 0)),
        )
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: missing field {e}") from e
    model.normalize_rotations()
    state.check_sync(len(model))
    return model, state, meta


def load_scene(path: Path) -> GaussianScene:
    """A scene from either an IESR checkpoint or a scene text file."""
    path = Path(path)
    if path.suffix.lower() == ".iesr":
        model, _, _ = load_checkpoint(path)
        return model.to_scene()
    return read_scene(path)
