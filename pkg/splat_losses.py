"""
Texture and geometry objectives with per-pixel gradients.

Every loss returns a LossTerm whose `grad` has the shape of the buffer being
optimized (the rendered image or the rendered depth) and is ready to be fed
to render_backward as upstream gradient.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from splat_models import LossConfig
from splat_renderer import DepthBuffer, ImageBuffer
from utils.resampling import filter_matrix, gaussian_kernel

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_CONSTANT = "constant"
STATUS_INSUFFICIENT = "insufficient-pixels"


@dataclass(eq=False)
class MaskBuffer:
    """Binary per-pixel mask."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim != 2:
            raise ValueError(f"MaskBuffer expects (H, W) data, got shape {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("MaskBuffer values must be exactly 0 or 1")
        self.data = data.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def full(cls, width: int, height: int, value: int) -> "MaskBuffer":
        return cls(np.full((height, width), value, dtype=np.uint8))

    def inverted(self) -> "MaskBuffer":
        return MaskBuffer(1 - self.data)


@dataclass(eq=False)
class LossTerm:
    """Scalar loss and its gradient with respect to the optimized buffer."""
    value: float
    grad: np.ndarray
    status: str = STATUS_OK


@dataclass(eq=False)
class FinalLoss:
    """All terms of the HR objective for one view."""
    total: float
    texture: float
    geometry: float
    grad_image: np.ndarray
    grad_depth: np.ndarray
    mask: Optional[MaskBuffer] = None
    terms: dict = field(default_factory=dict)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _mask_weights(weight: Optional[MaskBuffer], shape) -> np.ndarray:
    if weight is None:
        return np.ones(shape[:2])
    if weight.data.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {weight.data.shape} does not match image {shape[:2]}")
    return weight.data.astype(np.float64)


def l1_loss(a: ImageBuffer, b: ImageBuffer, weight: Optional[MaskBuffer] = None) -> LossTerm:
    """Mean |a - b| over unmasked pixels and channels; gradient w.r.t. a."""
    _check_same_shape(a.data, b.data, "l1_loss")
    w = _mask_weights(weight, a.data.shape)[:, :, None]
    count = float(np.sum(w) * a.channels)
    if count == 0:
        return LossTerm(0.0, np.zeros_like(a.data))
    diff = a.data - b.data
    value = float(np.sum(np.abs(diff) * w) / count)
    grad = np.sign(diff) * w / count
    return LossTerm(value, grad)


class _SSIMWindow:
    """Gaussian window operators for one image size."""

    def __init__(self, height: int, width: int, cfg: LossConfig):
        k = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma)
        self.kh = filter_matrix(height, k)
        self.kw = filter_matrix(width, k)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.kh @ x @ self.kw.T

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        return self.kh.T @ g @ self.kw


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: _SSIMWindow, cfg: LossConfig, want_grad: bool):
    """SSIM map of one channel and, optionally, the pieces needed for d(map)/da."""
    mu_a = win.apply(a)
    mu_b = win.apply(b)
    s_aa = win.apply(a * a) - mu_a * mu_a
    s_bb = win.apply(b * b) - mu_b * mu_b
    s_ab = win.apply(a * b) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + cfg.c1
    a2 = 2.0 * s_ab + cfg.c2
    b1 = mu_a * mu_a + mu_b * mu_b + cfg.c1
    b2 = s_aa + s_bb + cfg.c2
    smap = (a1 * a2) / (b1 * b2)
    if not want_grad:
        return smap, None
    parts = {
        "d_mu": smap * (2.0 * mu_b / a1 - 2.0 * mu_b / a2 - 2.0 * mu_a / b1 + 2.0 * mu_a / b2),
        "d_ab": smap * 2.0 / a2,
        "d_aa": -smap / b2,
    }
    return smap, parts


def _ssim_grad(a: np.ndarray, b: np.ndarray, upstream: np.ndarray, parts: dict, win: _SSIMWindow) -> np.ndarray:
    """Chain an upstream gradient on the SSIM map back to channel `a`."""
    return (win.adjoint(upstream * parts["d_mu"])
            + 2.0 * a * win.adjoint(upstream * parts["d_aa"])
            + b * win.adjoint(upstream * parts["d_ab"]))


def ssim_map(a: ImageBuffer, b: ImageBuffer, cfg: Optional[LossConfig] = None) -> np.ndarray:
    """Per-pixel, per-channel SSIM (H, W, C)."""
    cfg = cfg or LossConfig()
    _check_same_shape(a.data, b.data, "ssim")
    win = _SSIMWindow(a.height, a.width, cfg)
    return np.stack([_ssim_channel(a.data[:, :, c], b.data[:, :, c], win, cfg, False)[0]
                     for c in range(a.channels)], axis=2)


def ssim(a: ImageBuffer, b: ImageBuffer, cfg: Optional[LossConfig] = None) -> float:
    """Mean SSIM over pixels and channels (Gaussian window, symmetric borders)."""
    return float(np.mean(ssim_map(a, b, cfg)))


def dssim_loss(a: ImageBuffer, b: ImageBuffer, cfg: Optional[LossConfig] = None,
               pixel_weight: Optional[np.ndarray] = None) -> LossTerm:
    """
    (1 - SSIM(a, b)) / 2 averaged over pixels and channels, gradient w.r.t. a.

    `pixel_weight` (H, W) turns the plain mean into a weighted mean of the
    D-SSIM map; it is how the `multiply` masking mode is realized.
    """
    cfg = cfg or LossConfig()
    _check_same_shape(a.data, b.data, "dssim_loss")
    win = _SSIMWindow(a.height, a.width, cfg)
    if pixel_weight is None:
        weight = np.ones((a.height, a.width))
    else:
        weight = np.asarray(pixel_weight, dtype=np.float64)
    denom = float(np.sum(weight) * a.channels)
    grad = np.zeros_like(a.data)
    if denom == 0:
        return LossTerm(0.0, grad)
    total = 0.0
    for c in range(a.channels):
        ac, bc = a.data[:, :, c], b.data[:, :, c]
        smap, parts = _ssim_channel(ac, bc, win, cfg, True)
        total += float(np.sum(weight * (1.0 - smap)))
        upstream = -0.5 * weight / denom
        grad[:, :, c] = _ssim_grad(ac, bc, upstream, parts, win)
    return LossTerm(0.5 * total / denom, grad)


def _pearson(r: np.ndarray, e: np.ndarray, floor: float):
    """1 - corr(r, e) over flat arrays, gradient w.r.t. r, status."""
    n = r.size
    if n < 2:
        return 0.0, np.zeros_like(r), STATUS_INSUFFICIENT
    if np.all(r == r[0]) or np.all(e == e[0]):
        return 1.0, np.zeros_like(r), STATUS_CONSTANT
    rc = r - r.mean()
    ec = e - e.mean()
    var_r = float(np.mean(rc * rc)) + floor
    var_e = float(np.mean(ec * ec)) + floor
    cov = float(np.mean(rc * ec))
    norm = np.sqrt(var_r * var_e)
    rho = cov / norm
    d_rho = ec / (n * norm) - rho * rc / (n * var_r)
    return 1.0 - rho, -d_rho, STATUS_OK


def pearson_depth_loss(r: DepthBuffer, e: DepthBuffer, cfg: Optional[LossConfig] = None) -> LossTerm:
    """
    Relaxed relative depth loss: 1 - Pearson correlation between rendered and
    reference depth over pixels valid in both buffers.

    Global mode uses one coefficient for the view; patch mode averages the
    coefficient-based loss over non-overlapping P x P patches that hold at
    least two valid pixels.
    """
    cfg = cfg or LossConfig()
    _check_same_shape(r.data, e.data, "pearson_depth_loss")
    valid = r.valid(cfg.min_coverage) & e.valid(cfg.min_coverage)
    grad = np.zeros_like(r.data)
    if cfg.pearson_mode == "global":
        value, g, status = _pearson(r.data[valid], e.data[valid], cfg.pearson_var_floor)
        grad[valid] = g
        return LossTerm(value, grad, status)

    p = cfg.pearson_patch
    values = []
    patch_grads = []
    for i0 in range(0, r.height, p):
        for j0 in range(0, r.width, p):
            sl = (slice(i0, i0 + p), slice(j0, j0 + p))
            v = valid[sl]
            value, g, status = _pearson(r.data[sl][v], e.data[sl][v], cfg.pearson_var_floor)
            if status == STATUS_INSUFFICIENT:
                continue
            values.append(value)
            patch_grads.append((sl, v, g))
    if not values:
        return LossTerm(0.0, grad, STATUS_INSUFFICIENT)
    count = len(values)
    for sl, v, g in patch_grads:
        block = grad[sl]
        block[v] += g / count
    return LossTerm(float(np.mean(values)), grad)


def internal_geom_loss(r: DepthBuffer, i: DepthBuffer, cfg: Optional[LossConfig] = None) -> LossTerm:
    """Mean |r - i| over pixels valid in both depth buffers; gradient w.r.t. r."""
    cfg = cfg or LossConfig()
    _check_same_shape(r.data, i.data, "internal_geom_loss")
    valid = r.valid(cfg.min_coverage) & i.valid(cfg.min_coverage)
    count = int(np.sum(valid))
    grad = np.zeros_like(r.data)
    if count == 0:
        return LossTerm(0.0, grad, STATUS_INSUFFICIENT)
    diff = r.data[valid] - i.data[valid]
    grad[valid] = np.sign(diff) / count
    return LossTerm(float(np.sum(np.abs(diff)) / count), grad)


def texture_loss(ref: ImageBuffer, rendered: ImageBuffer, cfg: Optional[LossConfig] = None,
                 weight: Optional[MaskBuffer] = None) -> LossTerm:
    """(1 - lambda) * L1 + lambda * D-SSIM of `rendered` against `ref`, optionally masked."""
    cfg = cfg or LossConfig()
    _check_same_shape(ref.data, rendered.data, "texture_loss")
    l1 = l1_loss(rendered, ref, weight)
    if cfg.lambda_ds == 0:
        return LossTerm((1.0 - cfg.lambda_ds) * l1.value, (1.0 - cfg.lambda_ds) * l1.grad)

    if weight is None:
        ds = dssim_loss(rendered, ref, cfg)
    elif cfg.masked_ssim_mode == "substitute":
        keep = weight.data.astype(bool)[:, :, None]
        substituted = ImageBuffer(np.where(keep, rendered.data, ref.data))
        ds = dssim_loss(substituted, ref, cfg)
        ds = LossTerm(ds.value, np.where(keep, ds.grad, 0.0))
    else:
        ds = dssim_loss(rendered, ref, cfg, pixel_weight=weight.data.astype(np.float64))
    value = (1.0 - cfg.lambda_ds) * l1.value + cfg.lambda_ds * ds.value
    grad = (1.0 - cfg.lambda_ds) * l1.grad + cfg.lambda_ds * ds.grad
    return LossTerm(value, grad)


def discrepancy_map(i: ImageBuffer, e: ImageBuffer, epsilon: float = 1e-6) -> ImageBuffer:
    """D(p) = |I(p) - E(p)| / (I(p) + eps), averaged over channels."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    _check_same_shape(i.data, e.data, "discrepancy_map")
    ratio = np.abs(i.data - e.data) / (i.data + epsilon)
    return ImageBuffer(np.mean(ratio, axis=2, keepdims=True))


def binary_mask(d: ImageBuffer, threshold: float) -> MaskBuffer:
    """M(p) = 1 iff D(p) >= T."""
    if d.channels != 1:
        raise ValueError(f"binary_mask expects a 1-channel discrepancy map, got {d.channels} channels")
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    return MaskBuffer((d.data[:, :, 0] >= threshold).astype(np.uint8))


def fusion_mask(internal_img: ImageBuffer, external_img: ImageBuffer, cfg: LossConfig) -> MaskBuffer:
    """Mask routing each pixel to internal (1) or external (0) supervision, honoring cfg.fusion."""
    if cfg.fusion == "external":
        return MaskBuffer.full(internal_img.width, internal_img.height, 0)
    if cfg.fusion == "internal":
        return MaskBuffer.full(internal_img.width, internal_img.height, 1)
    return binary_mask(discrepancy_map(internal_img, external_img, cfg.epsilon), cfg.threshold)


def fused_texture_loss(rendered: ImageBuffer, internal_img: ImageBuffer, external_img: ImageBuffer,
                       cfg: Optional[LossConfig] = None, mask: Optional[MaskBuffer] = None) -> LossTerm:
    """
    Internal texture loss on high-discrepancy pixels plus external texture
    loss on the rest. A precomputed mask (e.g. from the per-view cache) may be
    passed in; otherwise it is derived from the two references.
    """
    cfg = cfg or LossConfig()
    _check_same_shape(rendered.data, internal_img.data, "fused_texture_loss")
    _check_same_shape(rendered.data, external_img.data, "fused_texture_loss")
    if cfg.fusion == "sum":
        parts = []
        if cfg.use_internal_texture:
            parts.append(texture_loss(internal_img, rendered, cfg))
        if cfg.use_external_texture:
            parts.append(texture_loss(external_img, rendered, cfg))
    else:
        if mask is None:
            mask = fusion_mask(internal_img, external_img, cfg)
        parts = []
        if cfg.use_internal_texture:
            parts.append(texture_loss(internal_img, rendered, cfg, mask))
        if cfg.use_external_texture:
            parts.append(texture_loss(external_img, rendered, cfg, mask.inverted()))
    value = float(sum(p.value for p in parts))
    grad = np.zeros_like(rendered.data)
    for p in parts:
        grad += p.grad
    return LossTerm(value, grad)


def fused_geometry_loss(r_depth: DepthBuffer, i_depth: DepthBuffer, e_depth: DepthBuffer,
                        cfg: Optional[LossConfig] = None) -> LossTerm:
    """lambda_i * L1(I_depth, R_depth) + lambda_e * Pearson(R_depth, E_depth)."""
    cfg = cfg or LossConfig()
    value = 0.0
    grad = np.zeros_like(r_depth.data)
    if cfg.use_internal_geometry and cfg.lambda_i > 0:
        term = internal_geom_loss(r_depth, i_depth, cfg)
        value += cfg.lambda_i * term.value
        grad += cfg.lambda_i * term.grad
    if cfg.use_external_geometry and cfg.lambda_e > 0:
        term = pearson_depth_loss(r_depth, e_depth, cfg)
        value += cfg.lambda_e * term.value
        grad += cfg.lambda_e * term.grad
    return LossTerm(value, grad)


def final_loss(rendered: ImageBuffer, rendered_depth: DepthBuffer, guidance, cfg: Optional[LossConfig] = None,
               mask: Optional[MaskBuffer] = None) -> FinalLoss:
    """
    Fused texture loss plus fused geometry loss for one view.

    `guidance` is a GuidanceSet (anything with internal_image, external_image,
    internal_depth and external_depth attributes).
    """
    cfg = cfg or LossConfig()
    missing = [name for name in ("internal_image", "external_image", "internal_depth", "external_depth")
               if getattr(guidance, name, None) is None]
    if missing:
        raise ValueError(f"guidance for view '{getattr(guidance, 'view_id', '?')}' lacks {', '.join(missing)}")
    if mask is None and cfg.fusion != "sum":
        mask = fusion_mask(guidance.internal_image, guidance.external_image, cfg)
    tex = fused_texture_loss(rendered, guidance.internal_image, guidance.external_image, cfg, mask)
    gem = fused_geometry_loss(rendered_depth, guidance.internal_depth, guidance.external_depth, cfg)
    return FinalLoss(
        total=tex.value + gem.value,
        texture=tex.value,
        geometry=gem.value,
        grad_image=tex.grad,
        grad_depth=gem.grad,
        mask=mask,
        terms={"texture": tex.value, "geometry": gem.value},
    )


class MaskCache:
    """
    Per-view discrepancy masks. The internal model is frozen during HR
    training, so a view's mask is computed once and reused.
    """

    def __init__(self, cfg: Optional[LossConfig] = None):
        self.cfg = cfg or LossConfig()
        self._masks: dict = {}

    def __len__(self) -> int:
        return len(self._masks)

    def __contains__(self, view_id: str) -> bool:
        return view_id in self._masks

    def get(self, view_id: str, internal_img: ImageBuffer, external_img: ImageBuffer) -> MaskBuffer:
        mask = self._masks.get(view_id)
        if mask is None:
            mask = fusion_mask(internal_img, external_img, self.cfg)
            self._masks[view_id] = mask
        return mask

    def populate(self, guidance: dict) -> "MaskCache":
        """Fill the cache for every GuidanceSet before training starts."""
        for view_id, gset in guidance.items():
            self.get(view_id, gset.internal_image, gset.external_image)
        logger.debug(f"Mask cache populated for {len(self._masks)} views")
        return self
