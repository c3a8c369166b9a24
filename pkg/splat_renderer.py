"""
Tile-based differentiable rasterizer.

Gaussians are projected, globally sorted by camera depth and binned into
square tiles. Inside a tile every pixel composites the tile's Gaussians front
to back; color and expected depth share the same compositing weights. The
backward pass replays the stored per-tile weights in reverse and returns
analytic gradients of the activated Gaussian parameters.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from splat_core import Camera, Gaussian3D, GaussianScene, ProjectedScene, project_scene
from splat_models import RenderConfig

logger = logging.getLogger(__name__)

SceneLike = Union[GaussianScene, Sequence[Gaussian3D]]


@dataclass(eq=False)
class ImageBuffer:
    """Dense (height, width, channels) float raster."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"ImageBuffer expects (H, W, 1|3) data, got shape {data.shape}")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def filled(cls, width: int, height: int, value: Sequence[float]) -> "ImageBuffer":
        value = np.asarray(value, dtype=np.float64).reshape(-1)
        return cls(np.broadcast_to(value, (height, width, value.size)).copy())

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.data.copy())


@dataclass(eq=False)
class DepthBuffer:
    """Expected depth plus accumulated alpha (coverage) per pixel."""
    data: np.ndarray
    coverage: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3 and self.data.shape[2] == 1:
            self.data = self.data[:, :, 0]
        if self.data.ndim != 2:
            raise ValueError(f"DepthBuffer expects (H, W) data, got shape {self.data.shape}")
        if self.coverage is None:
            self.coverage = np.ones_like(self.data)
        else:
            self.coverage = np.asarray(self.coverage, dtype=np.float64).reshape(self.data.shape)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def valid(self, min_coverage: float) -> np.ndarray:
        return (self.coverage >= min_coverage) & np.isfinite(self.data)

    def copy(self) -> "DepthBuffer":
        return DepthBuffer(self.data.copy(), self.coverage.copy())


@dataclass(eq=False)
class TrainingView:
    """A calibrated camera with its reference image."""
    camera: Camera
    image: ImageBuffer

    def __post_init__(self):
        if (self.image.width, self.image.height) != (self.camera.width, self.camera.height):
            raise ValueError(
                f"view '{self.camera.view_id}': image {self.image.width}x{self.image.height} "
                f"does not match camera {self.camera.width}x{self.camera.height}"
            )

    @property
    def view_id(self) -> str:
        return self.camera.view_id


@dataclass(eq=False)
class RenderGradients:
    """Per-Gaussian partials of a scalar loss (activated parameters)."""
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    mean2d: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "RenderGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 2)))

    def __iadd__(self, other: "RenderGradients") -> "RenderGradients":
        self.positions += other.positions
        self.scales += other.scales
        self.rotations += other.rotations
        self.colors += other.colors
        self.opacities += other.opacities
        self.mean2d += other.mean2d
        return self

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.positions, self.scales, self.rotations, self.colors, self.opacities))


@dataclass(eq=False)
class _Tile:
    """Forward state of one tile kept for the backward pass."""
    rows: slice
    cols: slice
    ids: np.ndarray                   # Gaussian indices in depth order
    dx: np.ndarray = field(default=None)      # (K, P)
    dy: np.ndarray = field(default=None)
    gauss: np.ndarray = field(default=None)   # (K, P) 2D density, zero outside the cutoff
    alpha: np.ndarray = field(default=None)   # (K, P) effective alpha after termination
    trans: np.ndarray = field(default=None)   # (K, P) transmittance before each layer
    t_final: np.ndarray = field(default=None)  # (P,)


@dataclass(eq=False)
class RenderResult:
    """Forward output; unpacks as (image, depth)."""
    image: ImageBuffer
    depth: DepthBuffer
    projected: ProjectedScene
    tiles: List[_Tile]
    smoothing: bool

    def __iter__(self) -> Iterator:
        yield self.image
        yield self.depth


def _as_scene(scene: SceneLike) -> GaussianScene:
    if isinstance(scene, GaussianScene):
        return scene
    return GaussianScene.from_gaussians(scene)


def _bin_tiles(proj: ProjectedScene, cam: Camera, cfg: RenderConfig) -> List[_Tile]:
    """Assign visible Gaussians to every tile their cutoff ellipse touches, in global depth order."""
    ts = cfg.tile_size
    n_tx = (cam.width + ts - 1) // ts
    n_ty = (cam.height + ts - 1) // ts
    buckets: List[List[int]] = [[] for _ in range(n_tx * n_ty)]

    order = np.argsort(proj.depth, kind="stable")
    a = proj.cov2d[:, 0, 0]
    b = proj.cov2d[:, 0, 1]
    c = proj.cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = cfg.cutoff_sigma * np.sqrt(np.maximum(lam_max, 0.0)) * (1 + 1e-9) + 1e-9

    for idx in order:
        if not proj.visible[idx]:
            continue
        mx, my = proj.mean2d[idx]
        r = radius[idx]
        # pixel j has its centre at j + 0.5
        j0 = int(np.ceil(mx - r - 0.5))
        j1 = int(np.floor(mx + r - 0.5))
        i0 = int(np.ceil(my - r - 0.5))
        i1 = int(np.floor(my + r - 0.5))
        j0, j1 = max(j0, 0), min(j1, cam.width - 1)
        i0, i1 = max(i0, 0), min(i1, cam.height - 1)
        if j0 > j1 or i0 > i1:
            continue
        for ty in range(i0 // ts, i1 // ts + 1):
            for tx in range(j0 // ts, j1 // ts + 1):
                buckets[ty * n_tx + tx].append(int(idx))

    tiles = []
    for ty in range(n_ty):
        for tx in range(n_tx):
            ids = np.asarray(buckets[ty * n_tx + tx], dtype=np.int64)
            tiles.append(_Tile(
                rows=slice(ty * ts, min((ty + 1) * ts, cam.height)),
                cols=slice(tx * ts, min((tx + 1) * ts, cam.width)),
                ids=ids,
            ))
    return tiles


def _tile_forward(tile: _Tile, proj: ProjectedScene, colors: np.ndarray, cfg: RenderConfig):
    """Composite one tile; returns (rgb (P,3), depth (P,), t_final (P,))."""
    jj, ii = np.meshgrid(np.arange(tile.cols.start, tile.cols.stop),
                         np.arange(tile.rows.start, tile.rows.stop))
    px = (jj.reshape(-1) + 0.5)[None, :]
    py = (ii.reshape(-1) + 0.5)[None, :]
    n_pix = px.shape[1]
    bg = np.asarray(cfg.background, dtype=np.float64)
    if tile.ids.size == 0:
        tile.t_final = np.ones(n_pix)
        return np.broadcast_to(bg, (n_pix, 3)).copy(), np.zeros(n_pix), tile.t_final

    ids = tile.ids
    mean = proj.mean2d[ids]
    conic = proj.conic[ids]
    dx = px - mean[:, 0:1]
    dy = py - mean[:, 1:2]
    q = (conic[:, 0, 0:1] * dx * dx + 2.0 * conic[:, 0, 1:2] * dx * dy + conic[:, 1, 1:2] * dy * dy)
    inside = q <= cfg.cutoff_sigma ** 2
    gauss = np.where(inside, np.exp(-0.5 * q), 0.0)
    alpha = proj.opacities[ids][:, None] * gauss

    # transmittance before each layer, then stop accepting layers once T < threshold
    one_minus = 1.0 - alpha
    trans = np.ones_like(alpha)
    if alpha.shape[0] > 1:
        trans[1:] = np.cumprod(one_minus[:-1], axis=0)
    active = trans >= cfg.transmittance_threshold
    alpha = np.where(active, alpha, 0.0)
    one_minus = 1.0 - alpha
    trans = np.ones_like(alpha)
    if alpha.shape[0] > 1:
        trans[1:] = np.cumprod(one_minus[:-1], axis=0)
    t_final = trans[-1] * one_minus[-1]

    weights = alpha * trans
    rgb = weights.T @ colors[ids] + t_final[:, None] * bg[None, :]
    depth = weights.T @ proj.depth[ids]

    tile.dx, tile.dy, tile.gauss = dx, dy, gauss
    tile.alpha, tile.trans, tile.t_final = alpha, trans, t_final
    return rgb, depth, t_final


def render(scene: SceneLike, cam: Camera, smoothing: bool = True, cfg: Optional[RenderConfig] = None) -> RenderResult:
    """Render color and expected depth of `scene` seen from `cam`."""
    cfg = cfg or RenderConfig()
    scene = _as_scene(scene)
    proj = project_scene(scene, cam, smoothing=smoothing, near_plane=cfg.near_plane, dilation=cfg.dilation)
    tiles = _bin_tiles(proj, cam, cfg)

    def work(tile: _Tile):
        return _tile_forward(tile, proj, scene.colors, cfg)

    if cfg.num_threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=cfg.num_threads) as pool:
            results = list(pool.map(work, tiles))
    else:
        results = [work(t) for t in tiles]

    image = np.zeros((cam.height, cam.width, 3))
    depth = np.zeros((cam.height, cam.width))
    coverage = np.zeros((cam.height, cam.width))
    for tile, (rgb, dep, t_final) in zip(tiles, results):
        h = tile.rows.stop - tile.rows.start
        w = tile.cols.stop - tile.cols.start
        image[tile.rows, tile.cols] = rgb.reshape(h, w, 3)
        depth[tile.rows, tile.cols] = dep.reshape(h, w)
        coverage[tile.rows, tile.cols] = (1.0 - t_final).reshape(h, w)
    return RenderResult(
        image=ImageBuffer(image),
        depth=DepthBuffer(depth, coverage),
        projected=proj,
        tiles=tiles,
        smoothing=smoothing,
    )


def sr_splat(scene: SceneLike, cam: Camera, factor: float, smoothing: bool = True,
             cfg: Optional[RenderConfig] = None) -> RenderResult:
    """Render at `factor` times the camera's resolution by scaling its intrinsics."""
    if factor < 1:
        raise ValueError(f"SR-splatting only upsamples; factor must be >= 1, got {factor}")
    if factor == 1:
        return render(scene, cam, smoothing=smoothing, cfg=cfg)
    return render(scene, cam.scaled(factor), smoothing=smoothing, cfg=cfg)


def _tile_backward(tile: _Tile, proj: ProjectedScene, colors: np.ndarray, g_img: np.ndarray,
                   g_dep: np.ndarray, cfg: RenderConfig):
    """Per-tile partials: (ids, d_color (K,3), d_depth (K,), d_opacity (K,), d_mean (K,2), d_conic (K,3))."""
    ids = tile.ids
    gc = g_img[tile.rows, tile.cols].reshape(-1, 3)
    gd = g_dep[tile.rows, tile.cols].reshape(-1)
    alpha, trans = tile.alpha, tile.trans
    weights = alpha * trans
    cols = colors[ids]
    depths = proj.depth[ids]

    d_color = weights @ gc
    d_depth = weights @ gd

    # per-layer scalar "value" seen by the upstream gradient, and the composite behind each layer
    value = cols @ gc.T + depths[:, None] * gd[None, :]
    bg = np.asarray(cfg.background, dtype=np.float64)
    behind = np.empty_like(alpha)
    acc = gc @ bg
    for k in range(alpha.shape[0] - 1, -1, -1):
        behind[k] = acc
        acc = alpha[k] * value[k] + (1.0 - alpha[k]) * acc
    d_alpha = trans * (value - behind)
    d_alpha = np.where(trans >= cfg.transmittance_threshold, d_alpha, 0.0)

    opac = proj.opacities[ids][:, None]
    d_opacity = np.sum(d_alpha * tile.gauss, axis=1)
    d_q = -0.5 * tile.gauss * opac * d_alpha
    conic = proj.conic[ids]
    dx, dy = tile.dx, tile.dy
    a00 = conic[:, 0, 0:1]
    a01 = conic[:, 0, 1:2]
    a11 = conic[:, 1, 1:2]
    d_mean = np.stack([
        np.sum(d_q * -2.0 * (a00 * dx + a01 * dy), axis=1),
        np.sum(d_q * -2.0 * (a01 * dx + a11 * dy), axis=1),
    ], axis=1)
    d_conic = np.stack([
        np.sum(d_q * dx * dx, axis=1),
        np.sum(d_q * dx * dy, axis=1),
        np.sum(d_q * dy * dy, axis=1),
    ], axis=1)
    return ids, d_color, d_depth, d_opacity, d_mean, d_conic


# dR/dq for q = (w, x, y, z), rows of quaternion_to_rotation
def _rotation_partials(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero], axis=1)
    dx = np.stack([zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], axis=1)
    dy = np.stack([-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y], axis=1)
    dz = np.stack([-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero], axis=1)
    return np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)


def render_backward(scene: SceneLike, cam: Camera, upstream_image: np.ndarray,
                    upstream_depth: Optional[np.ndarray] = None, smoothing: bool = True,
                    cfg: Optional[RenderConfig] = None,
                    forward: Optional[RenderResult] = None) -> RenderGradients:
    """
    Gradients of sum(upstream_image * image) + sum(upstream_depth * depth)
    with respect to positions, scales, rotations, colors and opacities.

    Pass the RenderResult of the matching forward call as `forward` to skip
    re-rendering.
    """
    cfg = cfg or RenderConfig()
    scene = _as_scene(scene)
    n = len(scene)
    if forward is None:
        forward = render(scene, cam, smoothing=smoothing, cfg=cfg)
    smoothing = forward.smoothing
    g_img = np.asarray(upstream_image, dtype=np.float64)
    if g_img.ndim == 2:
        g_img = g_img[:, :, None]
    if g_img.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream image gradient shape {g_img.shape} does not match render {(cam.height, cam.width, 3)}")
    if upstream_depth is None:
        g_dep = np.zeros((cam.height, cam.width))
    else:
        g_dep = np.asarray(upstream_depth, dtype=np.float64).reshape(cam.height, cam.width)

    grads = RenderGradients.zeros(n)
    if n == 0:
        return grads
    proj = forward.projected
    work_tiles = [t for t in forward.tiles if t.ids.size > 0]

    def work(tile: _Tile):
        return _tile_backward(tile, proj, scene.colors, g_img, g_dep, cfg)

    if cfg.num_threads > 1 and len(work_tiles) > 1:
        with ThreadPoolExecutor(max_workers=cfg.num_threads) as pool:
            partials = list(pool.map(work, work_tiles))
    else:
        partials = [work(t) for t in work_tiles]

    d_depth = np.zeros(n)
    d_eff_opacity = np.zeros(n)
    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    # tile order reduction keeps results bit-reproducible for any thread count
    for ids, dc, dd, do, dm, dq in partials:
        grads.colors[ids] += dc
        d_depth[ids] += dd
        d_eff_opacity[ids] += do
        d_mean[ids] += dm
        d_conic[ids] += dq

    vis = proj.visible
    conic = proj.conic
    g_conic = np.zeros((n, 2, 2))
    g_conic[:, 0, 0] = d_conic[:, 0]
    g_conic[:, 0, 1] = d_conic[:, 1]
    g_conic[:, 1, 0] = d_conic[:, 1]
    g_conic[:, 1, 1] = d_conic[:, 2]
    g_cov2d = -conic @ g_conic @ conic

    jac = proj.jacobian
    t = jac @ cam.rotation
    g_cov3d = np.transpose(t, (0, 2, 1)) @ g_cov2d @ t
    g_t = 2.0 * g_cov2d @ t @ proj.cov3d
    g_jac = g_t @ cam.rotation.T

    pc = proj.cam_points
    x, y = pc[:, 0], pc[:, 1]
    z = np.where(vis, pc[:, 2], 1.0)
    fx, fy = cam.focal
    g_pc = np.zeros((n, 3))
    g_pc[:, 0] = g_jac[:, 0, 2] * (-fx / z ** 2) + d_mean[:, 0] * fx / z
    g_pc[:, 1] = g_jac[:, 1, 2] * (-fy / z ** 2) + d_mean[:, 1] * fy / z
    g_pc[:, 2] = (g_jac[:, 0, 0] * (-fx / z ** 2) + g_jac[:, 0, 2] * (2 * fx * x / z ** 3)
                  + g_jac[:, 1, 1] * (-fy / z ** 2) + g_jac[:, 1, 2] * (2 * fy * y / z ** 3)
                  + d_mean[:, 0] * (-fx * x / z ** 2) + d_mean[:, 1] * (-fy * y / z ** 2)
                  + d_depth)
    g_pc[~vis] = 0.0
    grads.positions = g_pc @ cam.rotation

    # Sigma = M M^T with M = R diag(s_eff)
    rot = proj.rotation
    s_eff = proj.scales
    m = rot * s_eff[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    g_s_eff = np.einsum("nik,nik->nk", g_m, rot)
    g_rot = g_m * s_eff[:, None, :]

    q_raw = scene.rotations
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    g_q = np.einsum("nkij,nij->nk", _rotation_partials(q), g_rot)
    g_q = (g_q - q * np.sum(q * g_q, axis=1, keepdims=True)) / norm
    grads.rotations = np.where(vis[:, None], g_q, 0.0)

    if smoothing:
        s = scene.scales
        sig2 = scene.filter_sigmas[:, None] ** 2
        factor = proj.smoothing_factor[:, None]
        g_scale = g_s_eff * s / s_eff + (d_eff_opacity * scene.opacities)[:, None] * factor * sig2 / (s * s_eff ** 2)
        grads.opacities = d_eff_opacity * proj.smoothing_factor
    else:
        g_scale = g_s_eff
        grads.opacities = d_eff_opacity
    grads.scales = np.where(vis[:, None], g_scale, 0.0)
    grads.mean2d = d_mean
    return grads
