"""Differentiable rasterization, soft depth compositing and the pyramid loss.

Raster images are plain float64 arrays in [0, 1]: (H, W) for coverage
masks, (H, W, 3) for color images.  The canvas is the unit square with
pixel centers at (i + 0.5) / resolution, so paths outside [0, 1]^2 simply
fall off the canvas.  Coverage is a smooth (C1) monotone ramp of the
signed distance to the flattened path: pixels farther than the prefilter
radius outside get 0, farther inside get 1, and a center exactly on the
boundary gets 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffnum as dn
from .geometry import ClosedPath, bezier_basis_matrix

_ALPHA_FLOOR = 1e-12  # keeps (1 - alpha)^w well defined at alpha == 1
_NORM_EPS = 1e-6


@dataclass(frozen=True)
class RasterConfig:
    resolution: int = 64
    prefilter_radius: float = 1.0  # pixels
    subdivisions: int = 16  # flattening density per Bezier segment
    tau: float = 0.05  # compositing temperature
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.resolution < 4:
            raise ValueError(f"resolution must be >= 4, got {self.resolution}")
        if not self.prefilter_radius > 0:
            raise ValueError("prefilter radius must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.subdivisions < 1:
            raise ValueError("subdivisions must be >= 1")
        bg = tuple(float(c) for c in self.background)
        if len(bg) != 3 or any(c < 0 or c > 1 for c in bg):
            raise ValueError(f"background must be three values in [0, 1], got {bg}")
        object.__setattr__(self, "background", bg)


@dataclass(eq=False)
class Layer:
    """One rasterized shape ready for compositing."""

    alpha: object  # (H, W) DiffArray or array
    color: object  # (3,) DiffArray or array
    depth: object  # scalar DiffArray or float; larger depth is closer to the viewer


@dataclass(eq=False)
class VectorGraphic:
    """Ordered set of closed paths with per-path depth and fill color.

    Controls, depths and colors may be DiffArrays, so a graphic can flow
    through the renderer with gradients intact.
    """

    paths: list
    depths: list
    colors: list

    def __post_init__(self):
        if not (len(self.paths) == len(self.depths) == len(self.colors)):
            raise ValueError("paths, depths and colors must have equal lengths")
        self.paths = [p if isinstance(p, ClosedPath) else ClosedPath(p) for p in self.paths]

    def __len__(self):
        return len(self.paths)

    def detached(self) -> "VectorGraphic":
        """Copy with plain numpy payloads (drops any autodiff graph)."""
        return VectorGraphic(
            [ClosedPath(p.control_values.copy()) for p in self.paths],
            [float(np.asarray(d)) for d in self.depths],
            [np.asarray(c, dtype=np.float64).copy() for c in self.colors],
        )


@lru_cache(maxsize=32)
def _pixel_centers(resolution: int) -> np.ndarray:
    grid = (np.arange(resolution) + 0.5) / resolution
    xs, ys = np.meshgrid(grid, grid)  # row i is canvas y, column j is canvas x
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _coverage(verts: dn.DiffArray, resolution: int, radius: float) -> dn.DiffArray:
    """Smooth coverage of the closed polyline ``verts`` on a square canvas."""
    v = verts.values
    nv = len(v)
    pix = _pixel_centers(resolution)
    a = v
    e = np.roll(v, -1, axis=0) - v
    ee = np.einsum("vd,vd->v", e, e)
    rel = pix[:, None, :] - a[None, :, :]
    t = np.einsum("nvd,vd->nv", rel, e)
    np.divide(t, ee, out=t, where=ee > 0)
    t[:, ee == 0] = 0.0
    np.clip(t, 0.0, 1.0, out=t)
    diff = rel - t[:, :, None] * e[None, :, :]
    dist2 = np.einsum("nvd,nvd->nv", diff, diff)
    nearest = np.argmin(dist2, axis=1)
    rows = np.arange(len(pix))
    dmin = np.sqrt(dist2[rows, nearest])

    # nonzero winding: crossing counts of horizontal rays, vectorized
    ay, by = a[:, 1], np.roll(a, -1, axis=0)[:, 1]
    px, py = pix[:, :1], pix[:, 1:]
    cross = (e[:, 0])[None, :] * (py - ay[None, :]) - (e[:, 1])[None, :] * (px - a[None, :, 0])
    up = (ay[None, :] <= py) & (by[None, :] > py) & (cross > 0)
    down = (ay[None, :] > py) & (by[None, :] <= py) & (cross < 0)
    wind = up.sum(axis=1) - down.sum(axis=1)
    sign = np.where(wind != 0, -1.0, 1.0)

    sd_px = sign * dmin * resolution
    u = np.clip(0.5 - sd_px / (2.0 * radius), 0.0, 1.0)
    alpha = u * u * (3.0 - 2.0 * u)

    t_near = t[rows, nearest]
    dir_near = diff[rows, nearest]  # points from boundary toward the pixel

    def backprop(out):
        g_u = out.grad.ravel() * 6.0 * u * (1.0 - u)
        band = g_u != 0.0
        if not band.any():
            return
        g_d = g_u[band] * (-resolution / (2.0 * radius)) * sign[band]
        d_band = dmin[band]
        safe = d_band > 1e-12
        normal = np.zeros_like(dir_near[band])
        normal[safe] = dir_near[band][safe] / d_band[safe, None]
        edge = nearest[band]
        tb = t_near[band][:, None]
        if verts.grad is None:
            verts.grad = np.zeros_like(verts.values)
        np.add.at(verts.grad, edge, -g_d[:, None] * (1.0 - tb) * normal)
        np.add.at(verts.grad, (edge + 1) % nv, -g_d[:, None] * tb * normal)

    return dn.make_op(alpha.reshape(resolution, resolution), (verts,), backprop, "coverage")


def rasterize_path(path, cfg: RasterConfig, resolution: int | None = None) -> dn.DiffArray:
    """Coverage image of one filled path, differentiable in its control points."""
    controls = path.controls if isinstance(path, ClosedPath) else path
    controls = dn.as_diff(controls)
    if controls.values.ndim != 2 or controls.shape[1] != 2 or controls.shape[0] % 3 != 0:
        raise ValueError(f"controls must be (3k, 2), got {controls.shape}")
    res = cfg.resolution if resolution is None else resolution
    k = controls.shape[0] // 3
    basis = dn.constant(bezier_basis_matrix(k, cfg.subdivisions))
    verts = dn.matmul(basis, controls)
    return _coverage(verts, res, cfg.prefilter_radius)


def _divide_by_weight(num: dn.DiffArray, den: dn.DiffArray) -> dn.DiffArray:
    """(H, W, 3) / (H, W) with the weight broadcast over channels."""

    def backprop(out):
        if num.grad is None:
            num.grad = np.zeros_like(num.values)
        num.grad += out.grad / den.values[:, :, None]
        if den.grad is None:
            den.grad = np.zeros_like(den.values)
        den.grad += -(out.grad * num.values).sum(axis=2) / (den.values * den.values)

    return dn.make_op(num.values / den.values[:, :, None], (num, den), backprop, "divide_by_weight")


def _background_image(cfg: RasterConfig, resolution: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(cfg.background), (resolution, resolution, 3)).copy()


def composite(layers, cfg: RasterConfig, resolution: int | None = None) -> dn.DiffArray:
    """Soft depth compositing of coverage layers over the background color.

    Per pixel, every layer's visibility is its own coverage attenuated by
    (1 - alpha_j)^w for every other layer j, where w is a logistic weight
    of the depth difference at temperature tau.  Larger depth wins: as tau
    shrinks the result converges to back-to-front alpha-over.  The output
    is normalized to a convex combination of layer and background colors.
    """
    res = cfg.resolution if resolution is None else resolution
    if not layers:
        return dn.constant(_background_image(cfg, res))
    alphas = [dn.as_diff(l.alpha) for l in layers]
    for al in alphas:
        if al.shape != (res, res):
            raise ValueError(f"layer resolution {al.shape} does not match {res}")
    colors = [dn.as_diff(l.color) for l in layers]
    depths = [dn.as_diff(l.depth) for l in layers]

    # canonical depth order makes the output bitwise independent of the
    # caller's layer ordering
    order = np.argsort([float(np.asarray(d)) for d in depths], kind="stable")
    alphas = [alphas[i] for i in order]
    colors = [colors[i] for i in order]
    depths = [depths[i] for i in order]

    n = len(alphas)
    log_miss = [dn.log(dn.clamp_min(a * (-1.0) + 1.0, _ALPHA_FLOOR)) for a in alphas]

    vis = []
    for i in range(n):
        shade = None
        for j in range(n):
            if j == i:
                continue
            w = dn.sigmoid((depths[j] - depths[i]) * (1.0 / cfg.tau))
            term = dn.mul(log_miss[j], w)
            shade = term if shade is None else shade + term
        occ = dn.exp(shade) if shade is not None else None
        vis.append(alphas[i] * occ if occ is not None else alphas[i])

    total_miss = log_miss[0]
    for lm in log_miss[1:]:
        total_miss = total_miss + lm
    v_bg = dn.exp(total_miss)

    num = dn.tint(v_bg, dn.constant(np.asarray(cfg.background, dtype=np.float64)))
    den = v_bg
    for v, c in zip(vis, colors):
        num = num + dn.tint(v, c)
        den = den + v
    # clamp rather than add the guard: visibilities already sum to ~1 in the
    # hard-depth limit and the output must match alpha-over to < 1e-6 there
    return _divide_by_weight(num, dn.clamp_min(den, _NORM_EPS))


def _blur_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # binomial [1, 4, 6, 4, 1] / 16 with edge-repeating reflect padding
    pad = [(0, 0)] * a.ndim
    pad[axis] = (2, 2)
    ap = np.pad(a, pad, mode="symmetric")
    sl = lambda s: tuple(slice(s, s + a.shape[axis]) if d == axis else slice(None) for d in range(a.ndim))
    return (ap[sl(0)] + 4 * ap[sl(1)] + 6 * ap[sl(2)] + 4 * ap[sl(3)] + ap[sl(4)]) / 16.0


def pyramid_level_count_ok(height: int, width: int, levels: int) -> bool:
    size = min(height, width)
    for _ in range(levels - 1):
        size = -(-size // 2)
    return size >= 2


def gaussian_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Blur-then-halve pyramid; level 0 is the input."""
    img = np.asarray(img, dtype=np.float64)
    if levels < 1:
        raise ValueError("need at least one level")
    if not pyramid_level_count_ok(img.shape[0], img.shape[1], levels):
        raise ValueError(f"{levels} levels is too deep for a {img.shape[0]}x{img.shape[1]} image")
    out = [img]
    for _ in range(levels - 1):
        blurred = _blur_axis(_blur_axis(out[-1], 0), 1)
        out.append(blurred[::2, ::2])
    return out


def level_resolution(resolution: int, level: int) -> int:
    for _ in range(level):
        resolution = -(-resolution // 2)
    return resolution


def render_graphic(graphic, cfg: RasterConfig, level: int = 0) -> dn.DiffArray:
    """Rasterize and composite every path at the level's resolution.

    Each level is re-rendered at its own resolution rather than
    downsampled, so coarse levels keep a wide gradient footprint.
    """
    res = level_resolution(cfg.resolution, level)
    layers = [
        Layer(rasterize_path(p, cfg, res), c, d)
        for p, d, c in zip(graphic.paths, graphic.depths, graphic.colors)
    ]
    return composite(layers, cfg, res)


def pyramid_loss(graphic, target: np.ndarray, levels: int, cfg: RasterConfig) -> dn.DiffArray:
    """Sum over pyramid levels of the mean-square error against the target.

    Per-level means keep the value comparable across level counts; with
    levels == 1 this is exactly the full-resolution MSE.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cfg.resolution, cfg.resolution, 3):
        raise ValueError(
            f"target must be ({cfg.resolution}, {cfg.resolution}, 3), got {target.shape}"
        )
    pyr = gaussian_pyramid(target, levels)
    loss = None
    for level, ref in enumerate(pyr):
        term = dn.reduce_mse(render_graphic(graphic, cfg, level), dn.constant(ref))
        loss = term if loss is None else loss + term
    return loss
