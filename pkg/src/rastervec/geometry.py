"""Exact 2D geometry for closed cubic Bezier paths.

Paths are loops of k cubic segments stored as 3k control points; the
closing point is implied by wrap-around, never stored.  Everything here
is a pure function of numpy arrays, so it is safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _as_points(a, name: str) -> np.ndarray:
    pts = np.asarray(a, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"{name} must be an (n, 2) array, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


@dataclass(frozen=True, eq=False)
class ClosedPath:
    """A closed loop of k cubic Bezier segments, stored as 3k control points.

    Control index 3s is the on-curve start of segment s; 3s+1 and 3s+2 are
    its handles; the end point is control 3(s+1) mod 3k.  ``controls`` may
    be any (3k, 2) array-like, including a differentiable array, as long as
    ``np.asarray`` can read the current values out of it.
    """

    controls: object

    def __post_init__(self):
        pts = _as_points(self.controls, "controls")
        if len(pts) < 3 or len(pts) % 3 != 0:
            raise ValueError(f"need 3k control points with k >= 1, got {len(pts)}")

    @property
    def num_segments(self) -> int:
        return len(np.asarray(self.controls)) // 3

    @property
    def control_values(self) -> np.ndarray:
        return np.asarray(self.controls, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Polyline:
    """Implicitly closed polygon.  A single vertex is a degenerate point loop."""

    vertices: np.ndarray = field()

    def __post_init__(self):
        object.__setattr__(self, "vertices", _as_points(self.vertices, "vertices"))
        if len(self.vertices) < 1:
            raise ValueError("polyline needs at least one vertex")


def circle_samples(k: int, offsets=None) -> np.ndarray:
    """3k points on the unit circle at angles 2*pi*i/(3k) + offsets[i]."""
    if k < 1:
        raise ValueError(f"segment count must be >= 1, got {k}")
    n = 3 * k
    theta = 2.0 * np.pi * np.arange(n) / n
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (n,):
            raise ValueError(f"expected {n} offsets, got shape {offsets.shape}")
        if not np.isfinite(offsets).all():
            raise ValueError("offsets contain non-finite values")
        theta = theta + offsets
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


_BEZIER = np.array(
    [[1.0, 0.0, 0.0, 0.0], [-3.0, 3.0, 0.0, 0.0], [3.0, -6.0, 3.0, 0.0], [-1.0, 3.0, -3.0, 1.0]]
)


def _segment_points(controls: np.ndarray, s: int) -> np.ndarray:
    n = len(controls)
    idx = [3 * s, 3 * s + 1, 3 * s + 2, (3 * s + 3) % n]
    return controls[idx]


def _eval_segment(seg: np.ndarray, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    powers = np.stack([np.ones_like(u), u, u * u, u * u * u], axis=-1)
    return powers @ _BEZIER @ seg


def eval_path(path: ClosedPath, t: float) -> np.ndarray:
    """Evaluate the path at global parameter t in [0, 1)."""
    if not (0.0 <= t < 1.0) or not math.isfinite(t):
        raise ValueError(f"parameter must lie in [0, 1), got {t}")
    controls = path.control_values
    k = len(controls) // 3
    x = t * k
    s = min(int(x), k - 1)
    return _eval_segment(_segment_points(controls, s), x - s)


def eval_path_many(path: ClosedPath, ts: np.ndarray) -> np.ndarray:
    """Vectorized eval_path over an array of parameters in [0, 1)."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.size and (ts.min() < 0.0 or ts.max() >= 1.0):
        raise ValueError("parameters must lie in [0, 1)")
    controls = path.control_values
    k = len(controls) // 3
    x = ts * k
    seg = np.minimum(x.astype(int), k - 1)
    u = x - seg
    out = np.empty((len(ts), 2))
    for s in range(k):
        mask = seg == s
        if mask.any():
            out[mask] = _eval_segment(_segment_points(controls, s), u[mask])
    return out


def bezier_basis_matrix(k: int, subdivisions: int) -> np.ndarray:
    """(k*subdivisions, 3k) matrix mapping control points to flattened vertices.

    Row s*subdivisions + j holds the Bernstein weights of local parameter
    j/subdivisions on segment s.  Flattening is then a plain matmul, which
    keeps it linear (hence smooth) in the control points.
    """
    if k < 1 or subdivisions < 1:
        raise ValueError("need k >= 1 and subdivisions >= 1")
    n = 3 * k
    u = np.arange(subdivisions) / subdivisions
    powers = np.stack([np.ones_like(u), u, u * u, u**3], axis=1)
    weights = powers @ _BEZIER  # (subdivisions, 4)
    mat = np.zeros((k * subdivisions, n))
    for s in range(k):
        rows = slice(s * subdivisions, (s + 1) * subdivisions)
        # columns can repeat when k == 1 (wrap hits the start point), so
        # accumulate one column at a time
        for ci, col in enumerate((3 * s, 3 * s + 1, 3 * s + 2, (3 * s + 3) % n)):
            mat[rows, col] += weights[:, ci]
    return mat


def flatten(path: ClosedPath, subdivisions_per_segment: int = 16) -> Polyline:
    """Flatten to a closed polyline with a fixed vertex count per segment."""
    if subdivisions_per_segment < 1:
        raise ValueError("subdivisions must be >= 1")
    controls = path.control_values
    k = len(controls) // 3
    mat = bezier_basis_matrix(k, subdivisions_per_segment)
    return Polyline(mat @ controls)


def winding_number(poly: Polyline, q) -> int:
    """Signed crossing count of the closed polyline around q (nonzero rule).

    A CCW simple loop containing q yields +1.  Points exactly on an edge
    are unspecified (callers that care use signed_distance instead).
    """
    q = np.asarray(q, dtype=np.float64)
    a = poly.vertices
    b = np.roll(a, -1, axis=0)
    cross = (b[:, 0] - a[:, 0]) * (q[1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (q[0] - a[:, 0])
    up = (a[:, 1] <= q[1]) & (b[:, 1] > q[1]) & (cross > 0)
    down = (a[:, 1] > q[1]) & (b[:, 1] <= q[1]) & (cross < 0)
    return int(up.sum()) - int(down.sum())


def _edge_distances(vertices: np.ndarray, q: np.ndarray) -> np.ndarray:
    a = vertices
    b = np.roll(a, -1, axis=0)
    e = b - a
    d = q[None, :] - a
    denom = np.einsum("ij,ij->i", e, e)
    t = np.divide(
        np.einsum("ij,ij->i", d, e), denom, out=np.zeros_like(denom), where=denom > 0
    )
    t = np.clip(t, 0.0, 1.0)
    nearest = a + t[:, None] * e
    return np.hypot(q[0] - nearest[:, 0], q[1] - nearest[:, 1])


def signed_distance(poly: Polyline, q) -> float:
    """Distance from q to the polyline boundary, negative inside (nonzero rule)."""
    q = np.asarray(q, dtype=np.float64)
    dist = float(_edge_distances(poly.vertices, q).min())
    return -dist if winding_number(poly, q) != 0 else dist


def sample_boundary(path: ClosedPath, n: int) -> np.ndarray:
    """n points uniformly spaced in path parameter: eval at i/n, i in 0..n-1."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    return eval_path_many(path, np.arange(n) / n)


def chamfer_distance(x, y) -> float:
    """Symmetric sum of squared nearest-neighbor distances between point sets."""
    x = _as_points(x, "x")
    y = _as_points(y, "y")
    if len(x) == 0 or len(y) == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    d2 = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
    return float(d2.min(axis=1).sum() + d2.min(axis=0).sum())


# Handle length for a cubic approximating a circular arc of angle phi.
def _arc_handle(phi: float) -> float:
    return (4.0 / 3.0) * math.tan(phi / 4.0)


def circle_path(center, radius: float, k: int) -> ClosedPath:
    """k-segment cubic approximation of a circle (handles tangent to the arc)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cx, cy = float(center[0]), float(center[1])
    phi = 2.0 * math.pi / k
    h = _arc_handle(phi)
    controls = np.empty((3 * k, 2))
    for s in range(k):
        a0 = s * phi
        on = np.array([math.cos(a0), math.sin(a0)])
        tangent = np.array([-math.sin(a0), math.cos(a0)])
        a1 = (s + 1) * phi
        on_next = np.array([math.cos(a1), math.sin(a1)])
        tangent_next = np.array([-math.sin(a1), math.cos(a1)])
        controls[3 * s] = on
        controls[3 * s + 1] = on + h * tangent
        controls[3 * s + 2] = on_next - h * tangent_next
    controls = controls * radius + np.array([cx, cy])
    return ClosedPath(controls)
