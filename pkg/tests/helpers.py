"""Shared oracle helpers, kept independent of the library code they check."""

from __future__ import annotations

import numpy as np


def de_casteljau(points, u):
    """Recursive lerp evaluation of a Bezier curve of any degree."""
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    while len(pts) > 1:
        pts = [(1.0 - u) * p + u * q for p, q in zip(pts[:-1], pts[1:])]
    return pts[0]


def point_segment_distance(q, a, b):
    q, a, b = (np.asarray(p, dtype=np.float64) for p in (q, a, b))
    e = b - a
    denom = float(e @ e)
    t = 0.0 if denom == 0.0 else float((q - a) @ e) / denom
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(q - (a + t * e)))


def brute_force_chamfer(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    total = 0.0
    for p in x:
        total += min(float(np.sum((p - q) ** 2)) for q in y)
    for q in y:
        total += min(float(np.sum((q - p) ** 2)) for p in x)
    return total


def central_difference(f, x, h=1e-6):
    """Elementwise central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def spearman(xs, ys):
    """Spearman rank correlation, enough for monotonic-trend checks."""

    def ranks(v):
        order = np.argsort(v)
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=np.float64)
        return r

    rx, ry = ranks(np.asarray(xs)), ranks(np.asarray(ys))
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


def check_grads(build, arrays, h=1e-6, rtol=1e-6, atol=1e-9):
    """Compare reverse-mode gradients of build(*arrays) against central FD."""
    from rastervec import diffnum as dn

    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    params = [dn.parameter(a.copy()) for a in arrays]
    loss = build(*params)
    dn.backward(loss)
    for i in range(len(arrays)):

        def f(x, i=i):
            ps = [dn.parameter(a.copy()) for a in arrays]
            ps[i] = dn.parameter(x)
            return float(np.asarray(build(*ps)))

        fd = central_difference(f, arrays[i].copy(), h)
        got = params[i].grad if params[i].grad is not None else np.zeros_like(fd)
        np.testing.assert_allclose(got, fd, rtol=rtol, atol=atol)


def hard_composite(alphas, colors, depths, background):
    """Painter's-algorithm oracle: sort by depth, alpha-over back to front."""
    res = alphas[0].shape
    out = np.broadcast_to(np.asarray(background, dtype=np.float64), (*res, 3)).copy()
    for i in np.argsort(depths):
        a = alphas[i][:, :, None]
        out = a * np.asarray(colors[i]) + (1.0 - a) * out
    return out


def dense_binomial_blur(img):
    """Direct 5x5 binomial convolution with edge-repeating reflect padding."""
    k1 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    kernel = np.outer(k1, k1)
    pad = [(2, 2), (2, 2)] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img, pad, mode="symmetric")
    out = np.zeros_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            win = padded[i : i + 5, j : j + 5]
            out[i, j] = np.tensordot(kernel, win, axes=([0, 1], [0, 1]))
    return out


def random_blob_path(rng, k=5, center=None, radius=None):
    """Smooth star-convex blob: low-frequency radial modulation of a circle.

    Keeps shapes fat and gently curved so prefilter bands stay clear of the
    medial axis, which keeps finite differences of the rasterizer honest.
    """
    from rastervec.geometry import ClosedPath, circle_path

    center = rng.uniform(0.3, 0.7, size=2) if center is None else np.asarray(center)
    radius = rng.uniform(0.12, 0.28) if radius is None else radius
    base = circle_path(center, radius, k).control_values
    rel = base - center
    theta = np.arctan2(rel[:, 1], rel[:, 0])
    a1, a2 = rng.uniform(-0.15, 0.15, size=2)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    scale = 1.0 + a1 * np.cos(theta + p1) + a2 * np.cos(2 * theta + p2)
    return ClosedPath(center + rel * scale[:, None])


def random_graphic(rng, n_paths=3, k=5, depth_spread=0.3):
    from rastervec.raster import VectorGraphic

    paths = [random_blob_path(rng, k) for _ in range(n_paths)]
    depths = [float(t * depth_spread + rng.uniform(0, 0.05)) for t in range(n_paths)]
    colors = [rng.uniform(0.1, 0.9, size=3) for _ in range(n_paths)]
    return VectorGraphic(paths, depths, colors)


def model_fd_check(model, loss_fn, names, h=1e-6, rtol=1e-4, atol=1e-8, sample=None, rng=None):
    """FD-check model parameter gradients of a rebuildable scalar loss.

    loss_fn() must rebuild the forward graph from model.params each call.
    ``sample`` limits the check to that many random coordinates per block.
    """
    from rastervec import diffnum as dn

    dn.zero_grads(model.params)
    loss = loss_fn()
    dn.backward(loss)
    grads = {
        k: (model.params[k].grad.copy() if model.params[k].grad is not None
            else np.zeros_like(model.params[k].values))
        for k in names
    }
    dn.zero_grads(model.params)
    for name in names:
        flat = model.params[name].values.reshape(-1)
        gflat = grads[name].reshape(-1)
        if sample is None or flat.size <= sample:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.asarray(loss_fn()))
            flat[i] = orig - h
            fm = float(np.asarray(loss_fn()))
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            np.testing.assert_allclose(
                gflat[i], fd, rtol=rtol, atol=atol,
                err_msg=f"gradient mismatch at {name}[{i}]",
            )


def scan_segment_count(a, b, k_thr, k_min=7, k_max=25):
    """Integer-scan oracle: first N in range whose loss slope is below k_thr."""
    import math

    for n in range(k_min, k_max + 1):
        if a * math.exp(b - a * n) <= k_thr:
            return n
    return k_max
