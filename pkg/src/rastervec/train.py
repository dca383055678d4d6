"""Optimization loops: VAE training, direct single-image vectorization,
and supervised fitting of the complexity predictor."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .geometry import ClosedPath, circle_path
from .model import ComplexityCurve, ModelConfig, VectorVAE
from .raster import (
    RasterConfig,
    VectorGraphic,
    gaussian_pyramid,
    pyramid_loss,
    render_graphic,
)


class TrainError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


class FitError(RuntimeError):
    """Curve fitting failed from every start."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    steps: int | None = None
    epochs: int | None = None
    beta: float = 1e-2  # KL weight
    levels: int = 4
    k_min: int = 7
    k_max: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.levels < 1:
            raise ValueError("learning rate, batch size and levels must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not (1 <= self.k_min <= self.k_max):
            raise ValueError(f"bad segment range [{self.k_min}, {self.k_max}]")

    def total_steps(self, dataset_size: int) -> int:
        if self.steps is not None:
            return self.steps
        if self.epochs is not None:
            return self.epochs * max(1, -(-dataset_size // self.batch_size))
        raise ValueError("config needs either steps or epochs")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(values, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; mutates values and state in place.

    Entries with a missing (None) gradient are left untouched.
    """
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        if g is None:
            continue
        buf = values[name]
        if g.shape != buf.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {buf.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(buf))
        v = state.v.setdefault(name, np.zeros_like(buf))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        buf -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam bound to a dict of DiffArray parameters.

    ``lr_scales`` maps parameter-name prefixes to learning-rate multipliers
    (colors typically move much slower than geometry).
    """

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 lr_scales: dict | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scales = dict(lr_scales or {})
        self.state = AdamState()

    def _scale(self, name: str) -> float:
        for prefix, scale in self.lr_scales.items():
            if name.startswith(prefix):
                return scale
        return 1.0

    def step(self):
        groups: dict[float, dict] = {}
        for k, p in self.params.items():
            groups.setdefault(self._scale(k), {})[k] = p
        saved_t = self.state.t
        for scale, group in groups.items():
            self.state.t = saved_t
            values = {k: p.values for k, p in group.items()}
            grads = {k: p.grad for k, p in group.items()}
            adam_step(values, grads, self.state, self.lr * scale, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        dn.zero_grads(self.params)

    def state_values(self) -> dict:
        return {"t": self.state.t, "m": dict(self.state.m), "v": dict(self.state.v)}

    def load_state_values(self, data: dict):
        self.state = AdamState(
            m={k: np.asarray(v, dtype=np.float64).copy() for k, v in data["m"].items()},
            v={k: np.asarray(v, dtype=np.float64).copy() for k, v in data["v"].items()},
            t=int(data["t"]),
        )


# ---------------------------------------------------------------------------
# VAE training
# ---------------------------------------------------------------------------


def vae_step(model: VectorVAE, batch, optimizer: Adam, tcfg: TrainConfig, rcfg: RasterConfig,
             rng: np.random.Generator, step: int = 0) -> dict:
    """One optimization step; returns the pre-update loss components.

    The segment count is drawn once per step so the decoder learns to
    serve the whole configured range.
    """
    k = int(rng.integers(tcfg.k_min, tcfg.k_max + 1))
    try:
        total = recon_total = kl_total = None
        for img in batch:
            code = model.encode(img)
            z = model.reparameterize(code, rng.standard_normal(model.cfg.latent))
            graphic = model.decode_graphic(z, k)
            recon = pyramid_loss(graphic, img, tcfg.levels, rcfg)
            kl = dn.kl_standard_normal(code.mu, code.logvar)
            term = recon + kl * tcfg.beta
            total = term if total is None else total + term
            recon_total = recon if recon_total is None else recon_total + recon
            kl_total = kl if kl_total is None else kl_total + kl
        loss = total * (1.0 / len(batch))
        if not math.isfinite(loss.item()):
            raise dn.NumericError("non-finite loss")
        optimizer.zero_grad()
        dn.backward(loss)
        optimizer.step()
    except dn.NumericError as err:
        raise TrainError(f"numeric failure at step {step}: {err}") from err
    return {
        "step": step,
        "k": k,
        "loss": loss.item(),
        "recon": recon_total.item() / len(batch),
        "kl": kl_total.item() / len(batch),
    }


def train_loop(model: VectorVAE, images, tcfg: TrainConfig, rcfg: RasterConfig, *,
               steps: int | None = None, optimizer: Adam | None = None,
               rng: np.random.Generator | None = None, start_step: int = 0,
               log_file=None, progress_every: int = 0) -> tuple[Adam, np.random.Generator, list]:
    """Run VAE steps over a dataset of (N, H, W, 3) images.

    Returns the optimizer, the generator and the per-step metric records so
    callers can checkpoint and resume deterministically.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
    total = tcfg.total_steps(len(images)) if steps is None else steps
    if optimizer is None:
        optimizer = Adam(model.trainable_params(auxiliary=False), tcfg.lr)
    if rng is None:
        rng = np.random.default_rng(tcfg.seed)
    history = []
    for step in range(start_step, total):
        idx = rng.integers(0, len(images), size=tcfg.batch_size)
        metrics = vae_step(model, images[idx], optimizer, tcfg, rcfg, rng, step)
        metrics["wall_time"] = time.time()
        history.append(metrics)
        if log_file is not None:
            log_file.write(json.dumps(metrics) + "\n")
        if progress_every and (step + 1) % progress_every == 0:
            print(f"step {step + 1}/{total}  loss {metrics['loss']:.5f}")
    return optimizer, rng, history


# ---------------------------------------------------------------------------
# direct single-image vectorization
# ---------------------------------------------------------------------------


def _initial_layout(n_paths: int, rng: np.random.Generator):
    side = math.ceil(math.sqrt(n_paths))
    cells = [((i + 0.5) / side, (j + 0.5) / side) for j in range(side) for i in range(side)]
    radius = 0.3 / side
    centers = []
    for t in range(n_paths):
        cx, cy = cells[t]
        jitter = rng.uniform(-0.25, 0.25, size=2) * radius
        centers.append((cx + jitter[0], cy + jitter[1]))
    return centers, radius


def direct_fit(target, n_paths: int, k: int, iters: int, rcfg: RasterConfig, *,
               levels: int = 4, lr: float = 0.02, lr_decay: float = 0.1, seed: int = 0,
               callback=None) -> tuple[VectorGraphic, float]:
    """Optimize control points, depths and colors directly against one image.

    Paths start as small circles on a jittered grid.  Colors are kept
    inside [0, 1] by projection after every update (a sigmoid squash would
    crawl near saturated blacks and whites).  The pyramid depth is
    annealed coarse-to-fine: wide coarse gradients find the basin early,
    and the last phase minimizes the plain full-resolution MSE, which the
    re-rendered coarse levels would otherwise bias.  Returns the iterate
    with the best full-resolution MSE and that value.
    """
    if n_paths < 1 or k < 1 or iters < 1:
        raise ValueError("need n_paths >= 1, k >= 1 and iters >= 1")
    target = np.asarray(target, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers, radius = _initial_layout(n_paths, rng)
    params = {}
    for t, center in enumerate(centers):
        params[f"controls{t}"] = dn.parameter(circle_path(center, radius, k).control_values)
        params[f"depth{t}"] = dn.parameter(np.array(0.1 * t))
        params[f"color{t}"] = dn.parameter(np.full(3, 0.25))

    def build() -> VectorGraphic:
        return VectorGraphic(
            [ClosedPath(params[f"controls{t}"]) for t in range(n_paths)],
            [params[f"depth{t}"] for t in range(n_paths)],
            [params[f"color{t}"] for t in range(n_paths)],
        )

    pyr = gaussian_pyramid(target, levels)
    opt = Adam(params, lr, lr_scales={"color": 0.1})
    best_mse = math.inf
    best = None
    for it in range(iters):
        if iters > 1:
            opt.lr = lr * lr_decay ** (it / (iters - 1))
        active = max(1, levels - (it * levels) // iters)
        graphic = build()
        terms = [
            dn.reduce_mse(render_graphic(graphic, rcfg, l), dn.constant(pyr[l]))
            for l in range(active)
        ]
        loss = terms[0]
        for term in terms[1:]:
            loss = loss + term
        mse = terms[0].item()
        if mse < best_mse:
            best_mse = mse
            best = {k_: p.values.copy() for k_, p in params.items()}
        if callback is not None:
            callback(it, mse)
        opt.zero_grad()
        dn.backward(loss)
        opt.step()
        for t in range(n_paths):
            np.clip(params[f"color{t}"].values, 0.0, 1.0, out=params[f"color{t}"].values)
    for k_, p in params.items():
        p.values[...] = best[k_]
    return build().detached(), best_mse


def overfit_decoder(model: VectorVAE, target, k: int, iters: int, *, lr: float = 2e-3,
                    levels: int = 4, rcfg: RasterConfig | None = None) -> float:
    """Fit the decoder stack to a single image from a fixed latent.

    Used to compare sampling strategies: with cfg.use_deformation off the
    control points stay uniformly spaced on the circle.  Returns the best
    loss seen.
    """
    target = np.asarray(target, dtype=np.float64)
    rcfg = rcfg or RasterConfig(resolution=target.shape[0])
    z = np.zeros(model.cfg.latent)
    names = [n for n in model.params if n.split(".")[0] in ("rnn", "deform", "dec")]
    opt = Adam({n: model.params[n] for n in names}, lr)
    best = math.inf
    for _ in range(iters):
        loss = pyramid_loss(model.decode_graphic(z, k), target, levels, rcfg)
        best = min(best, loss.item())
        opt.zero_grad()
        dn.backward(loss)
        opt.step()
    return best


# ---------------------------------------------------------------------------
# complexity measurement and curve fitting
# ---------------------------------------------------------------------------


def measure_loss_vs_segments(target, k_range, rcfg: RasterConfig, *, levels: int = 4,
                             model: VectorVAE | None = None, z=None, n_paths: int = 1,
                             iters: int = 120, seed: int = 0) -> list[tuple[int, float]]:
    """Reconstruction loss for each segment count in k_range.

    With a model and latent code, each count is a plain decode+render; in
    direct mode each count gets a short optimization run.  Values are
    measured, not modeled, so monotonicity is not guaranteed.
    """
    out = []
    for n in k_range:
        if model is not None:
            if z is None:
                raise ValueError("model mode needs a latent code z")
            loss = pyramid_loss(model.decode_graphic(z, int(n)), target, levels, rcfg).item()
        else:
            _, loss = direct_fit(
                target, n_paths, int(n), iters, rcfg, levels=levels, seed=seed
            )
        out.append((int(n), float(loss)))
    return out


@dataclass(frozen=True)
class FitResult:
    curve: ComplexityCurve
    residual_rms: float
    starts_tried: int


def _gauss_newton(ns, ys, a0: float, max_iter: int = 80):
    # linear init for (e^b, c) given the decay rate
    basis = np.exp(-a0 * ns)
    design = np.stack([basis, np.ones_like(basis)], axis=1)
    (amp, c), *_ = np.linalg.lstsq(design, ys, rcond=None)
    amp = max(float(amp), 1e-12)
    theta = np.array([a0, math.log(amp), float(c)])

    def residual(p):
        return p[2] + np.exp(p[1] - p[0] * ns) - ys

    cost = float(np.sum(residual(theta) ** 2))
    for _ in range(max_iter):
        r = residual(theta)
        e = np.exp(theta[1] - theta[0] * ns)
        jac = np.stack([-ns * e, e, np.ones_like(ns)], axis=1)
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        scale = 1.0
        improved = False
        for _ in range(25):
            trial = theta + scale * step
            if trial[0] > 1e-8:
                trial_cost = float(np.sum(residual(trial) ** 2))
                if math.isfinite(trial_cost) and trial_cost < cost:
                    theta, cost = trial, trial_cost
                    improved = True
                    break
            scale *= 0.5
        if not improved:
            break
        if float(np.abs(scale * step).max()) < 1e-14:
            break
    return theta, cost


def fit_complexity_curve(points) -> FitResult:
    """Least-squares fit of loss(N) = c + exp(b - a*N) by multi-start Gauss-Newton."""
    pts = sorted((int(n), float(y)) for n, y in points)
    ns = np.array([n for n, _ in pts], dtype=np.float64)
    ys = np.array([y for _, y in pts], dtype=np.float64)
    if len(ns) < 4 or len(set(ns.tolist())) < 4:
        raise ValueError("need at least 4 samples at distinct segment counts")
    if not np.isfinite(ys).all():
        raise FitError(f"non-finite loss samples at N = {ns[~np.isfinite(ys)].astype(int).tolist()}")
    best = None
    starts = np.logspace(math.log10(0.02), math.log10(2.0), 5)
    for a0 in starts:
        try:
            theta, cost = _gauss_newton(ns, ys, float(a0))
        except np.linalg.LinAlgError:
            continue
        if best is None or cost < best[1]:
            best = (theta, cost)
    if best is None or not math.isfinite(best[1]):
        raise FitError(
            f"all {len(starts)} starts diverged on {len(ns)} points "
            f"(loss range {ys.min():.3g}..{ys.max():.3g})"
        )
    theta, cost = best
    curve = ComplexityCurve(float(theta[0]), float(theta[1]), max(float(theta[2]), 0.0))
    return FitResult(curve, math.sqrt(cost / len(ns)), len(starts))


def train_auxiliary(model: VectorVAE, images, rcfg: RasterConfig, *, levels: int = 4,
                    iters: int = 400, lr: float = 1e-2, k_range=None,
                    seed: int = 0) -> list[float]:
    """Fit the complexity head on curves measured from the frozen main model.

    For each image: encode deterministically, measure loss versus segment
    count, fit the trade-off curve, then regress (a, b, c) from each path
    latent.  Only aux.* parameters are updated.
    """
    cfg = model.cfg
    k_range = range(cfg.k_min, cfg.k_max + 1) if k_range is None else k_range
    samples = []
    for img in images:
        code = model.encode(img)
        z = model.reparameterize(code, np.zeros(cfg.latent))
        losses = measure_loss_vs_segments(
            img, k_range, rcfg, levels=levels, model=model, z=z
        )
        fit = fit_complexity_curve(losses)
        target = np.array([fit.curve.a, fit.curve.b, fit.curve.c])
        for pl in model.unroll_paths(z):
            samples.append((np.asarray(pl.z_t).copy(), target))
    opt = Adam(model.trainable_params(auxiliary=True), lr)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(iters):
        order = rng.permutation(len(samples))
        total = None
        for i in order:
            z_t, target = samples[i]
            pred = model.predict_complexity_node(dn.constant(z_t))
            term = dn.reduce_mse(pred, dn.constant(target))
            total = term if total is None else total + term
        loss = total * (1.0 / len(samples))
        history.append(loss.item())
        opt.zero_grad()
        dn.backward(loss)
        opt.step()
    return history
