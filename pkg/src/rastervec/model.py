"""Networks mapping images to vector graphics.

A convolutional variational encoder produces a global latent code; a
bidirectional LSTM unrolls it into per-path latents with depths (and
optionally colors); each path latent is decoded into a closed Bezier loop
by circular 1-d convolutions over samples of the unit circle, preceded by
a learned angular redistribution of those samples.  A small
fully-connected head predicts, per path, the parameters of the
loss-versus-segment-count trade-off curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .geometry import ClosedPath
from .raster import VectorGraphic, level_resolution


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    latent: int = 128
    path_latent: int = 167
    encoder_filters: tuple = (32, 64, 128, 256, 512)
    decoder_chain: tuple = (170, 340, 340, 340, 340, 340, 2)
    deformation_chain: tuple = (170, 340, 340, 1)
    auxiliary_chain: tuple = (167, 256, 256, 256, 3)
    lstm_hidden: int = 256
    max_paths: int = 1
    k_min: int = 7
    k_max: int = 25
    color_mode: str = "mono"
    use_deformation: bool = True

    def __post_init__(self):
        fused = self.path_latent + 3  # x, y, on-curve flag
        if self.decoder_chain[0] != fused or self.decoder_chain[-1] != 2:
            raise ValueError(f"decoder chain must run {fused} -> ... -> 2, got {self.decoder_chain}")
        if self.deformation_chain[0] != fused or self.deformation_chain[-1] != 1:
            raise ValueError(
                f"deformation chain must run {fused} -> ... -> 1, got {self.deformation_chain}"
            )
        if self.auxiliary_chain[0] != self.path_latent or self.auxiliary_chain[-1] != 3:
            raise ValueError(
                f"auxiliary chain must run {self.path_latent} -> ... -> 3, got {self.auxiliary_chain}"
            )
        if self.color_mode not in ("mono", "learned"):
            raise ValueError(f"color_mode must be 'mono' or 'learned', got {self.color_mode!r}")
        if not (1 <= self.k_min <= self.k_max):
            raise ValueError(f"bad segment range [{self.k_min}, {self.k_max}]")
        if self.max_paths < 1:
            raise ValueError("max_paths must be >= 1")
        if level_resolution(self.resolution, len(self.encoder_filters) - 1) < 2:
            raise ValueError(
                f"{len(self.encoder_filters)} encoder blocks are too deep for "
                f"resolution {self.resolution}"
            )

    @property
    def encoder_spatial(self) -> int:
        return level_resolution(self.resolution, len(self.encoder_filters))

    @property
    def head_width(self) -> int:
        return self.path_latent + 1 + (3 if self.color_mode == "learned" else 0)


@dataclass(eq=False)
class LatentCode:
    mu: dn.DiffArray
    logvar: dn.DiffArray


@dataclass(eq=False)
class PathLatent:
    z_t: dn.DiffArray  # (path_latent,)
    depth: dn.DiffArray  # scalar, unbounded
    color: dn.DiffArray | None  # (3,) in (0, 1) when color_mode == "learned"


@dataclass(frozen=True)
class ComplexityCurve:
    """Parameters of loss(N) = c + exp(b - a*N)."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b) and math.isfinite(self.c)):
            raise ValueError("curve parameters must be finite")
        if self.a <= 0:
            raise ValueError(f"decay rate a must be positive, got {self.a}")
        if self.c < 0:
            raise ValueError(f"asymptotic loss c must be >= 0, got {self.c}")

    def loss_at(self, n) -> np.ndarray:
        return self.c + np.exp(self.b - self.a * np.asarray(n, dtype=np.float64))

    def slope_magnitude_at(self, n) -> np.ndarray:
        return self.a * np.exp(self.b - self.a * np.asarray(n, dtype=np.float64))


def select_segment_count(curve: ComplexityCurve, k_thr: float, k_min: int = 7, k_max: int = 25) -> int:
    """Smallest N with |d loss / dN| <= k_thr, clamped into [k_min, k_max].

    Solving a*exp(b - a*N) <= k_thr for N gives N >= (ln(a/k_thr) + b) / a;
    round up, then clamp.
    """
    if curve.a <= 0 or k_thr <= 0:
        raise ValueError("need a > 0 and k_thr > 0")
    n_star = (math.log(curve.a / k_thr) + curve.b) / curve.a
    return int(min(max(math.ceil(n_star), k_min), k_max))


def discard_degenerate(graphic: VectorGraphic, eps: float = 1e-3) -> VectorGraphic:
    """Drop paths whose control bounding-box diagonal is below eps."""
    keep = []
    for i, path in enumerate(graphic.paths):
        pts = path.control_values
        span = pts.max(axis=0) - pts.min(axis=0)
        if math.hypot(span[0], span[1]) >= eps:
            keep.append(i)
    return VectorGraphic(
        [graphic.paths[i] for i in keep],
        [graphic.depths[i] for i in keep],
        [graphic.colors[i] for i in keep],
    )


def _uniform_angles(k: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(3 * k) / (3 * k)


def _oncurve_flags(k: int) -> np.ndarray:
    flags = np.zeros((1, 3 * k))
    flags[0, ::3] = 1.0
    return flags


class VectorVAE:
    """The image-to-vector-graphic model; parameters live in a flat name map."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, dn.DiffArray] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def _add(self, name: str, rng, shape, fan_in: int | None = None, value=None):
        if value is not None:
            buf = np.asarray(value, dtype=np.float64)
        elif fan_in is None:
            buf = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            buf = rng.uniform(-bound, bound, size=shape)
        self.params[name] = dn.parameter(buf)

    def _init_params(self, rng):
        cfg = self.cfg
        c_in = 3
        for i, c_out in enumerate(cfg.encoder_filters):
            pre = f"enc.block{i}"
            self._add(f"{pre}.conv1.w", rng, (c_out, c_in, 3, 3), fan_in=9 * c_in)
            self._add(f"{pre}.conv1.b", rng, (c_out,))
            self._add(f"{pre}.conv2.w", rng, (c_out, c_out, 3, 3), fan_in=9 * c_out)
            self._add(f"{pre}.conv2.b", rng, (c_out,))
            self._add(f"{pre}.skip.w", rng, (c_in, c_out), fan_in=c_in)
            self._add(f"{pre}.skip.b", rng, (c_out,))
            c_in = c_out
        flat = cfg.encoder_filters[-1] * cfg.encoder_spatial**2
        self._add("enc.mu.w", rng, (flat, cfg.latent), fan_in=flat)
        self._add("enc.mu.b", rng, (cfg.latent,))
        self._add("enc.logvar.w", rng, (flat, cfg.latent), fan_in=flat)
        # start with small posterior variance so early reconstructions are stable
        self._add("enc.logvar.b", rng, None, value=np.full(cfg.latent, -3.0))

        h = cfg.lstm_hidden
        for d in ("f", "b"):
            self._add(f"rnn.wx_{d}", rng, (cfg.latent, 4 * h), fan_in=cfg.latent)
            self._add(f"rnn.wh_{d}", rng, (h, 4 * h), fan_in=h)
            self._add(f"rnn.b_{d}", rng, (4 * h,))
        self._add("rnn.head.w", rng, (2 * h, cfg.head_width), fan_in=2 * h)
        self._add("rnn.head.b", rng, (cfg.head_width,))
        self._add("rnn.depth_offset", rng, None, value=0.1 * np.arange(cfg.max_paths))

        for name, chain in (("deform", cfg.deformation_chain), ("dec", cfg.decoder_chain)):
            for i in range(len(chain) - 1):
                self._add(f"{name}.conv{i}.w", rng, (chain[i + 1], chain[i], 3), fan_in=3 * chain[i])
                self._add(f"{name}.conv{i}.b", rng, (chain[i + 1],))

        chain = cfg.auxiliary_chain
        for i in range(len(chain) - 1):
            self._add(f"aux.fc{i}.w", rng, (chain[i], chain[i + 1]), fan_in=chain[i])
            self._add(f"aux.fc{i}.b", rng, (chain[i + 1],))

    def parameter_values(self) -> dict[str, np.ndarray]:
        return {k: v.values for k, v in self.params.items()}

    def load_parameter_values(self, values: dict[str, np.ndarray]):
        if set(values) != set(self.params):
            missing = set(self.params) ^ set(values)
            raise ValueError(f"parameter names do not match the config: {sorted(missing)[:4]}")
        for k, v in values.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].values.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {self.params[k].values.shape}")
            self.params[k].values[...] = arr

    def trainable_params(self, auxiliary: bool = False) -> dict[str, dn.DiffArray]:
        return {
            k: v for k, v in self.params.items() if k.startswith("aux.") == auxiliary
        }

    # ------------------------------------------------------------------
    # encoder
    # ------------------------------------------------------------------

    def encode(self, image) -> LatentCode:
        """Residual downsampling stack, then parallel mean/log-variance heads."""
        cfg = self.cfg
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (cfg.resolution, cfg.resolution, 3):
            raise ValueError(
                f"expected a ({cfg.resolution}, {cfg.resolution}, 3) image, got {img.shape}"
            )
        x = dn.constant(np.moveaxis(img, 2, 0).copy())
        p = self.params
        for i in range(len(cfg.encoder_filters)):
            pre = f"enc.block{i}"
            main = dn.relu(dn.conv2d_down(x, p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"]))
            main = dn.conv2d_same(main, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"])
            sub = dn.subsample2(x)
            c, hh, ww = sub.shape
            flat = dn.transpose2d(dn.reshape(sub, (c, hh * ww)))
            skip = dn.fully_connected(flat, p[f"{pre}.skip.w"], p[f"{pre}.skip.b"])
            skip = dn.reshape(dn.transpose2d(skip), main.shape)
            x = dn.relu(main + skip)
        flat = dn.reshape(x, (1, x.size))
        mu = dn.reshape(dn.fully_connected(flat, p["enc.mu.w"], p["enc.mu.b"]), (cfg.latent,))
        logvar = dn.reshape(
            dn.fully_connected(flat, p["enc.logvar.w"], p["enc.logvar.b"]), (cfg.latent,)
        )
        return LatentCode(mu, logvar)

    @staticmethod
    def reparameterize(code: LatentCode, noise) -> dn.DiffArray:
        """z = mu + exp(logvar / 2) * noise."""
        noise = dn.constant(np.asarray(noise, dtype=np.float64))
        if noise.shape != code.mu.shape:
            raise ValueError(f"noise shape {noise.shape} does not match {code.mu.shape}")
        return code.mu + dn.exp(code.logvar * 0.5) * noise

    # ------------------------------------------------------------------
    # recurrent unroller
    # ------------------------------------------------------------------

    def unroll_paths(self, z, count: int | None = None) -> list[PathLatent]:
        """Feed z at every step of the bidirectional LSTM; map states to paths."""
        cfg = self.cfg
        count = cfg.max_paths if count is None else count
        if not (1 <= count <= cfg.max_paths):
            raise ValueError(f"path count must lie in [1, {cfg.max_paths}], got {count}")
        z = dn.as_diff(z)
        step_in = dn.reshape(z, (1, cfg.latent))
        p = self.params
        lstm = {k: p[f"rnn.{k}"] for k in ("wx_f", "wh_f", "b_f", "wx_b", "wh_b", "b_b")}
        states = dn.lstm_bidirectional([step_in] * count, lstm, cfg.lstm_hidden)
        out = []
        dp = cfg.path_latent
        for t, h in enumerate(states):
            head = dn.fully_connected(h, p["rnn.head.w"], p["rnn.head.b"])
            z_t = dn.reshape(dn.slice_axis(head, 1, 0, dp), (dp,))
            depth = dn.reshape(dn.slice_axis(head, 1, dp, dp + 1), ())
            depth = depth + dn.reshape(dn.slice_axis(p["rnn.depth_offset"], 0, t, t + 1), ())
            color = None
            if cfg.color_mode == "learned":
                color = dn.reshape(dn.sigmoid(dn.slice_axis(head, 1, dp + 1, dp + 4)), (3,))
            out.append(PathLatent(z_t, depth, color))
        return out

    # ------------------------------------------------------------------
    # path decoding
    # ------------------------------------------------------------------

    def _fused_buffer(self, z_t, k: int, offsets=None) -> dn.DiffArray:
        """Cyclic buffer of fused latent vectors: rows [x; y; flag; z_t].

        Sample i sits at angle 2*pi*i/(3k) plus its offset, always on the
        unit circle; the flag row marks on-curve samples (index = 0 mod 3).
        """
        n = 3 * k
        base = dn.constant(_uniform_angles(k))
        theta = base + offsets if offsets is not None else base
        pos = dn.concat(
            [dn.reshape(dn.cos(theta), (1, n)), dn.reshape(dn.sin(theta), (1, n))], axis=0
        )
        flags = dn.constant(_oncurve_flags(k))
        return dn.concat([pos, flags, dn.repeat_vector(z_t, n)], axis=0)

    def _conv_chain(self, buffer, prefix: str, n_layers: int) -> dn.DiffArray:
        x = buffer
        for i in range(n_layers):
            x = dn.conv1d_circular(x, self.params[f"{prefix}.conv{i}.w"], self.params[f"{prefix}.conv{i}.b"])
            if i < n_layers - 1:
                x = dn.relu(x)
        return x

    def deform_samples(self, z_t, k: int) -> dn.DiffArray:
        """Angular offsets redistributing control-point density along the circle.

        tanh bounds each offset to half the uniform spacing, which both
        respects |offset| < 2*pi/(3k) and guarantees the deformed angles
        stay strictly increasing (no sample reordering).
        """
        self._check_k(k)
        raw = self._conv_chain(self._fused_buffer(z_t, k), "deform", len(self.cfg.deformation_chain) - 1)
        bound = math.pi / (3 * k)
        return dn.reshape(dn.tanh(raw), (3 * k,)) * bound

    def decode_buffer(self, buffer) -> dn.DiffArray:
        """Apply the circular decoder chain to a fused buffer -> (3k, 2) controls."""
        raw = self._conv_chain(buffer, "dec", len(self.cfg.decoder_chain) - 1)
        return dn.transpose2d(dn.sigmoid(raw))

    def decode_path(self, z_t, k: int, offsets=None) -> dn.DiffArray:
        """Decode one closed path; every control lands strictly inside (0, 1)^2."""
        self._check_k(k)
        return self.decode_buffer(self._fused_buffer(z_t, k, offsets))

    def _check_k(self, k: int):
        if not (self.cfg.k_min <= k <= self.cfg.k_max):
            raise ValueError(f"k={k} outside configured range [{self.cfg.k_min}, {self.cfg.k_max}]")

    def decode_graphic(self, z, k: int, count: int | None = None, eps: float = 1e-3) -> VectorGraphic:
        """Unroll, deform, decode and prune degenerate paths."""
        paths, depths, colors = [], [], []
        for pl in self.unroll_paths(z, count):
            offsets = self.deform_samples(pl.z_t, k) if self.cfg.use_deformation else None
            controls = self.decode_path(pl.z_t, k, offsets)
            paths.append(ClosedPath(controls))
            depths.append(pl.depth)
            colors.append(pl.color if pl.color is not None else np.zeros(3))
        return discard_degenerate(VectorGraphic(paths, depths, colors), eps)

    def reconstruct(self, image, k: int, count: int | None = None) -> VectorGraphic:
        """Deterministic reconstruction: encode with zero noise, then decode."""
        code = self.encode(image)
        z = self.reparameterize(code, np.zeros(self.cfg.latent))
        return self.decode_graphic(z, k, count)

    # ------------------------------------------------------------------
    # complexity predictor
    # ------------------------------------------------------------------

    def predict_complexity_node(self, z_t) -> dn.DiffArray:
        """(a, b, c) with softplus keeping a and c positive; b unconstrained."""
        x = dn.reshape(dn.as_diff(z_t), (1, self.cfg.path_latent))
        n = len(self.cfg.auxiliary_chain) - 1
        for i in range(n):
            x = dn.fully_connected(x, self.params[f"aux.fc{i}.w"], self.params[f"aux.fc{i}.b"])
            if i < n - 1:
                x = dn.relu(x)
        a = dn.softplus(dn.slice_axis(x, 1, 0, 1))
        b = dn.slice_axis(x, 1, 1, 2)
        c = dn.softplus(dn.slice_axis(x, 1, 2, 3))
        return dn.reshape(dn.concat([a, b, c], axis=1), (3,))

    def predict_complexity(self, z_t) -> ComplexityCurve:
        a, b, c = np.asarray(self.predict_complexity_node(z_t))
        return ComplexityCurve(float(a), float(b), float(c))
