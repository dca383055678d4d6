"""Quantitative evaluation: pixel reconstruction error, Chamfer geometry
error, generation/interpolation quality, and latent-space interpolation.

All pixel metrics are per-pixel means, so values are comparable across
resolutions; reports record that convention in their header line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .geometry import chamfer_distance, sample_boundary
from .raster import VectorGraphic

PIXEL_METRIC_NORMALIZATION = "per-pixel mean"


def recon_error(output, target) -> float:
    """Mean squared error over pixels and channels."""
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch: {output.shape} vs {target.shape}")
    return float(np.mean((output - target) ** 2))


def pooled_boundary_samples(graphic: VectorGraphic, n: int) -> np.ndarray:
    if len(graphic) == 0:
        raise ValueError("graphic has no paths to sample")
    return np.concatenate([sample_boundary(p, n) for p in graphic.paths], axis=0)


def chamfer_recon(graphic: VectorGraphic, reference: VectorGraphic, n: int = 100) -> float:
    """Chamfer distance between pooled boundary samples of two graphics."""
    return chamfer_distance(
        pooled_boundary_samples(graphic, n), pooled_boundary_samples(reference, n)
    )


def generation_quality(generated, dataset) -> tuple[float, list[float]]:
    """Mean over generated images of the closest dataset image's MSE.

    Returns the aggregate and the per-generated-sample minima.
    """
    generated = [np.asarray(img, dtype=np.float64) for img in generated]
    dataset = [np.asarray(img, dtype=np.float64) for img in dataset]
    if not generated or not dataset:
        raise ValueError("generated and dataset sets must both be non-empty")
    shape = dataset[0].shape
    for img in list(generated) + list(dataset):
        if img.shape != shape:
            raise ValueError(f"resolution mismatch: {img.shape} vs {shape}")
    stack = np.stack(dataset)
    per_sample = []
    for img in generated:
        diffs = stack - img[None]
        per_sample.append(float(np.min(np.mean(diffs * diffs, axis=(1, 2, 3) if img.ndim == 3 else (1, 2)))))
    return float(np.mean(per_sample)), per_sample


def interpolate(model, z_a, z_b, steps: int, k: int, count: int | None = None) -> list[VectorGraphic]:
    """Decode evenly spaced latents between z_a and z_b (endpoints included)."""
    if steps < 2:
        raise ValueError("need at least 2 interpolation steps")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    out = []
    for i in range(steps):
        s = i / (steps - 1)
        out.append(model.decode_graphic((1.0 - s) * z_a + s * z_b, k, count))
    return out


def sample_latents(n: int, seed: int, dim: int = 128) -> np.ndarray:
    """Reproducible standard-normal latent draws."""
    if n < 1:
        raise ValueError("need n >= 1 draws")
    return np.random.default_rng(seed).standard_normal((n, dim))


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class EvalReport:
    metric: str
    dataset: str
    config_hash: str
    per_sample: tuple

    def __post_init__(self):
        object.__setattr__(self, "per_sample", tuple(float(v) for v in self.per_sample))
        if not self.per_sample:
            raise ValueError("report needs at least one sample value")

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.per_sample))

    def to_lines(self) -> list[str]:
        head = {
            "kind": "header",
            "metric": self.metric,
            "dataset": self.dataset,
            "config_hash": self.config_hash,
            "normalization": PIXEL_METRIC_NORMALIZATION,
            "count": len(self.per_sample),
        }
        lines = [json.dumps(head)]
        lines += [
            json.dumps({"kind": "sample", "index": i, "value": v})
            for i, v in enumerate(self.per_sample)
        ]
        lines.append(json.dumps({"kind": "aggregate", "value": self.aggregate}))
        return lines

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def read(cls, path) -> "EvalReport":
        records = [json.loads(line) for line in open(path) if line.strip()]
        head = records[0]
        if head.get("kind") != "header":
            raise ValueError(f"{path} does not start with a report header")
        samples = [r["value"] for r in records if r.get("kind") == "sample"]
        report = cls(head["metric"], head["dataset"], head["config_hash"], tuple(samples))
        tail = records[-1]
        if tail.get("kind") == "aggregate" and abs(tail["value"] - report.aggregate) > 1e-12:
            raise ValueError("aggregate record does not match the mean of the samples")
        return report
