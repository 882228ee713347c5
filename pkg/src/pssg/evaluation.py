"""Surrogate evaluation metrics and the batch evaluation protocol.

The official metric codebases are out of scope; the report uses documented
surrogates: windowed structural similarity, random-feature perceptual
distance, and the embedding identity loss. Columns are labeled as surrogates
so the numbers are never mistaken for the reference metrics.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .adaptation import StylizedGenerator
from .data import PairedDataset
from .encoder import Encoder
from .errors import DataError
from .latent import MappingNetwork
from .losses import FeatureExtractor, IdentityEmbedder, identity_loss, perceptual_loss

SURROGATE_NOTES = {
    "ssim": "windowed structural similarity; surrogate for SCOOT/FSIM-style structure metrics",
    "perceptual": "random-feature distance; surrogate for learned perceptual metrics",
    "identity": "fixed-embedder identity loss; surrogate for face-recognition ID loss",
}


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float32) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return (kernel / kernel.sum())[None, None]


def structural_similarity(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean windowed SSIM over channels; dynamic range 2 for [-1, 1] images."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W) images, got shape {tuple(a.shape)}")
    if a.shape[-1] < 11 or a.shape[-2] < 11:
        raise ValueError("images must be at least 11x11")
    window = _gaussian_window().to(a.dtype)
    k1, k2, drange = 0.01, 0.03, 2.0
    c1, c2 = (k1 * drange) ** 2, (k2 * drange) ** 2
    x = a[:, None]  # channels as batch
    y = b[:, None]
    mu_x = F.conv2d(x, window)
    mu_y = F.conv2d(y, window)
    xx = F.conv2d(x * x, window) - mu_x * mu_x
    yy = F.conv2d(y * y, window) - mu_y * mu_y
    xy = F.conv2d(x * y, window) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float((num / den).mean())


def id_metric(embedder: IdentityEmbedder, a: torch.Tensor, b: torch.Tensor) -> float:
    return float(identity_loss(embedder, a, b))


def perceptual_distance(extractor: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> float:
    return float(perceptual_loss(extractor, a, b))


def _pooled_features(extractor: FeatureExtractor, imgs: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        taps = extractor(imgs)
    return torch.cat([t.mean(dim=(2, 3)) for t in taps], dim=1)


def feature_moment_distance(
    extractor: FeatureExtractor, imgs_a: torch.Tensor, imgs_b: torch.Tensor
) -> float:
    """Distance between mean pooled features of two image sets (FID-style proxy)."""
    mu_a = _pooled_features(extractor, imgs_a).mean(dim=0)
    mu_b = _pooled_features(extractor, imgs_b).mean(dim=0)
    return float((mu_a - mu_b).norm())


def output_diversity(images: torch.Tensor, extractor: FeatureExtractor) -> float:
    """Mean pairwise perceptual distance among a set of images."""
    n = images.shape[0]
    if n < 2:
        return 0.0
    with torch.no_grad():
        taps = extractor(images)
    total, count = 0.0, 0
    for i in range(n):
        for j in range(i + 1, n):
            d = sum(float((t[i] - t[j]).pow(2).mean()) for t in taps)
            total += d
            count += 1
    return total / count


@dataclass
class MetricsReport:
    rows: list[dict]
    means: dict[str, float]
    count: int
    config_hash: str
    notes: dict[str, str] = field(default_factory=lambda: dict(SURROGATE_NOTES))


def evaluate_with(
    generate,
    dataset: PairedDataset,
    extractor: FeatureExtractor,
    embedder: IdentityEmbedder,
    config_hash: str = "",
) -> MetricsReport:
    """Score generate(photo, style_id) against each ground-truth sketch."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    rows = []
    for i in range(len(dataset)):
        sample = dataset[i]
        out = generate(sample.photo, sample.style_id)
        rows.append(
            {
                "sample_id": sample.sample_id,
                "style_id": sample.style_id,
                "ssim": structural_similarity(out, sample.sketch),
                "perceptual": perceptual_distance(extractor, out, sample.sketch),
                "identity": id_metric(embedder, out, sample.sketch),
            }
        )
    means = {}
    for key in ("ssim", "perceptual", "identity"):
        means[key] = math.fsum(r[key] for r in rows) / len(rows)
    return MetricsReport(rows, means, len(rows), config_hash)


def style_references(dataset: PairedDataset) -> dict[int, torch.Tensor]:
    """Fixed per-style reference sketch: the first sample of each style in sorted order."""
    refs: dict[int, torch.Tensor] = {}
    order = sorted(range(len(dataset)), key=lambda i: dataset.sample_ids[i])
    for i in order:
        sid = int(dataset.style_ids[i])
        if sid not in refs:
            refs[sid] = dataset.sketches[i]
    return refs


def evaluate_model(
    gprime: StylizedGenerator,
    encoder: Encoder,
    mapper: MappingNetwork,
    dataset: PairedDataset,
    extractor: FeatureExtractor,
    embedder: IdentityEmbedder,
    config_hash: str = "",
) -> MetricsReport:
    """Standard protocol: per-style fixed reference sketch conditions generation."""
    refs = style_references(dataset)
    with torch.no_grad():
        ref_codes = {
            sid: mapper(encoder(sketch[None]))[0] for sid, sketch in refs.items()
        }

    def generate(photo: torch.Tensor, style_id: int) -> torch.Tensor:
        with torch.no_grad():
            w_p = mapper(encoder(photo[None]))[0]
            return gprime(w_p, ref_codes[style_id])

    return evaluate_with(generate, dataset, extractor, embedder, config_hash)


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_metrics_csv(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for key, note in report.notes.items():
            fh.write(f"# {key}: {note}\n")
        fh.write(f"# config_hash: {report.config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=["sample_id", "style_id", "ssim", "perceptual", "identity"])
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def write_metrics_json(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "count": report.count,
        "means": report.means,
        "config_hash": report.config_hash,
        "notes": report.notes,
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
    return path
