"""Desk-scale video metrics on a toy per-frame feature.

Features are 8x8 average-pooled grey-level grids, L2-normalised (D = 64).
The distances mirror FVD/KVD/ACD in form only; they are not comparable to
numbers computed with deep video features.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from .data import Video
from .errors import NumericError, ParameterError

EXTRACTOR_ID = "pool8x8-l2"
GRID = 8
SHRINKAGE = 1e-6
SQRT_TOL = 1e-6


@dataclass
class FeatureVector:
    values: np.ndarray
    extractor_id: str = EXTRACTOR_ID
    degenerate: bool = False


def _pool(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame.mean(axis=2)
    if frame.ndim != 2:
        raise ParameterError(f"frame must be (H, W) or (H, W, C), got {frame.shape}")
    H, W = frame.shape
    if H % GRID or W % GRID:
        raise ParameterError(f"frame size {H}x{W} is not divisible by {GRID}")
    return frame.reshape(GRID, H // GRID, GRID, W // GRID).mean(axis=(1, 3)).reshape(-1)


def frame_features(frame) -> FeatureVector:
    pooled = _pool(frame)
    norm = np.linalg.norm(pooled)
    if norm == 0:
        return FeatureVector(np.zeros_like(pooled), degenerate=True)
    return FeatureVector(pooled / norm)


def video_features(video) -> np.ndarray:
    frames = video.frames if isinstance(video, Video) else np.asarray(video)
    return np.stack([frame_features(f).values for f in frames])


def acd(video) -> float:
    """Mean L2 distance over all unordered pairs of per-frame features."""
    feats = video_features(video).tolist()
    L = len(feats)
    if L < 2:
        raise ParameterError(f"ACD needs at least 2 frames, got {L}")
    # correctly rounded distance and sum: any exact evaluation order gives the same float
    dists = [math.dist(a, b) for a, b in itertools.combinations(feats, 2)]
    return math.fsum(dists) / len(dists)


def _as_set(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or len(x) < 2:
        raise ParameterError(f"{name} must be an (n >= 2, D) array, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ParameterError(f"{name} contains non-finite values")
    return x


def frechet_distance(set_a, set_b, shrinkage: float = SHRINKAGE) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    a, b = _as_set(set_a, "set_a"), _as_set(set_b, "set_b")
    if a.shape[1] != b.shape[1]:
        raise ParameterError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    D = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + shrinkage * np.eye(D)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + shrinkage * np.eye(D)
    prod = cov_a @ cov_b
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        root = linalg.sqrtm(prod)
    root = np.real(root)
    scale = np.linalg.norm(prod)
    if scale > 0 and np.linalg.norm(root @ root - prod) / scale > SQRT_TOL:
        raise NumericError("matrix square root failed the squaring check")
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(root))
    return max(value, 0.0)


def _poly_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kernel_distance(set_a, set_b, details: bool = False):
    """Unbiased MMD^2 with the cubic polynomial kernel; small negatives are clipped and flagged."""
    a, b = _as_set(set_a, "set_a"), _as_set(set_b, "set_b")
    if a.shape[1] != b.shape[1]:
        raise ParameterError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    m, n = len(a), len(b)
    k_aa, k_bb, k_ab = _poly_kernel(a, a), _poly_kernel(b, b), _poly_kernel(a, b)
    value = ((k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
             + (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
             - 2.0 * k_ab.mean())
    clipped = value < 0
    value = max(float(value), 0.0)
    return (value, clipped) if details else value


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def clip_features(videos, clip_len: int = 16) -> np.ndarray:
    """Per-frame features of the first ``clip_len`` frames of each video, stacked."""
    return np.concatenate([video_features(v)[:clip_len] for v in videos])


def write_metrics(directory, entries: list[dict]) -> Path:
    """Write ``metrics.json``; each entry holds name, value, extractor_id, clips and seed."""
    path = Path(directory) / "metrics.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for e in entries:
        value = e["value"]
        rows.append({"name": e["name"], "value": None if not math.isfinite(value) else value,
                     "extractor_id": e.get("extractor_id", EXTRACTOR_ID),
                     "clips": e.get("clips"), "seed": e.get("seed"),
                     **({"note": e["note"]} if "note" in e else {})})
    path.write_text(json.dumps({"metrics": rows}, indent=2))
    return path
