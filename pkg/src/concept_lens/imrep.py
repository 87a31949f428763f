"""Patch activations → one image vector.

Patches are centred on the grey-image baseline, scored against the target
direction, and combined either with prior-weighted softmax attention or with
a plain mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .backend import Backend, PatchActivations, patch_coords
from .concepts import ConceptVector
from .errors import InputError

__all__ = [
    "ImageBaseline",
    "AggregationConfig",
    "ImageRepresentation",
    "compute_image_baseline",
    "grid_center",
    "log_gaussian_prior",
    "gaussian_prior",
    "semantic_scores",
    "aggregate",
    "cosine",
]

_EPS = 1e-12


@dataclass(frozen=True)
class ImageBaseline:
    mean_patch: torch.Tensor
    layer: int


@dataclass(frozen=True)
class AggregationConfig:
    """``prior_center=None`` means the geometric centre of the patch grid.

    ``prior_sigma`` is in patch-grid units.
    """

    temperature: float = 0.5
    prior_sigma: float = 2.0
    prior_center: Optional[tuple] = None
    mode: str = "attention"

    def __post_init__(self):
        if not self.temperature > 0:
            raise InputError("temperature must be positive")
        if not self.prior_sigma > 0:
            raise InputError("prior_sigma must be positive")
        if self.mode not in ("attention", "mean"):
            raise InputError(f"unknown aggregation mode {self.mode!r}")


@dataclass(frozen=True)
class ImageRepresentation:
    vector: torch.Tensor
    weights: torch.Tensor
    scores: torch.Tensor


def compute_image_baseline(backend: Backend, layer: int) -> ImageBaseline:
    """Mean patch activation of the all-0.5 image."""
    r = backend.describe().image_resolution
    grey = torch.full((r, r, 3), 0.5, dtype=backend.dtype)
    with torch.no_grad():
        acts = backend.image_patch_activations(grey, layer).patches
    return ImageBaseline(acts.mean(dim=0), backend.check_layer(layer))


def grid_center(grid) -> tuple:
    rows, cols = grid
    return ((cols - 1) / 2.0, (rows - 1) / 2.0)


def log_gaussian_prior(grid, center=None, sigma: float = 2.0, dtype=torch.float64) -> torch.Tensor:
    """``log g_i = -d_i^2 / (2 sigma^2)``, computed without exponentiating."""
    if not sigma > 0:
        raise InputError("sigma must be positive")
    cx, cy = grid_center(grid) if center is None else center
    xy = patch_coords(grid).to(dtype)
    d2 = (xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2
    return -d2 / (2.0 * sigma**2)


def gaussian_prior(grid, center=None, sigma: float = 2.0, dtype=torch.float64) -> torch.Tensor:
    return torch.exp(log_gaussian_prior(grid, center, sigma, dtype))


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine along the last axis; 0 where either vector has zero norm."""
    num = (a * b).sum(-1)
    den = a.norm(dim=-1) * b.norm(dim=-1)
    zero = den <= _EPS  # False for NaN, so non-finite inputs still propagate
    safe = torch.where(zero, torch.ones_like(den), den)
    return torch.where(zero, torch.zeros_like(num), num / safe)


def _centred(patches, baseline: ImageBaseline, target: ConceptVector):
    p = patches.patches if isinstance(patches, PatchActivations) else patches
    h = p.shape[-1]
    if baseline.mean_patch.shape[-1] != h or target.direction.shape[-1] != h:
        raise InputError(
            f"dimension mismatch: patches {h}, baseline {baseline.mean_patch.shape[-1]}, "
            f"target {target.direction.shape[-1]}"
        )
    direction = target.direction.to(p.dtype)
    return p - baseline.mean_patch.to(p.dtype), direction


def semantic_scores(patches, baseline: ImageBaseline, target: ConceptVector) -> torch.Tensor:
    """Cosine of each centred patch with the target direction, in [-1, 1]."""
    cent, direction = _centred(patches, baseline, target)
    return cosine(cent, direction).clamp(-1.0, 1.0)


def aggregate(patches: PatchActivations, baseline: ImageBaseline, target: ConceptVector,
              config: AggregationConfig) -> ImageRepresentation:
    """Weighted sum of centred patches. Works on ``(N, H)`` or ``(B, N, H)``."""
    cent, direction = _centred(patches, baseline, target)
    scores = cosine(cent, direction).clamp(-1.0, 1.0)
    n = cent.shape[-2]
    if config.mode == "mean":
        weights = torch.full_like(scores, 1.0 / n)
    else:
        log_g = log_gaussian_prior(patches.grid, config.prior_center, config.prior_sigma,
                                   dtype=cent.dtype)
        weights = torch.softmax((scores + log_g) / config.temperature, dim=-1)
    vector = (weights.unsqueeze(-1) * cent).sum(dim=-2)
    return ImageRepresentation(vector, weights, scores)
