"""Direct ascent synthesis: optimise a multi-resolution perturbation of a grey
image so its aggregated patch representation points along a concept direction.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .backend import Backend
from .concepts import (ConceptVector, bundled_baseline_words, compute_language_baseline,
                       concept_direction)
from .errors import CapabilityError, InputError, SynthesisDivergedError
from .imrep import AggregationConfig, ImageBaseline, aggregate, compute_image_baseline, cosine

log = logging.getLogger(__name__)

__all__ = [
    "MultiResStack",
    "AugmentationConfig",
    "OptimizerConfig",
    "SynthesisConfig",
    "SynthesisRun",
    "stack_resolutions",
    "init_stack",
    "upscale",
    "compose",
    "perturbation",
    "augment",
    "loss",
    "synthesize",
    "full_presets",
    "toy_presets",
    "LAYER_REGIMES",
]

GREY = 0.5


def stack_resolutions(resolution: int, step: int = 20, smallest: int = 8) -> List[int]:
    """``[R, R-20, R-40, ...]`` down to the last value that is still ``>= 8``."""
    if resolution < smallest:
        raise InputError(f"resolution must be at least {smallest}, got {resolution}")
    return list(range(resolution, smallest - 1, -step))


@dataclass
class MultiResStack:
    """Trainable components keyed by side length, each ``(r, r, 3)``."""

    resolution: int
    components: Dict[int, torch.Tensor]

    def parameters(self) -> List[torch.Tensor]:
        return [self.components[r] for r in sorted(self.components, reverse=True)]

    def detach(self) -> "MultiResStack":
        return MultiResStack(self.resolution, {r: c.detach().clone() for r, c in self.components.items()})


def init_stack(resolution: int, seed: int = 0, dtype=torch.float64,
               requires_grad: bool = True) -> MultiResStack:
    """Zero-initialised stack, so step 0 composes to the grey base exactly.

    ``seed`` is accepted for interface symmetry; zero init consumes no randomness.
    """
    comps = {}
    for r in stack_resolutions(resolution):
        comps[r] = torch.zeros((r, r, 3), dtype=dtype, requires_grad=requires_grad)
    return MultiResStack(resolution, comps)


def upscale(x: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of ``(..., r, r, 3)`` to ``(..., size, size, 3)``."""
    if x.shape[-2] == size and x.shape[-3] == size:
        return x
    lead = x.shape[:-3]
    chw = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
    out = F.interpolate(chw, size=(size, size), mode="bilinear", align_corners=False)
    return out.permute(0, 2, 3, 1).reshape(*lead, size, size, 3)


def perturbation(stack: MultiResStack) -> torch.Tensor:
    """Pre-tanh sum of all components upscaled to ``R x R``."""
    return sum(upscale(c, stack.resolution) for c in stack.parameters())


def compose(stack: MultiResStack, base_grey: float = GREY) -> torch.Tensor:
    return base_grey + 0.5 * torch.tanh(perturbation(stack))


@dataclass(frozen=True)
class AugmentationConfig:
    max_shift: int = 56
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.max_shift < 0 or int(self.max_shift) != self.max_shift:
            raise InputError("max_shift must be a non-negative integer")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be non-negative")


def augment(image: torch.Tensor, config: AugmentationConfig,
            seed: Union[int, torch.Generator, None] = None) -> torch.Tensor:
    """Random shift and Gaussian noise on ``(R, R, 3)`` or ``(B, R, R, 3)``.

    The image is upscaled to ``R + max_shift``, rolled by an independent
    horizontal and vertical shift drawn from ``{-max_shift..max_shift}``,
    centre-cropped back to ``R`` and perturbed with noise. Output is not
    clamped. Each batch element gets its own shift and noise.
    """
    gen = seed if isinstance(seed, torch.Generator) else _generator(seed)
    batched = image.dim() == 4
    x = image if batched else image.unsqueeze(0)
    b, r = x.shape[0], x.shape[1]
    s = config.max_shift
    if s > 0:
        big = upscale(x, r + s)
        shifts = torch.randint(-s, s + 1, (b, 2), generator=gen)
        off = s // 2
        crops = []
        for i in range(b):
            dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
            rolled = torch.roll(big[i], shifts=(dy, dx), dims=(0, 1))
            crops.append(rolled[off:off + r, off:off + r])
        x = torch.stack(crops)
    if config.noise_sigma > 0:
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        x = x + config.noise_sigma * noise
    return x if batched else x[0]


def _generator(seed) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


def loss(stack: MultiResStack, target: ConceptVector, backend: Backend,
         baseline_img: ImageBaseline, agg_config: AggregationConfig,
         aug_config: AugmentationConfig, seed: Union[int, torch.Generator, None] = 0,
         batch_size: int = 1) -> torch.Tensor:
    """Negative cosine between the concept direction and the aggregated
    representation of the augmented composed image, averaged over the batch."""
    if not backend.supports_gradients:
        raise CapabilityError(f"backend {backend.describe().name!r} exposes no gradients")
    image = compose(stack)
    batch = image.unsqueeze(0).expand(batch_size, *image.shape)
    batch = augment(batch, aug_config, seed)
    patches = backend.image_patch_activations(batch, target.layer, check_range=False)
    rep = aggregate(patches, baseline_img, target, agg_config)
    return -cosine(rep.vector, target.direction.to(rep.vector.dtype)).mean()


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.04
    momentum: float = 0.9
    steps: int = 600
    batch_size: int = 8
    grad_clip_norm: float = 1.0
    sigma_schedule: tuple = (2.0, 16.0)
    temperature: float = 0.005

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InputError("steps must be a positive integer")
        if self.batch_size < 1:
            raise InputError("batch_size must be positive")
        if not self.grad_clip_norm > 0:
            raise InputError("grad_clip_norm must be positive")
        lo, hi = self.sigma_schedule
        if not (lo > 0 and hi > 0):
            raise InputError("sigma schedule endpoints must be positive")
        if not self.temperature > 0:
            raise InputError("temperature must be positive")

    def sigma_at(self, step: int) -> float:
        lo, hi = self.sigma_schedule
        if self.steps == 1:
            return float(lo)
        return float(lo + (hi - lo) * step / (self.steps - 1))


@dataclass(frozen=True)
class SynthesisConfig:
    """Everything :func:`synthesize` needs besides the target and backend."""

    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    aggregation_mode: str = "attention"
    prior_center: Optional[tuple] = None
    snapshot_every: int = 0
    clamp_augmented: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["sigma_schedule"] = list(self.optimizer.sigma_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisConfig":
        opt = dict(d.get("optimizer", {}))
        if "sigma_schedule" in opt:
            opt["sigma_schedule"] = tuple(opt["sigma_schedule"])
        return cls(
            optimizer=OptimizerConfig(**opt),
            augmentation=AugmentationConfig(**d.get("augmentation", {})),
            aggregation_mode=d.get("aggregation_mode", "attention"),
            prior_center=tuple(d["prior_center"]) if d.get("prior_center") else None,
            snapshot_every=int(d.get("snapshot_every", 0)),
            clamp_augmented=bool(d.get("clamp_augmented", False)),
        )

    def aggregation(self, step: int) -> AggregationConfig:
        return AggregationConfig(
            temperature=self.optimizer.temperature,
            prior_sigma=self.optimizer.sigma_at(step),
            prior_center=self.prior_center,
            mode=self.aggregation_mode,
        )


# (first layer, last layer inclusive, learning rate, temperature)
LAYER_REGIMES = (
    (0, 7, 0.04, 0.005),
    (8, 27, 0.15, 0.5),
    (28, 10_000, 0.04, 0.005),
)


def full_presets(layer: int, resolution: int = 448) -> SynthesisConfig:
    """Full-scale settings: SGD(0.9), 600 steps, batch 8, clip 1.0, sigma 2 → 16.

    Layers 10/15/20/25 use lr 0.15 and tau 0.5; layers 1/5/30 use lr 0.04 and
    tau 0.005. Other layers fall into the range that contains them.
    """
    for lo, hi, lr, tau in LAYER_REGIMES:
        if lo <= layer <= hi:
            break
    shift = round(56 * resolution / 448)
    return SynthesisConfig(
        optimizer=OptimizerConfig(learning_rate=lr, momentum=0.9, steps=600, batch_size=8,
                                  grad_clip_norm=1.0, sigma_schedule=(2.0, 16.0),
                                  temperature=tau),
        augmentation=AugmentationConfig(max_shift=shift, noise_sigma=0.1),
    )


def toy_presets(layer: int = 0, steps: int = 300) -> SynthesisConfig:
    """Settings for the 64-pixel, 8x8-patch toy backend.

    The shift is 2 px rather than a proportional 8: the toy patch encoder is
    linear and not scale-robust, and a 1.125x zoom on every training view
    leaves the unaugmented image misaligned with the patch grid.
    """
    return SynthesisConfig(
        optimizer=OptimizerConfig(learning_rate=0.15, momentum=0.9, steps=steps, batch_size=8,
                                  grad_clip_norm=1.0, sigma_schedule=(1.0, 8.0),
                                  temperature=0.5),
        augmentation=AugmentationConfig(max_shift=2, noise_sigma=0.1),
    )


@dataclass
class SynthesisRun:
    concept: str
    layer: int
    config: SynthesisConfig
    loss_trajectory: List[float]
    final_image: np.ndarray
    seed: int
    final_similarity: float
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)
    elapsed_seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.loss_trajectory[-1]

    def trajectory_dict(self) -> dict:
        return {
            "concept": self.concept,
            "layer": self.layer,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "loss": self.loss_trajectory,
            "final_similarity": self.final_similarity,
        }


def _resolve_target(concept, layer, backend) -> ConceptVector:
    if isinstance(concept, ConceptVector):
        if concept.layer != layer:
            raise InputError(f"concept vector is for layer {concept.layer}, not {layer}")
        return concept
    baseline = compute_language_baseline(backend, bundled_baseline_words(), layer)
    return concept_direction(backend, concept, layer, baseline)


def final_similarity(image: torch.Tensor, target: ConceptVector, backend: Backend,
                     baseline_img: ImageBaseline, agg: AggregationConfig) -> float:
    """Cosine of the unaugmented image's aggregated representation with the target."""
    with torch.no_grad():
        patches = backend.image_patch_activations(image, target.layer)
        rep = aggregate(patches, baseline_img, target, agg)
        return float(cosine(rep.vector, target.direction.to(rep.vector.dtype)))


def synthesize(concept: Union[str, ConceptVector], layer: int, backend: Backend,
               config: Optional[SynthesisConfig] = None, seed: int = 0,
               baseline_img: Optional[ImageBaseline] = None) -> SynthesisRun:
    """Optimise a stack for ``concept`` at ``layer`` and return the final image.

    ``concept`` is either a prepared :class:`ConceptVector` or a string, in
    which case the bundled baseline words define the centring.
    """
    if not backend.supports_gradients:
        raise CapabilityError(f"backend {backend.describe().name!r} exposes no gradients")
    layer = backend.check_layer(layer)
    config = config or full_presets(layer, backend.describe().image_resolution)
    opt_cfg = config.optimizer
    target = _resolve_target(concept, layer, backend)
    if baseline_img is None:
        baseline_img = compute_image_baseline(backend, layer)

    gen = _generator(seed)
    stack = init_stack(backend.describe().image_resolution, seed, dtype=backend.dtype)
    params = stack.parameters()
    optim = torch.optim.SGD(params, lr=opt_cfg.learning_rate, momentum=opt_cfg.momentum)
    direction = target.direction.to(backend.dtype)

    trajectory: List[float] = []
    snapshots: Dict[int, np.ndarray] = {}
    t0 = time.perf_counter()
    for step in range(opt_cfg.steps):
        agg = config.aggregation(step)
        optim.zero_grad()
        image = compose(stack)
        batch = image.unsqueeze(0).expand(opt_cfg.batch_size, *image.shape)
        batch = augment(batch, config.augmentation, gen)
        if config.clamp_augmented:
            batch = batch.clamp(0.0, 1.0)
        patches = backend.image_patch_activations(batch, layer, check_range=False)
        rep = aggregate(patches, baseline_img, target, agg)
        value = -cosine(rep.vector, direction).mean()
        current = float(value.detach())
        if not math.isfinite(current):
            raise SynthesisDivergedError(step, current)
        value.backward()
        torch.nn.utils.clip_grad_norm_(params, opt_cfg.grad_clip_norm)
        optim.step()
        trajectory.append(current)
        if config.snapshot_every and (step + 1) % config.snapshot_every == 0:
            snapshots[step + 1] = compose(stack).detach().cpu().numpy()
        if step % 100 == 0:
            log.debug("%s layer %d step %d loss %.4f", target.concept, layer, step, current)

    with torch.no_grad():
        final = compose(stack)
    sim = final_similarity(final, target, backend, baseline_img,
                           config.aggregation(opt_cfg.steps - 1))
    return SynthesisRun(
        concept=target.concept,
        layer=layer,
        config=config,
        loss_trajectory=trajectory,
        final_image=final.cpu().numpy(),
        seed=seed,
        final_similarity=sim,
        snapshots=snapshots,
        elapsed_seconds=time.perf_counter() - t0,
    )
