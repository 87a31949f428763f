"""Model-access contract and the deterministic toy backend.

Every other module talks to a model through :class:`Backend`. Activations
are returned as torch tensors so the pixel-to-activation path stays
differentiable; callers pull gradients with ordinary autograd (or via
:meth:`Backend.pixel_gradient`).
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np
import torch

from .errors import InputError, LayerRangeError

__all__ = [
    "BackendDescriptor",
    "PatchActivations",
    "Backend",
    "ToyBackend",
    "PLANTED_CONCEPTS",
    "patch_coords",
    "register_backend",
    "get_backend",
    "available_backends",
]

PLANTED_CONCEPTS = (
    "apple",
    "orange",
    "octopus",
    "frog",
    "squirrel",
    "giraffe",
    "bee",
    "lion",
    "elephant",
    "parrot",
)


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    hidden_dim: int
    layer_count: int
    image_resolution: int
    patch_grid: tuple

    def __post_init__(self):
        if self.image_resolution <= 0:
            raise InputError("image_resolution must be positive")
        if self.hidden_dim <= 0:
            raise InputError("hidden_dim must be positive")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "hidden_dim": self.hidden_dim,
            "layer_count": self.layer_count,
            "image_resolution": self.image_resolution,
            "patch_grid": list(self.patch_grid),
        }


def patch_coords(grid) -> torch.Tensor:
    """Integer (x, y) = (column, row) of every patch, in row-major order."""
    rows, cols = grid
    ys, xs = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)


@dataclass(frozen=True)
class PatchActivations:
    """Per-patch activations, shape ``(N, H)`` or batched ``(B, N, H)``."""

    patches: torch.Tensor
    grid: tuple

    def __post_init__(self):
        n = self.grid[0] * self.grid[1]
        if n < 1 or self.patches.shape[-2] != n:
            raise InputError(
                f"patch count {self.patches.shape[-2]} does not match grid {self.grid}"
            )

    @property
    def num_patches(self) -> int:
        return self.patches.shape[-2]

    @property
    def patch_coords(self) -> torch.Tensor:
        return patch_coords(self.grid)


class Backend(ABC):
    """A vision-language model seen through the two activation queries we need.

    Subclasses implement :meth:`describe`, :meth:`token_activations` and
    :meth:`_forward_patches`. Instances are read-only after construction.
    """

    supports_gradients: bool = True
    dtype: torch.dtype = torch.float64

    @abstractmethod
    def describe(self) -> BackendDescriptor: ...

    @abstractmethod
    def token_activations(self, text: str, layer: int) -> torch.Tensor:
        """Activations ``(T, H)`` at the token positions belonging to ``text``."""

    @abstractmethod
    def _forward_patches(self, images: torch.Tensor, layer: int) -> torch.Tensor:
        """Map ``(B, R, R, 3)`` pixels to ``(B, N, H)`` patch activations."""

    def check_layer(self, layer) -> int:
        count = self.describe().layer_count
        if isinstance(layer, bool) or int(layer) != layer:
            raise InputError(f"layer must be an integer, got {layer!r}")
        layer = int(layer)
        if not 0 <= layer < count:
            raise LayerRangeError(f"layer {layer} outside [0, {count})")
        return layer

    def text_activations(self, text: str, layer: int) -> torch.Tensor:
        """Mean activation over the token positions of ``text`` at ``layer``."""
        if not isinstance(text, str) or not text.strip():
            raise InputError("text must be a non-empty string")
        layer = self.check_layer(layer)
        tokens = self.token_activations(text, layer)
        if tokens.shape[0] == 0:
            raise InputError(f"{text!r} tokenises to zero tokens")
        return tokens.mean(dim=0)

    def image_patch_activations(
        self, image: torch.Tensor, layer: int, *, check_range: bool = True
    ) -> PatchActivations:
        """Patch activations of an ``(R, R, 3)`` or ``(B, R, R, 3)`` image.

        ``check_range=False`` admits pixels outside [0, 1]; the synthesis loop
        uses it for noise-augmented inputs.
        """
        layer = self.check_layer(layer)
        desc = self.describe()
        image = torch.as_tensor(image)
        if not torch.is_floating_point(image):
            image = image.to(self.dtype)
        r = desc.image_resolution
        if image.shape[-3:] != (r, r, 3) or image.dim() not in (3, 4):
            raise InputError(f"expected image of shape ({r}, {r}, 3), got {tuple(image.shape)}")
        if check_range:
            lo, hi = float(image.min()), float(image.max())
            if lo < 0.0 or hi > 1.0:
                raise InputError(f"pixel values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")
        batched = image.dim() == 4
        out = self._forward_patches(image if batched else image.unsqueeze(0), layer)
        return PatchActivations(out if batched else out[0], desc.patch_grid)

    def pixel_gradient(
        self, image: torch.Tensor, layer: int, scalar_fn: Callable[[torch.Tensor], torch.Tensor]
    ) -> torch.Tensor:
        """Gradient of ``scalar_fn(patches)`` with respect to the input pixels."""
        if not self.supports_gradients:
            from .errors import CapabilityError

            raise CapabilityError(f"backend {self.describe().name!r} exposes no gradients")
        x = torch.as_tensor(image, dtype=self.dtype).detach().clone().requires_grad_(True)
        value = scalar_fn(self.image_patch_activations(x, layer, check_range=False).patches)
        (grad,) = torch.autograd.grad(value, x)
        return grad


def _smooth_patch_features(p: int) -> np.ndarray:
    """Orthonormal bilinear basis {1, x, y, xy} per colour channel, ``(12, p*p*3)``."""
    c = np.linspace(-1.0, 1.0, p) if p > 1 else np.zeros(1)
    ys, xs = np.meshgrid(c, c, indexing="ij")
    planes = [np.ones_like(xs), xs, ys, xs * ys]
    rows = []
    for ch in range(3):
        for plane in planes:
            f = np.zeros((p, p, 3))
            f[:, :, ch] = plane
            n = np.linalg.norm(f)
            rows.append(f.reshape(-1) / n if n > 0 else f.reshape(-1))
    return np.array(rows)


def _stable_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class ToyBackend(Backend):
    """Small differentiable stand-in for a VLM with known concept geometry.

    Pixels are cut into ``patch_size`` squares; each square is reduced to
    smooth features (per-channel mean, horizontal and vertical slope, saddle),
    mixed by a fixed random matrix into a ``visible_dim``-dimensional subspace
    of the hidden space, then passed
    through two residual blocks ``h + A tanh(B h + c) + d`` per layer that
    also write only into that subspace. The remaining hidden dimensions are
    unreachable from images. Each ``c`` is chosen so the ``tanh`` argument
    is zero on the grey image, which makes centred activations an odd
    function of the pixel deviation from grey. Ten concept axes (``PLANTED_CONCEPTS``) are orthonormal columns
    of the visible subspace.

    A text token's activation is ``axis + common[layer] + offset(token)`` for
    planted words; any other token gets a hash-seeded pseudo-random vector in
    place of the axis. ``common[layer]`` is large so that uncentred cosines are
    dominated by it, as with real models.
    """

    name = "toy"

    def __init__(
        self,
        seed: int = 0,
        hidden_dim: int = 16,
        layer_count: int = 4,
        image_resolution: int = 64,
        patch_size: int = 8,
        dtype: torch.dtype = torch.float64,
    ):
        if image_resolution % patch_size:
            raise InputError("image_resolution must be a multiple of patch_size")
        self.seed = seed
        self.dtype = dtype
        self.patch_size = patch_size
        self.visible_dim = hidden_dim - 4
        if self.visible_dim < len(PLANTED_CONCEPTS):
            raise InputError(f"hidden_dim must be at least {len(PLANTED_CONCEPTS) + 4}")
        g = image_resolution // patch_size
        self._descriptor = BackendDescriptor(
            name=self.name,
            hidden_dim=hidden_dim,
            layer_count=layer_count,
            image_resolution=image_resolution,
            patch_grid=(g, g),
        )
        self.params = self._build_params(seed, hidden_dim, layer_count, patch_size)
        self._t = {k: (torch.tensor(v, dtype=dtype) if isinstance(v, np.ndarray) else v)
                   for k, v in self.params.items() if k != "blocks"}
        self._t_blocks = [
            tuple(torch.tensor(m, dtype=dtype) for m in blk) for blk in self.params["blocks"]
        ]

    def _build_params(self, seed, h, layers, p):
        rng = np.random.default_rng(seed)
        v = self.visible_dim
        basis, _ = np.linalg.qr(rng.normal(size=(h, h)))
        visible = basis[:, :v]
        feats = _smooth_patch_features(p)
        mix = rng.normal(size=(v, feats.shape[0])) * (2.0 / np.sqrt(feats.shape[0]))
        proj = mix @ feats
        patchify = visible @ proj
        bias = rng.normal(size=h) * 0.5
        # grey-image activation entering each block; the tanh is centred on it
        grey = patchify @ np.full(patchify.shape[1], 0.5) + bias
        blocks = []
        width = h
        for _ in range(2 * layers):
            a = visible @ (rng.normal(size=(v, width)) * (0.15 / np.sqrt(width)))
            b = rng.normal(size=(width, h)) / np.sqrt(h)
            d = visible @ (rng.normal(size=v) * 0.2)
            blocks.append((a, b, -b @ grey, d))
            grey = grey + d
        return {
            "basis": basis,
            "axes": basis[:, : len(PLANTED_CONCEPTS)].T.copy(),
            "patchify": patchify,
            "bias": bias,
            "blocks": blocks,
            "common": rng.normal(size=(layers, h)) * (2.0 / np.sqrt(h)),
        }

    def describe(self) -> BackendDescriptor:
        return self._descriptor

    def concept_axis(self, concept: str) -> np.ndarray:
        return self.params["axes"][PLANTED_CONCEPTS.index(concept)].copy()

    def tokenize(self, text: str) -> list:
        return text.split()

    def token_vector(self, token: str, layer: int) -> np.ndarray:
        """Activation of a single token at ``layer`` (numpy, float64)."""
        h = self._descriptor.hidden_dim
        if token in PLANTED_CONCEPTS:
            semantic = self.concept_axis(token)
        else:
            semantic = _stable_rng(self.seed, "word", token).normal(size=h) * (0.3 / np.sqrt(h))
        offset = _stable_rng(self.seed, "offset", token, layer).normal(size=h) * (0.01 / np.sqrt(h))
        return semantic + self.params["common"][layer] + offset

    def token_activations(self, text: str, layer: int) -> torch.Tensor:
        layer = self.check_layer(layer)
        rows = [self.token_vector(t, layer) for t in self.tokenize(text)]
        h = self._descriptor.hidden_dim
        return torch.tensor(np.array(rows).reshape(-1, h), dtype=self.dtype)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, R, R, 3)`` → ``(B, N, p*p*3)`` in row-major patch order."""
        b, r, _, ch = images.shape
        p = self.patch_size
        g = r // p
        x = images.reshape(b, g, p, g, p, ch).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * ch)

    def _forward_patches(self, images: torch.Tensor, layer: int) -> torch.Tensor:
        x = self.patchify(images.to(self.dtype))
        h = x @ self._t["patchify"].T + self._t["bias"]
        for a, b, c, d in self._t_blocks[: 2 * (layer + 1)]:
            h = h + torch.tanh(h @ b.T + c) @ a.T + d
        return h

    def concept_template(self, concept: str) -> np.ndarray:
        """Minimum-norm ``(p, p, 3)`` pixel pattern whose embedding is the concept axis."""
        pinv = np.linalg.pinv(self.params["patchify"])
        t = pinv @ self.concept_axis(concept)
        p = self.patch_size
        return t.reshape(p, p, 3)

    def render_concept_image(self, concept: str, rng: np.random.Generator,
                             amplitude=(0.6, 1.0), noise: float = 0.05) -> np.ndarray:
        """A synthetic photo of ``concept``: its template tiled over grey, plus noise."""
        r = self._descriptor.image_resolution
        g = r // self.patch_size
        t = self.concept_template(concept)
        t = t * (0.35 / np.abs(t).max())
        a = rng.uniform(*amplitude, size=(g, g, 1, 1, 1))
        tiles = 0.5 + a * t[None, None]
        img = tiles.transpose(0, 2, 1, 3, 4).reshape(r, r, 3)
        img = img + rng.normal(scale=noise, size=img.shape)
        return np.clip(img, 0.0, 1.0)


_REGISTRY: Dict[str, Callable[..., Backend]] = {}


def register_backend(name: str):
    def deco(factory):
        _REGISTRY[name] = factory
        return factory

    return deco


register_backend("toy")(ToyBackend)


def available_backends() -> list:
    from . import adapters  # noqa: F401  registers the real-model adapters

    return sorted(_REGISTRY)


def get_backend(name: str, **options) -> Backend:
    """Instantiate a backend by its configuration name (``"toy"``, ``"gemma3-4b"``, ...)."""
    if name not in _REGISTRY:
        from . import adapters  # noqa: F401

    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise InputError(f"unknown backend {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(**options)
