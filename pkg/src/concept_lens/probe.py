"""Layer-wise similarity between concept directions and image corpora.

For each layer, concept and corpus, every image is reduced to one number:
either the cosine of its mean centred patch with the concept direction
(``aggregate``) or the largest per-patch cosine (``max_patch``). Matched
concept/corpus pairs are compared with mismatched ones by permutation test.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .backend import Backend
from .concepts import (ConceptVector, bundled_baseline_words, compute_language_baseline,
                       concept_direction)
from .errors import InputError
from .imrep import (AggregationConfig, ImageBaseline, aggregate, compute_image_baseline, cosine,
                    semantic_scores)
from .stats import normal_ci, permutation_test

__all__ = [
    "METRICS",
    "ImageCorpus",
    "SimilarityRecord",
    "SimilarityProfile",
    "corpus_similarity",
    "profile",
]

METRICS = ("aggregate", "max_patch")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


@dataclass
class ImageCorpus:
    name: str
    images: np.ndarray
    source: str
    is_control: bool = False

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise InputError(f"corpus {self.name!r} must hold a non-empty (M, R, R, 3) stack")

    def __len__(self):
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    @classmethod
    def noise(cls, count: int, resolution: int, seed: int = 0, name: str = "noise") -> "ImageCorpus":
        """I.i.d. uniform [0, 1] pixels."""
        rng = np.random.default_rng(seed)
        imgs = rng.uniform(0.0, 1.0, size=(count, resolution, resolution, 3))
        return cls(name, imgs, f"noise({seed},{count})", is_control=True)

    @classmethod
    def from_directory(cls, name: str, path, resolution: int) -> "ImageCorpus":
        """Load every image in ``path`` (sorted), RGB, bilinear-resized, scaled to [0, 1]."""
        from PIL import Image

        files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise InputError(f"no images found in {path}")
        imgs = []
        for f in files:
            with Image.open(f) as im:
                im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
                imgs.append(np.asarray(im, dtype=np.float64) / 255.0)
        return cls(name, np.stack(imgs), str(path))

    @classmethod
    def toy_concept(cls, backend, concept: str, count: int, seed: int = 0,
                    name: Optional[str] = None) -> "ImageCorpus":
        """Synthetic photographs of a planted toy concept."""
        rng = np.random.default_rng(seed)
        imgs = np.stack([backend.render_concept_image(concept, rng) for _ in range(count)])
        return cls(name or concept, imgs, f"toy({concept},{seed},{count})")


def corpus_similarity(backend: Backend, concept: ConceptVector, corpus: ImageCorpus,
                      metric: str, layer: int, image_baseline: Optional[ImageBaseline] = None,
                      batch_size: int = 32) -> np.ndarray:
    """One similarity value per image."""
    if metric not in METRICS:
        raise InputError(f"unknown metric {metric!r}; choose from {METRICS}")
    r = backend.describe().image_resolution
    if corpus.resolution != r:
        raise InputError(f"corpus {corpus.name!r} is {corpus.resolution}px, backend expects {r}px")
    layer = backend.check_layer(layer)
    if concept.layer != layer:
        raise InputError(f"concept vector is for layer {concept.layer}, not {layer}")
    base = image_baseline or compute_image_baseline(backend, layer)
    mean_mode = AggregationConfig(mode="mean")
    out = []
    with torch.no_grad():
        for start in range(0, len(corpus), batch_size):
            chunk = torch.as_tensor(corpus.images[start:start + batch_size], dtype=backend.dtype)
            patches = backend.image_patch_activations(chunk, layer)
            if metric == "aggregate":
                rep = aggregate(patches, base, concept, mean_mode)
                vals = cosine(rep.vector, concept.direction.to(rep.vector.dtype))
            else:
                vals = semantic_scores(patches, base, concept).max(dim=-1).values
            out.append(vals.cpu().numpy())
    return np.concatenate(out).clip(-1.0, 1.0)


@dataclass
class SimilarityRecord:
    layer: int
    concept: str
    corpus: str
    metric: str
    mean: float
    ci_low: float
    ci_high: float
    values: List[float]


@dataclass
class SimilarityProfile:
    records: List[SimilarityRecord] = field(default_factory=list)
    p_values: List[dict] = field(default_factory=list)
    backend: Optional[dict] = None

    def __len__(self):
        return len(self.records)

    def get(self, layer, concept, corpus, metric) -> SimilarityRecord:
        for r in self.records:
            if (r.layer, r.concept, r.corpus, r.metric) == (layer, concept, corpus, metric):
                return r
        raise KeyError((layer, concept, corpus, metric))

    def lines(self, metric: str) -> Dict[tuple, List[SimilarityRecord]]:
        """``(concept, corpus) -> records sorted by layer`` for one metric."""
        out: Dict[tuple, List[SimilarityRecord]] = {}
        for r in self.records:
            if r.metric == metric:
                out.setdefault((r.concept, r.corpus), []).append(r)
        return {k: sorted(v, key=lambda r: r.layer) for k, v in out.items()}

    @property
    def layers(self) -> List[int]:
        return sorted({r.layer for r in self.records})

    @property
    def metrics(self) -> List[str]:
        return [m for m in METRICS if any(r.metric == m for r in self.records)]

    def to_dict(self) -> dict:
        return {"backend": self.backend, "records": [asdict(r) for r in self.records],
                "p_values": self.p_values}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityProfile":
        return cls([SimilarityRecord(**r) for r in d.get("records", [])],
                   list(d.get("p_values", [])), d.get("backend"))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "SimilarityProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def profile(backend: Backend, concepts: Sequence[str], corpora: Sequence[ImageCorpus],
            layers: Iterable[int], metrics: Sequence[str] = METRICS,
            baseline_words: Optional[Sequence[str]] = None, matches: Optional[dict] = None,
            iterations: int = 10_000, seed: int = 0) -> SimilarityProfile:
    """Evaluate every (layer, concept, corpus, metric) and test matched pairs.

    ``matches`` maps a concept to the name of its own corpus; by default a
    corpus named like the concept. For each concept with a match, the
    matched values are tested against all non-control mismatched corpora
    pooled, separately per layer and metric.
    """
    words = list(baseline_words) if baseline_words is not None else bundled_baseline_words()
    if matches is None:
        names = {c.name for c in corpora}
        matches = {c: c for c in concepts if c in names}
    prof = SimilarityProfile(backend=backend.describe().to_dict())
    for layer in layers:
        layer = backend.check_layer(layer)
        lang = compute_language_baseline(backend, words, layer)
        img = compute_image_baseline(backend, layer)
        for concept in concepts:
            cv = concept_direction(backend, concept, layer, lang)
            for metric in metrics:
                per_corpus = {}
                for corpus in corpora:
                    vals = corpus_similarity(backend, cv, corpus, metric, layer, img)
                    mean, lo, hi = normal_ci(vals, ddof=1)
                    prof.records.append(SimilarityRecord(layer, concept, corpus.name, metric,
                                                         mean, lo, hi, vals.tolist()))
                    per_corpus[corpus.name] = vals
                own = matches.get(concept)
                if own is None:
                    continue
                others = [c.name for c in corpora if c.name != own and not c.is_control]
                if not others:
                    continue
                mismatched = np.concatenate([per_corpus[o] for o in others])
                p = permutation_test(per_corpus[own], mismatched, iterations, seed)
                prof.p_values.append({
                    "layer": layer, "concept": concept, "metric": metric,
                    "matched": own, "mismatched": others, "p_value": p,
                    "matched_mean": float(per_corpus[own].mean()),
                    "mismatched_mean": float(mismatched.mean()),
                })
    return prof
