"""Baseline-centred text concept directions and the concept catalogue."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .backend import Backend
from .errors import CatalogueParseError, InputError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "LanguageBaseline",
    "ConceptVector",
    "ConceptCatalogue",
    "bundled_baseline_words",
    "load_baseline_words",
    "compute_language_baseline",
    "concept_direction",
    "load_catalogue",
]


def _resource_text(name: str) -> str:
    return resources.files("concept_lens.resources").joinpath(name).read_text(encoding="utf-8")


def load_baseline_words(source=None) -> List[str]:
    """One word per line; blank lines and ``#`` comments are skipped.

    Duplicates are kept: the bundled list repeats "marble" and "butterfly",
    and both copies count in the mean.
    """
    if source is None:
        text, path = _resource_text("baseline_words.txt"), "baseline_words.txt"
    else:
        path = Path(source)
        text = path.read_text(encoding="utf-8")
    words = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(line)
    if not words:
        raise CatalogueParseError("no baseline words found", path=path, line=1)
    return words


def bundled_baseline_words() -> List[str]:
    return load_baseline_words(None)


def _words_id(words: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(words).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class LanguageBaseline:
    mean_activation: torch.Tensor
    layer: int
    words: tuple

    @property
    def baseline_id(self) -> str:
        return f"words-{len(self.words)}-{_words_id(self.words)}"


@dataclass(frozen=True)
class ConceptVector:
    direction: torch.Tensor
    concept: str
    layer: int
    baseline_id: str

    def to_dict(self) -> dict:
        return {
            "concept": self.concept,
            "layer": self.layer,
            "baseline_id": self.baseline_id,
            "direction": self.direction.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptVector":
        return cls(torch.tensor(d["direction"], dtype=torch.float64), d["concept"],
                   int(d["layer"]), d["baseline_id"])


def compute_language_baseline(backend: Backend, words: Sequence[str], layer: int) -> LanguageBaseline:
    """Mean of the per-word activations (each already averaged over its tokens)."""
    words = tuple(words)
    if not words:
        raise InputError("baseline word list is empty")
    layer = backend.check_layer(layer)
    acts = torch.stack([backend.text_activations(w, layer) for w in words])
    return LanguageBaseline(acts.mean(dim=0), layer, words)


def concept_direction(backend: Backend, concept: str, layer: int,
                      baseline: LanguageBaseline) -> ConceptVector:
    layer = backend.check_layer(layer)
    if baseline.layer != layer:
        raise InputError(f"baseline is for layer {baseline.layer}, requested layer {layer}")
    direction = backend.text_activations(concept, layer) - baseline.mean_activation
    return ConceptVector(direction.detach(), concept, layer, baseline.baseline_id)


@dataclass(frozen=True)
class ConceptCatalogue:
    categories: Dict[str, List[str]]
    hints: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, concepts in self.categories.items():
            if not concepts:
                raise InputError(f"category {name!r} is empty")
            if len(set(concepts)) != len(concepts):
                raise InputError(f"category {name!r} has duplicate concepts")

    def hint(self, category: str) -> str:
        """Word used in the hinted question; falls back to the category name."""
        return self.hints.get(category, category)

    def pairs(self, categories: Optional[Sequence[str]] = None):
        """``(category, concept)`` in file order, optionally restricted."""
        names = list(self.categories) if categories is None else list(categories)
        for name in names:
            if name not in self.categories:
                raise InputError(f"unknown category {name!r}")
            for concept in self.categories[name]:
                yield name, concept

    def __len__(self):
        return sum(len(v) for v in self.categories.values())


def _error_location(exc) -> tuple:
    line = getattr(exc, "lineno", None)
    col = getattr(exc, "colno", None)
    if line is None:
        # tomli messages end with "(at line L, column C)"
        import re

        m = re.search(r"line (\d+), column (\d+)", str(exc))
        if m:
            line, col = int(m.group(1)), int(m.group(2))
    return line, col


def load_catalogue(source=None) -> ConceptCatalogue:
    """Parse a catalogue file (TOML: ``category = ["concept", ...]``).

    ``None`` loads the bundled default. An optional ``[hints]`` table maps
    categories to the word used in hinted questions.
    """
    if source is None:
        text, path = _resource_text("catalogue_default.toml"), "catalogue_default.toml"
    elif isinstance(source, str) and source.startswith("bundled:"):
        name = source.split(":", 1)[1]
        text, path = _resource_text(f"{name}.toml"), f"{name}.toml"
    else:
        path = Path(source)
        text = path.read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line, col = _error_location(exc)
        raise CatalogueParseError(str(exc).split(" (at")[0], path=path, line=line, column=col) from None

    hints = data.pop("hints", {})
    if not isinstance(hints, dict):
        raise CatalogueParseError("'hints' must be a table", path=path)
    if not data:
        raise CatalogueParseError("catalogue defines no categories", path=path, line=1)

    lines = text.splitlines()
    categories = {}
    for name, value in data.items():
        lineno = next((i + 1 for i, ln in enumerate(lines) if ln.strip().startswith(name)), None)
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise CatalogueParseError(f"category {name!r} must be a list of strings",
                                      path=path, line=lineno)
        if not value:
            raise CatalogueParseError(f"category {name!r} is empty", path=path, line=lineno)
        if len(set(value)) != len(value):
            raise CatalogueParseError(f"category {name!r} repeats a concept", path=path, line=lineno)
        categories[name] = list(value)
    return ConceptCatalogue(categories, {k: str(v) for k, v in hints.items()})
