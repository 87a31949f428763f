"""Experiment orchestration: configuration, the concept x layer sweep, and
the run manifest.

Layout of a run::

    <output_dir>/<run_id>/manifest.json
    <output_dir>/<run_id>/<category>/<concept>/layer<k>/image.png
    <output_dir>/<run_id>/<category>/<concept>/layer<k>/trajectory.json
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .backend import Backend, get_backend
from .concepts import (ConceptCatalogue, compute_language_baseline, concept_direction,
                       load_baseline_words, load_catalogue)
from .errors import InputError
from .imrep import compute_image_baseline
from .judge import JudgeProtocol, RecognitionRecord, evaluate_image
from .synth import SynthesisConfig, full_presets, stack_resolutions, synthesize, toy_presets

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_LAYERS",
    "JudgeSettings",
    "ExperimentConfig",
    "load_config",
    "resolve_config",
    "pair_seed",
    "run_sweep",
    "load_manifest",
    "validate_manifest",
    "save_image",
    "strip_timestamps",
]

DEFAULT_LAYERS = (1, 5, 10, 15, 20, 25, 30)
MANIFEST_NAME = "manifest.json"
TIMESTAMP_KEYS = {"created_at", "updated_at", "started_at", "finished_at", "elapsed_seconds"}


@dataclass
class JudgeSettings:
    enabled: bool = False
    client: str = "offline"
    protocols: List[str] = field(default_factory=lambda: ["open", "hinted"])
    samples: int = 10
    threshold: float = 0.5
    wording: str = "guess"
    base_url: str = "https://api.openai.com/v1"
    describer_model: str = "gpt-5"
    grader_model: str = "gpt-5-mini"
    token_env: str = "CONCEPT_LENS_JUDGE_TOKEN"
    temperature: Optional[float] = None


@dataclass
class ExperimentConfig:
    backend: str = "gemma3-4b"
    backend_options: Dict[str, object] = field(default_factory=dict)
    layers: List[int] = field(default_factory=lambda: list(DEFAULT_LAYERS))
    catalogue: Optional[str] = None
    categories: Optional[List[str]] = None
    baseline_words: Optional[str] = None
    preset: str = "full"
    optimizer: Dict[str, object] = field(default_factory=dict)
    augmentation: Dict[str, object] = field(default_factory=dict)
    aggregation_mode: str = "attention"
    snapshot_every: int = 0
    layer_overrides: Dict[int, Dict[str, object]] = field(default_factory=dict)
    judge: JudgeSettings = field(default_factory=JudgeSettings)
    output_dir: str = "out"
    run_id: Optional[str] = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.preset not in ("full", "toy"):
            raise InputError(f"unknown preset {self.preset!r}")
        self.layers = [int(l) for l in self.layers]
        self.layer_overrides = {int(k): dict(v) for k, v in self.layer_overrides.items()}
        unknown = set(self.layer_overrides) - set(self.layers)
        if unknown:
            raise InputError(f"layer overrides for unlisted layers {sorted(unknown)}")
        if isinstance(self.judge, dict):
            self.judge = JudgeSettings(**self.judge)

    def synthesis_config(self, layer: int, resolution: int) -> SynthesisConfig:
        """Preset for ``layer``, then global overrides, then the layer's own overrides."""
        base = full_presets(layer, resolution) if self.preset == "full" else toy_presets(layer)
        d = base.to_dict()
        d["optimizer"].update(self.optimizer)
        d["augmentation"].update(self.augmentation)
        d["aggregation_mode"] = self.aggregation_mode
        d["snapshot_every"] = self.snapshot_every
        for key, value in self.layer_overrides.get(layer, {}).items():
            if key in d["optimizer"]:
                d["optimizer"][key] = value
            elif key in d["augmentation"]:
                d["augmentation"][key] = value
            elif key in d:
                d[key] = value
            else:
                raise InputError(f"unknown override {key!r} for layer {layer}")
        return SynthesisConfig.from_dict(d)

    def load_catalogue(self) -> ConceptCatalogue:
        return load_catalogue(self.catalogue)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_overrides"] = {str(k): v for k, v in self.layer_overrides.items()}
        return d


def load_config(path) -> ExperimentConfig:
    """Read a TOML experiment file. Layer overrides live in ``[layer_overrides.<k>]`` tables."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None
    known = set(ExperimentConfig.__dataclass_fields__)
    extra = set(data) - known
    if extra:
        raise InputError(f"{path}: unknown keys {sorted(extra)}")
    return ExperimentConfig(**data)


def resolve_config(config: ExperimentConfig, backend: Optional[Backend] = None) -> dict:
    """Fully resolved settings, as echoed by ``--print-config`` and stored in manifests."""
    backend = backend or get_backend(config.backend, **config.backend_options)
    desc = backend.describe()
    for layer in config.layers:
        backend.check_layer(layer)
    catalogue = config.load_catalogue()
    categories = config.categories or list(catalogue.categories)
    for c in categories:
        if c not in catalogue.categories:
            raise InputError(f"category {c!r} not in catalogue")
    words = load_baseline_words(config.baseline_words)
    return {
        "tool_version": __version__,
        "backend": desc.to_dict(),
        "backend_options": {k: str(v) for k, v in config.backend_options.items()},
        "stack_resolutions": stack_resolutions(desc.image_resolution),
        "layers": list(config.layers),
        "seed": config.seed,
        "preset": config.preset,
        "catalogue": {
            "source": config.catalogue or "bundled:catalogue_default",
            "categories": {c: catalogue.categories[c] for c in categories},
            "hints": {c: catalogue.hint(c) for c in categories},
        },
        "baseline_words": {"source": config.baseline_words or "bundled:baseline_words",
                           "count": len(words)},
        "synthesis": {str(l): config.synthesis_config(l, desc.image_resolution).to_dict()
                      for l in config.layers},
        "judge": asdict(config.judge),
        "output_dir": config.output_dir,
        "run_id": run_id_for(config),
        "workers": config.workers,
    }


def run_id_for(config: ExperimentConfig) -> str:
    if config.run_id:
        return config.run_id
    d = config.to_dict()
    for k in ("output_dir", "run_id", "workers"):
        d.pop(k)
    digest = hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:8]
    return f"{config.backend}-s{config.seed}-{digest}"


def pair_seed(master_seed: int, concept: str, layer: int) -> int:
    """Stable per-(concept, layer) seed; adding concepts never shifts existing ones."""
    h = hashlib.sha256(f"{master_seed}\x00{concept}\x00{layer}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _slug(text: str) -> str:
    s = re.sub(r"[^A-Za-z0-9._-]+", "_", text.strip()).strip("_")
    return s or "concept"


def pair_key(category: str, concept: str, layer: int) -> str:
    return f"{category}/{concept}/layer{layer}"


def pair_dir(category: str, concept: str, layer: int) -> Path:
    return Path(_slug(category)) / _slug(concept) / f"layer{layer}"


def save_image(image: np.ndarray, path) -> None:
    """8-bit RGB PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json_atomic(path: Path, data) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=1))
    os.replace(tmp, path)


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return json.loads(path.read_text())


def _build_judge(settings: JudgeSettings, backend: Backend):
    if settings.client == "offline":
        from .judge import ToyClassifierJudge

        return ToyClassifierJudge(backend)
    if settings.client == "remote":
        from .judge import RemoteJudge

        return RemoteJudge(settings.base_url, settings.describer_model, settings.grader_model,
                           token_env=settings.token_env, temperature=settings.temperature)
    raise InputError(f"unknown judge client {settings.client!r}")


class _PairContext:
    """Per-process cache of backend, baselines and judge for sweep jobs."""

    def __init__(self, config: ExperimentConfig, backend: Optional[Backend] = None):
        self.config = config
        self.backend = backend or get_backend(config.backend, **config.backend_options)
        self.words = load_baseline_words(config.baseline_words)
        self._lang: Dict[int, object] = {}
        self._img: Dict[int, object] = {}
        self._judge = None

    def baselines(self, layer):
        if layer not in self._lang:
            self._lang[layer] = compute_language_baseline(self.backend, self.words, layer)
            self._img[layer] = compute_image_baseline(self.backend, layer)
        return self._lang[layer], self._img[layer]

    def judge(self):
        if self._judge is None:
            self._judge = _build_judge(self.config.judge, self.backend)
        return self._judge


def _run_pair(ctx: _PairContext, root: Path, category: str, hint: str, concept: str,
              layer: int) -> dict:
    cfg = ctx.config
    seed = pair_seed(cfg.seed, concept, layer)
    rel = pair_dir(category, concept, layer)
    entry = {
        "key": pair_key(category, concept, layer),
        "category": category,
        "concept": concept,
        "layer": layer,
        "seed": seed,
        "dir": rel.as_posix(),
        "started_at": _now(),
    }
    try:
        synth_cfg = cfg.synthesis_config(layer, ctx.backend.describe().image_resolution)
        lang, img_base = ctx.baselines(layer)
        target = concept_direction(ctx.backend, concept, layer, lang)
        run = synthesize(target, layer, ctx.backend, synth_cfg, seed, baseline_img=img_base)
        out = root / rel
        out.mkdir(parents=True, exist_ok=True)
        save_image(run.final_image, out / "image.png")
        traj = run.trajectory_dict()
        traj["baseline_id"] = target.baseline_id
        (out / "trajectory.json").write_text(json.dumps(traj))
        snapshots = []
        for step, snap in sorted(run.snapshots.items()):
            name = f"snapshot_{step:05d}.png"
            save_image(snap, out / name)
            snapshots.append((rel / name).as_posix())
        entry.update(
            status="completed",
            image=(rel / "image.png").as_posix(),
            trajectory=(rel / "trajectory.json").as_posix(),
            snapshots=snapshots,
            final_loss=run.final_loss,
            final_similarity=run.final_similarity,
            synthesis=synth_cfg.to_dict(),
            elapsed_seconds=run.elapsed_seconds,
        )
        if cfg.judge.enabled:
            protocols = [JudgeProtocol(kind, samples_per_image=cfg.judge.samples,
                                       wording=cfg.judge.wording)
                         for kind in cfg.judge.protocols]
            records = evaluate_image(run.final_image, concept, hint, protocols, ctx.judge(),
                                     seed=seed, image_id=entry["key"], layer=layer)
            entry["recognition"] = [r.to_dict() for r in records]
            for r in entry["recognition"]:
                r["category"] = category
    except Exception as exc:  # a failed pair must not abort the sweep
        log.exception("pair %s failed", entry["key"])
        entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    entry["finished_at"] = _now()
    return entry


_WORKER_CTX: Optional[_PairContext] = None


def _worker_init(config_dict):
    global _WORKER_CTX
    _WORKER_CTX = _PairContext(ExperimentConfig(**config_dict))


def _worker_run(root, category, hint, concept, layer):
    return _run_pair(_WORKER_CTX, Path(root), category, hint, concept, layer)


def _entry_done(root: Path, entry: Optional[dict]) -> bool:
    if not entry or entry.get("status") != "completed":
        return False
    return all((root / entry[k]).exists() for k in ("image", "trajectory"))


def run_sweep(config: ExperimentConfig, backend: Optional[Backend] = None) -> dict:
    """Synthesise (and optionally judge) every (concept, layer) pair.

    Completed pairs already present in the manifest are skipped, so an
    interrupted sweep resumes where it stopped. The manifest is rewritten
    after every pair by this process only.
    """
    resolved = resolve_config(config, backend)
    root = Path(config.output_dir) / resolved["run_id"]
    root.mkdir(parents=True, exist_ok=True)
    mpath = root / MANIFEST_NAME
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest.get("config") != resolved:
            raise InputError(f"{mpath} was written with a different configuration")
    else:
        manifest = {
            "schema_version": 1,
            "tool_version": __version__,
            "run_id": resolved["run_id"],
            "created_at": _now(),
            "config": resolved,
            "entries": {},
        }

    cat = resolved["catalogue"]
    jobs = [(category, cat["hints"][category], concept, layer)
            for layer in config.layers
            for category, concepts in cat["categories"].items()
            for concept in concepts]
    order = {pair_key(c, k, l): i for i, (c, _, k, l) in enumerate(jobs)}
    pending = [j for j in jobs
               if not _entry_done(root, manifest["entries"].get(pair_key(j[0], j[2], j[3])))]
    log.info("%d of %d pairs to run in %s", len(pending), len(jobs), root)

    def record(entry):
        manifest["entries"][entry["key"]] = entry
        manifest["entries"] = dict(sorted(manifest["entries"].items(),
                                          key=lambda kv: order.get(kv[0], len(order))))
        manifest["updated_at"] = _now()
        manifest["complete"] = all(_entry_done(root, manifest["entries"].get(k)) for k in order)
        _write_json_atomic(mpath, manifest)

    if config.workers > 1 and pending:
        with ProcessPoolExecutor(config.workers, initializer=_worker_init,
                                 initargs=(config.to_dict(),)) as pool:
            futures = [pool.submit(_worker_run, str(root), *job) for job in pending]
            for fut in as_completed(futures):
                record(fut.result())
    else:
        ctx = _PairContext(config, backend)
        for job in pending:
            record(_run_pair(ctx, root, *job))
    if not pending:
        record_complete = all(_entry_done(root, manifest["entries"].get(k)) for k in order)
        manifest["complete"] = record_complete
        _write_json_atomic(mpath, manifest)
    manifest["path"] = str(mpath)
    return manifest


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "run_id", "config", "entries"],
    "properties": {
        "schema_version": {"const": 1},
        "run_id": {"type": "string"},
        "config": {"type": "object", "required": ["backend", "layers", "synthesis", "seed"]},
        "entries": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["key", "category", "concept", "layer", "seed", "status"],
                "properties": {
                    "status": {"enum": ["completed", "failed"]},
                    "layer": {"type": "integer"},
                    "seed": {"type": "integer"},
                    "final_similarity": {"type": "number", "minimum": -1, "maximum": 1},
                    "recognition": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["concept", "protocol", "raw_responses", "verdicts"],
                        },
                    },
                },
            },
        },
        "probe": {"type": "object", "required": ["profile"]},
    },
}


def validate_manifest(path) -> List[str]:
    """Schema violations and missing files; an empty list means the run is intact."""
    import jsonschema

    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest = load_manifest(path)
    problems = [f"schema: {e.message} at {'/'.join(map(str, e.absolute_path))}"
                for e in jsonschema.Draft7Validator(MANIFEST_SCHEMA).iter_errors(manifest)]
    for key, entry in manifest.get("entries", {}).items():
        if entry.get("key") != key:
            problems.append(f"schema: entry {key!r} carries key {entry.get('key')!r}")
        if entry.get("status") != "completed":
            continue
        for field_name in ("image", "trajectory"):
            rel = entry.get(field_name)
            if rel is None:
                problems.append(f"schema: completed entry {key!r} lacks {field_name!r}")
            elif not (root / rel).exists():
                problems.append(f"missing file: {rel}")
        for rel in entry.get("snapshots", []):
            if not (root / rel).exists():
                problems.append(f"missing file: {rel}")
    probe = manifest.get("probe")
    if probe and not (root / probe["profile"]).exists():
        problems.append(f"missing file: {probe['profile']}")
    return problems


def attach_probe(manifest_path, profile_path) -> None:
    """Record a probe profile (path relative to the run root) in the manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text())
    rel = os.path.relpath(Path(profile_path).resolve(), manifest_path.parent.resolve())
    manifest["probe"] = {"profile": Path(rel).as_posix()}
    _write_json_atomic(manifest_path, manifest)


def strip_timestamps(obj):
    """Copy of a manifest with wall-clock fields removed, for determinism checks."""
    if isinstance(obj, dict):
        return {k: strip_timestamps(v) for k, v in obj.items()
                if k not in TIMESTAMP_KEYS and k != "path"}
    if isinstance(obj, list):
        return [strip_timestamps(v) for v in obj]
    return copy.deepcopy(obj)


def recognition_records(manifest: dict) -> List[RecognitionRecord]:
    out = []
    for entry in manifest.get("entries", {}).values():
        for r in entry.get("recognition", []):
            out.append(RecognitionRecord.from_dict(r))
    return out
