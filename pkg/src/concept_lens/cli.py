"""``concept-lens`` command line.

Exit status: 0 when every requested item completed, 1 when some pairs or
images failed, 2 on invalid input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import InputError

log = logging.getLogger("concept_lens")


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k, v


def _int_list(text):
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _backend(args):
    from .backend import get_backend

    opts = {k: _value(v) for k, v in (args.backend_opt or [])}
    return get_backend(args.backend, **opts), opts


def _add_common(p):
    p.add_argument("--backend", default="toy", help="backend name (default: toy)")
    p.add_argument("--backend-opt", type=_kv, action="append", metavar="KEY=VALUE",
                   help="backend constructor option, e.g. model_path=/models/gemma")
    p.add_argument("--baseline-words", metavar="PATH", help="replacement baseline word list")
    p.add_argument("--catalogue", metavar="PATH", help="replacement concept catalogue (TOML)")


# -- extract ----------------------------------------------------------------

def cmd_extract(args) -> int:
    from .concepts import compute_language_baseline, concept_direction, load_baseline_words

    backend, _ = _backend(args)
    words = load_baseline_words(args.baseline_words)
    layers = args.layers or list(range(backend.describe().layer_count))
    out = []
    for layer in layers:
        base = compute_language_baseline(backend, words, layer)
        for concept in args.concepts:
            out.append(concept_direction(backend, concept, layer, base).to_dict())
    text = json.dumps({"backend": backend.describe().to_dict(), "vectors": out}, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


# -- synthesize -------------------------------------------------------------

def cmd_synthesize(args) -> int:
    from .concepts import compute_language_baseline, concept_direction, load_baseline_words
    from .runner import save_image
    from .synth import full_presets, synthesize, toy_presets

    backend, _ = _backend(args)
    desc = backend.describe()
    preset = args.preset or ("toy" if args.backend == "toy" else "full")
    cfg = toy_presets(args.layer) if preset == "toy" else full_presets(args.layer,
                                                                        desc.image_resolution)
    opt = cfg.optimizer
    if args.steps is not None:
        opt = replace(opt, steps=args.steps)
    if args.lr is not None:
        opt = replace(opt, learning_rate=args.lr)
    if args.tau is not None:
        opt = replace(opt, temperature=args.tau)
    cfg = replace(cfg, optimizer=opt, snapshot_every=args.snapshot_every,
                  aggregation_mode=args.aggregation)
    base = compute_language_baseline(backend, load_baseline_words(args.baseline_words), args.layer)
    target = concept_direction(backend, args.concept, args.layer, base)
    run = synthesize(target, args.layer, backend, cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(run.final_image, out / "image.png")
    for step, snap in sorted(run.snapshots.items()):
        save_image(snap, out / f"snapshot_{step:05d}.png")
    traj = run.trajectory_dict()
    traj["backend"] = desc.to_dict()
    traj["baseline_id"] = target.baseline_id
    (out / "trajectory.json").write_text(json.dumps(traj, indent=1))
    print(f"{args.concept} layer {args.layer}: final loss {run.final_loss:.4f}, "
          f"similarity {run.final_similarity:.4f} -> {out / 'image.png'}")
    return 0


# -- probe ------------------------------------------------------------------

def cmd_probe(args) -> int:
    from .concepts import load_baseline_words
    from .probe import METRICS, ImageCorpus, profile
    from .report import probe_report

    backend, _ = _backend(args)
    r = backend.describe().image_resolution
    corpora = [ImageCorpus.from_directory(name, path, r) for name, path in (args.corpus or [])]
    if args.toy_corpora:
        if not hasattr(backend, "render_concept_image"):
            raise InputError("--toy-corpora needs the toy backend")
        corpora += [ImageCorpus.toy_concept(backend, c, args.toy_corpora, seed=i)
                    for i, c in enumerate(args.concepts)]
    if args.noise:
        corpora.append(ImageCorpus.noise(args.noise, r, seed=args.seed))
    if not corpora:
        raise InputError("no corpora given (use --corpus, --toy-corpora or --noise)")
    metrics = METRICS if args.metric == "both" else (args.metric,)
    layers = args.layers or list(range(backend.describe().layer_count))
    prof = profile(backend, args.concepts, corpora, layers, metrics,
                   load_baseline_words(args.baseline_words), iterations=args.iterations,
                   seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = prof.save(out / "profile.json")
    files = probe_report(prof, out)["files"]
    if args.manifest:
        from .runner import attach_probe

        attach_probe(args.manifest, path)
    for row in prof.p_values:
        print(f"layer {row['layer']:>3} {row['concept']:<12} {row['metric']:<10} "
              f"matched {row['matched_mean']:+.3f} mismatched {row['mismatched_mean']:+.3f} "
              f"p={row['p_value']:.2g}")
    print("wrote", path, *files)
    return 0


# -- judge ------------------------------------------------------------------

def _judge_client(args, backend):
    from .runner import JudgeSettings, _build_judge

    settings = JudgeSettings(client=args.client, base_url=args.base_url,
                             describer_model=args.describer_model,
                             grader_model=args.grader_model, temperature=args.temperature)
    return _build_judge(settings, backend)


def _load_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def cmd_judge(args) -> int:
    from .concepts import load_catalogue
    from .judge import JudgeProtocol, evaluate_image, recognition_curves
    from .runner import MANIFEST_NAME, _write_json_atomic

    images_dir = Path(args.images)
    backend = None
    if args.client == "offline":
        backend, _ = _backend(args)
    client = _judge_client(args, backend)
    kinds = ["open", "hinted"] if args.protocol == "both" else [args.protocol]
    protocols = [JudgeProtocol(k, samples_per_image=args.samples, wording=args.wording)
                 for k in kinds]
    catalogue = load_catalogue(args.catalogue)
    hint_of = {c: catalogue.hint(cat) for cat, cs in catalogue.categories.items() for c in cs}
    cat_of = {c: cat for cat, cs in catalogue.categories.items() for c in cs}

    mpath = images_dir / MANIFEST_NAME
    manifest = json.loads(mpath.read_text()) if mpath.exists() else None
    if manifest is not None:
        jobs = [(e["key"], images_dir / e["image"], e["concept"], e["category"], e["layer"])
                for e in manifest["entries"].values() if e.get("status") == "completed"]
    else:
        jobs = []
        for p in sorted(images_dir.rglob("*.png")):
            concept = p.parent.name if p.stem == "image" else p.stem
            if p.stem == "image" and p.parent.name.startswith("layer"):
                concept = p.parent.parent.name
            jobs.append((p.relative_to(images_dir).as_posix(), p, concept,
                         cat_of.get(concept), None))
    if not jobs:
        raise InputError(f"no images found under {images_dir}")

    all_records, failures = [], 0
    for image_id, path, concept, category, layer in jobs:
        hint = catalogue.hint(category) if category in catalogue.categories else \
            hint_of.get(concept, "object")
        recs = evaluate_image(_load_png(path), concept, hint, protocols, client,
                              seed=args.seed, image_id=image_id, layer=layer)
        for r in recs:
            r.category = category or hint
            failures += r.rate is None
        all_records.extend(recs)
        if manifest is not None:
            manifest["entries"][image_id]["recognition"] = [r.to_dict() for r in recs]
            _write_json_atomic(mpath, manifest)
    rows = recognition_curves(all_records, threshold=args.recognition_threshold) \
        if any(r.rate is not None for r in all_records) else []
    out = Path(args.out) if args.out else images_dir / "recognition.json"
    out.write_text(json.dumps({"records": [r.to_dict() for r in all_records],
                               "threshold": args.recognition_threshold,
                               "summary": rows}, indent=1))
    for row in rows:
        print(f"{row['protocol']:<7} {str(row['category']):<14} layer {row['layer']}: "
              f"{row['recognised']}/{row['n']} recognised")
    print("wrote", out)
    return 1 if failures else 0


# -- sweep ------------------------------------------------------------------

def cmd_sweep(args) -> int:
    from .runner import ExperimentConfig, load_config, resolve_config, run_sweep

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.backend is not None:
        updates["backend"] = args.backend
    if args.backend_opt:
        updates["backend_options"] = {k: _value(v) for k, v in args.backend_opt}
    for name in ("layers", "categories", "catalogue", "baseline_words", "seed", "workers",
                 "run_id", "preset"):
        v = getattr(args, name)
        if v is not None:
            updates[name] = v
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.steps is not None:
        updates["optimizer"] = {**cfg.optimizer, "steps": args.steps}
    if args.judge or args.client:
        updates["judge"] = replace(cfg.judge, enabled=True,
                                   client=args.client or cfg.judge.client)
    if "layers" in updates:
        updates["layer_overrides"] = {k: v for k, v in cfg.layer_overrides.items()
                                      if k in updates["layers"]}
    cfg = replace(cfg, **updates)
    if args.print_config:
        print(json.dumps(resolve_config(cfg), indent=1))
        return 0
    manifest = run_sweep(cfg)
    entries = manifest["entries"].values()
    failed = [e["key"] for e in entries if e["status"] != "completed"]
    print(f"{len(manifest['entries']) - len(failed)} pairs completed, {len(failed)} failed; "
          f"manifest {manifest['path']}")
    for key in failed:
        print("  failed:", key, manifest["entries"][key].get("error", ""))
    return 0 if manifest.get("complete") and not failed else 1


# -- report -----------------------------------------------------------------

def cmd_report(args) -> int:
    from .report import report

    result = report(args.manifest, args.kind, args.out)
    for f in result["files"]:
        print("wrote", f)
    if result["gaps"]:
        print(f"{len(result['gaps'])} cells without data (see JSON 'gaps')")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="concept-lens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="concept directions as JSON")
    _add_common(p)
    p.add_argument("--concepts", type=_str_list, required=True)
    p.add_argument("--layers", type=_int_list)
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synthesize", help="optimise one image for a concept at a layer")
    _add_common(p)
    p.add_argument("--concept", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snapshot-every", type=int, default=0, metavar="K")
    p.add_argument("--preset", choices=("full", "toy"))
    p.add_argument("--aggregation", choices=("attention", "mean"), default="attention")
    p.add_argument("--out", default="out/synth")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("probe", help="layer-wise similarity of concepts and image corpora")
    _add_common(p)
    p.add_argument("--concepts", type=_str_list, required=True)
    p.add_argument("--corpus", type=_kv, action="append", metavar="NAME=PATH")
    p.add_argument("--toy-corpora", type=int, default=0, metavar="N",
                   help="N rendered images per concept (toy backend only)")
    p.add_argument("--noise", type=int, default=0, metavar="N")
    p.add_argument("--metric", choices=("aggregate", "max_patch", "both"), default="both")
    p.add_argument("--layers", type=_int_list)
    p.add_argument("--iterations", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="attach the profile to this run manifest")
    p.add_argument("--out", default="out/probe")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("judge", help="recognition of synthesised images")
    _add_common(p)
    p.add_argument("--images", required=True, metavar="DIR")
    p.add_argument("--protocol", choices=("open", "hinted", "both"), default="both")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--client", choices=("offline", "remote"), default="offline")
    p.add_argument("--recognition-threshold", type=float, default=0.5)
    p.add_argument("--wording", choices=("guess", "short"), default="guess")
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--describer-model", default="gpt-5")
    p.add_argument("--grader-model", default="gpt-5-mini")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("sweep", help="category x layer synthesis sweep")
    p.add_argument("--config", metavar="TOML")
    p.add_argument("--print-config", action="store_true",
                   help="print the fully resolved configuration and exit")
    p.add_argument("--backend")
    p.add_argument("--backend-opt", type=_kv, action="append", metavar="KEY=VALUE")
    p.add_argument("--baseline-words", metavar="PATH")
    p.add_argument("--catalogue", metavar="PATH")
    p.add_argument("--categories", type=_str_list)
    p.add_argument("--layers", type=_int_list)
    p.add_argument("--preset", choices=("full", "toy"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--run-id")
    p.add_argument("--judge", action="store_true", help="judge every image after synthesis")
    p.add_argument("--client", choices=("offline", "remote"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="figures from a run manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=("recognition", "probe", "gallery"), required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"concept-lens: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
