"""Single-concept smoke sweep on a real VLM with the remote judge.

    export CONCEPT_LENS_JUDGE_TOKEN=...
    python3 scripts/smoke_real.py --backend gemma3-4b --model-path /models/gemma-3-4b-it

Produces a manifest, two images (layers 1 and 15) and a recognition report.
"""

import argparse
import tempfile
from pathlib import Path

from concept_lens.report import report
from concept_lens.runner import ExperimentConfig, JudgeSettings, run_sweep, validate_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--backend", default="gemma3-4b")
    ap.add_argument("--model-path", required=True)
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--concept", default="octopus")
    ap.add_argument("--layers", type=int, nargs="+", default=[1, 15])
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--judge-url", default="https://api.openai.com/v1")
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    cat = Path(tempfile.mkdtemp()) / "smoke.toml"
    cat.write_text(f'animals = ["{args.concept}"]\n[hints]\nanimals = "animal"\n')
    cfg = ExperimentConfig(
        backend=args.backend,
        backend_options={"model_path": args.model_path, "device": args.device},
        layers=args.layers, catalogue=str(cat), optimizer={"steps": args.steps},
        output_dir=args.out, run_id=f"smoke-{args.backend}-{args.concept}",
        judge=JudgeSettings(enabled=True, client="remote", base_url=args.judge_url))
    manifest = run_sweep(cfg)
    problems = validate_manifest(manifest["path"])
    for f in report(manifest["path"], "recognition")["files"]:
        print("wrote", f)
    print("manifest", manifest["path"], "problems:", problems or "none")


if __name__ == "__main__":
    main()
