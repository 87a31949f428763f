"""Attention versus plain mean aggregation during synthesis on the toy backend.

Runs each planted concept under both aggregation modes and reports the
final attention-mode similarity and toy-classifier recognition.

    python3 scripts/mean_ablation.py --steps 300 --layer 2
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import torch

from concept_lens.backend import PLANTED_CONCEPTS, ToyBackend
from concept_lens.concepts import (bundled_baseline_words, compute_language_baseline,
                                   concept_direction)
from concept_lens.imrep import compute_image_baseline
from concept_lens.judge import JudgeProtocol, ToyClassifierJudge, evaluate_image
from concept_lens.synth import final_similarity, synthesize, toy_presets


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--layer", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/mean_ablation")
    args = ap.parse_args()

    toy = ToyBackend()
    judge = ToyClassifierJudge(toy)
    base_img = compute_image_baseline(toy, args.layer)
    lang = compute_language_baseline(toy, bundled_baseline_words(), args.layer)
    # both modes are scored with the same attention read-out
    readout = toy_presets(args.layer, args.steps).aggregation(args.steps - 1)
    rows = []
    for mode in ("attention", "mean"):
        cfg = replace(toy_presets(args.layer, args.steps), aggregation_mode=mode)
        for concept in PLANTED_CONCEPTS:
            target = concept_direction(toy, concept, args.layer, lang)
            run = synthesize(target, args.layer, toy, cfg, seed=args.seed, baseline_img=base_img)
            sim = final_similarity(torch.tensor(run.final_image), target, toy, base_img, readout)
            rec = evaluate_image(run.final_image, concept, None, [JudgeProtocol("open")], judge)[0]
            rows.append({"mode": mode, "concept": concept, "similarity": sim, "rate": rec.rate})
            print(f"{mode:<9} {concept:<9} attention-cos {sim:.3f} rate {rec.rate:.1f}")
    for mode in ("attention", "mean"):
        sel = [r for r in rows if r["mode"] == mode]
        print(f"{mode}: mean similarity {sum(r['similarity'] for r in sel) / len(sel):.3f}, "
              f"recognised {sum(r['rate'] >= 0.5 for r in sel)}/{len(sel)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
