"""Synthesise every planted toy concept and check recovery with the toy classifier.

    python3 scripts/toy_recovery.py --steps 300 --out out/toy_recovery
"""

import argparse
import json
import time
from pathlib import Path

from concept_lens.backend import PLANTED_CONCEPTS, ToyBackend
from concept_lens.judge import JudgeProtocol, ToyClassifierJudge, evaluate_image
from concept_lens.runner import save_image
from concept_lens.synth import toy_presets


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--layers", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/toy_recovery")
    args = ap.parse_args()

    from concept_lens.synth import synthesize

    toy = ToyBackend()
    judge = ToyClassifierJudge(toy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    t0 = time.perf_counter()
    for layer in args.layers:
        for concept in PLANTED_CONCEPTS:
            run = synthesize(concept, layer, toy, toy_presets(layer, args.steps), seed=args.seed)
            rec = evaluate_image(run.final_image, concept, None, [JudgeProtocol("open")], judge,
                                 seed=args.seed)[0]
            save_image(run.final_image, out / f"{concept}_layer{layer}.png")
            guess = max(judge.scores(run.final_image).items(), key=lambda kv: kv[1])[0]
            rows.append({"concept": concept, "layer": layer, "similarity": run.final_similarity,
                         "final_loss": run.final_loss, "rate": rec.rate, "argmax": guess})
            print(f"layer {layer} {concept:<9} cos {run.final_similarity:.3f} "
                  f"rate {rec.rate:.1f} argmax {guess}")
    elapsed = time.perf_counter() - t0
    good = sum(r["similarity"] > 0.9 and r["rate"] >= 0.5 for r in rows)
    print(f"{good}/{len(rows)} recovered in {elapsed:.0f}s")
    (out / "summary.json").write_text(json.dumps({"rows": rows, "seconds": elapsed}, indent=1))


if __name__ == "__main__":
    main()
