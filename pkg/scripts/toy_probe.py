"""Layer-wise similarity of apple/orange directions with toy corpora and a noise control.

    python3 scripts/toy_probe.py --images 20 --out out/toy_probe
"""

import argparse
from pathlib import Path

from concept_lens.backend import ToyBackend
from concept_lens.probe import ImageCorpus, profile
from concept_lens.report import probe_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=20, help="images per corpus")
    ap.add_argument("--iterations", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/toy_probe")
    args = ap.parse_args()

    toy = ToyBackend()
    corpora = [ImageCorpus.toy_concept(toy, "apple", args.images, seed=args.seed + 1),
               ImageCorpus.toy_concept(toy, "orange", args.images, seed=args.seed + 2),
               ImageCorpus.noise(args.images, 64, seed=args.seed + 3)]
    prof = profile(toy, ["apple", "orange"], corpora, range(toy.describe().layer_count),
                   iterations=args.iterations, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prof.save(out / "profile.json")
    for f in probe_report(prof, out)["files"]:
        print("wrote", f)
    for r in prof.p_values:
        print(f"layer {r['layer']} {r['concept']:<7} {r['metric']:<9} "
              f"{r['matched_mean']:+.3f} vs {r['mismatched_mean']:+.3f}  p={r['p_value']:.1e}")


if __name__ == "__main__":
    main()
