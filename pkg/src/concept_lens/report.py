"""Figures and summary JSON from a finished (or partial) run manifest.

Reports never recompute anything: they read the manifest, the files it
references and, for the probe kind, the stored similarity profile.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import InputError
from .judge import RecognitionRecord, recognition_curves
from .probe import SimilarityProfile
from .runner import MANIFEST_NAME, load_manifest

log = logging.getLogger(__name__)

KINDS = ("recognition", "probe", "gallery")
GALLERY_RULE = ("convention: per (category, layer) cell the image with the highest mean "
                "recognition rate is shown; ties go to the lower final loss, then to the "
                "concept name")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _manifest_and_root(manifest):
    if isinstance(manifest, dict):
        path = manifest.get("path")
        root = Path(path).parent if path else Path(".")
        return manifest, root
    path = Path(manifest)
    root = path if path.is_dir() else path.parent
    return load_manifest(path), root


def report(manifest, kind: str, out_dir=None) -> Dict[str, object]:
    """Write the ``kind`` report; returns ``{"files": [...], "gaps": [...], "data": ...}``."""
    if kind not in KINDS:
        raise InputError(f"unknown report kind {kind!r}; choose from {KINDS}")
    data, root = _manifest_and_root(manifest)
    out = Path(out_dir) if out_dir is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    return {"recognition": recognition_report, "probe": _probe_from_manifest,
            "gallery": gallery_report}[kind](data, root, out)


# -- recognition ------------------------------------------------------------

def _records(manifest) -> List[RecognitionRecord]:
    recs = []
    for entry in manifest.get("entries", {}).values():
        for r in entry.get("recognition", []):
            rec = RecognitionRecord.from_dict(r)
            rec.category = entry["category"]
            rec.layer = entry["layer"]
            recs.append(rec)
    return recs


def recognition_report(manifest: dict, root: Path, out: Path) -> dict:
    """One figure per protocol: recognition proportion vs layer, one line per category."""
    layers = list(manifest["config"]["layers"])
    categories = list(manifest["config"]["catalogue"]["categories"])
    threshold = manifest["config"].get("judge", {}).get("threshold", 0.5)
    records = _records(manifest)
    rows = recognition_curves(records, threshold=threshold) if records else []
    protocols = sorted({r["protocol"] for r in rows}) or list(
        manifest["config"].get("judge", {}).get("protocols", []))
    table = {(r["protocol"], r["category"], r["layer"]): r for r in rows}
    gaps = [{"protocol": p, "category": c, "layer": l}
            for p in protocols for c in categories for l in layers
            if (p, c, l) not in table]
    if not rows:
        gaps = [{"protocol": None, "category": c, "layer": l} for c in categories for l in layers]

    plt = _pyplot()
    files = []
    for proto in protocols:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for cat in categories:
            ys = np.array([table[(proto, cat, l)]["proportion"] if (proto, cat, l) in table
                           else math.nan for l in layers])
            lo = np.array([table[(proto, cat, l)]["ci_low"] if (proto, cat, l) in table
                           else math.nan for l in layers])
            hi = np.array([table[(proto, cat, l)]["ci_high"] if (proto, cat, l) in table
                           else math.nan for l in layers])
            if np.all(np.isnan(ys)):
                continue
            line, = ax.plot(layers, ys, marker="o", label=cat)
            ax.fill_between(layers, lo, hi, color=line.get_color(), alpha=0.2)
        ax.set_xlabel("layer")
        ax.set_ylabel("recognised fraction")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xticks(layers)
        ax.set_title(f"recognition ({proto})")
        ax.legend(fontsize="small", ncol=2)
        fig.tight_layout()
        path = out / f"recognition_{proto}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        files.append(str(path))

    summary = {"threshold": threshold, "layers": layers, "rows": rows, "gaps": gaps}
    jpath = out / "recognition.json"
    jpath.write_text(json.dumps(summary, indent=1))
    files.append(str(jpath))
    if gaps:
        log.warning("recognition report has %d empty cells", len(gaps))
    return {"files": files, "gaps": gaps, "data": summary}


# -- probe ------------------------------------------------------------------

def _probe_from_manifest(manifest: dict, root: Path, out: Path) -> dict:
    probe = manifest.get("probe")
    if not probe:
        raise InputError("manifest has no probe profile attached")
    return probe_report(SimilarityProfile.load(root / probe["profile"]), out)


def probe_report(profile: SimilarityProfile, out) -> dict:
    """Similarity-vs-layer figure per metric (shaded 95% CI) plus a JSON of p-values."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    plt = _pyplot()
    files = []
    layers = profile.layers
    gaps = []
    for metric in profile.metrics:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for (concept, corpus), recs in profile.lines(metric).items():
            have = {r.layer: r for r in recs}
            missing = [l for l in layers if l not in have]
            gaps.extend({"metric": metric, "concept": concept, "corpus": corpus, "layer": l}
                        for l in missing)
            ys = np.array([have[l].mean if l in have else math.nan for l in layers])
            lo = np.array([have[l].ci_low if l in have else math.nan for l in layers])
            hi = np.array([have[l].ci_high if l in have else math.nan for l in layers])
            style = "--" if concept != corpus else "-"
            line, = ax.plot(layers, ys, style, marker="o", ms=3, label=f"{concept} / {corpus}")
            ax.fill_between(layers, lo, hi, color=line.get_color(), alpha=0.15)
        ax.axhline(0.0, color="grey", lw=0.5)
        ax.set_xticks(layers)
        ax.set_xlabel("layer")
        ax.set_ylabel("cosine similarity")
        ax.set_title(f"concept vs image similarity ({metric})")
        ax.legend(fontsize="x-small", ncol=2)
        fig.tight_layout()
        path = out / f"probe_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        files.append(str(path))
    jpath = out / "probe_pvalues.json"
    jpath.write_text(json.dumps({"p_values": profile.p_values, "gaps": gaps}, indent=1))
    files.append(str(jpath))
    return {"files": files, "gaps": gaps, "data": {"p_values": profile.p_values}}


# -- gallery ----------------------------------------------------------------

def _mean_rate(entry) -> Optional[float]:
    rates = [RecognitionRecord.from_dict(r).rate for r in entry.get("recognition", [])]
    rates = [r for r in rates if r is not None]
    return float(np.mean(rates)) if rates else None


def select_best(entries) -> Optional[dict]:
    """Highest mean recognition rate; ties (and unjudged images) by lower final loss, then name."""
    done = [e for e in entries if e.get("status") == "completed"]
    if not done:
        return None

    def rank(e):
        rate = _mean_rate(e)
        return (-(rate if rate is not None else -1.0), e.get("final_loss", math.inf), e["concept"])

    return min(done, key=rank)


def gallery_report(manifest: dict, root: Path, out: Path, thumb: int = 96) -> dict:
    """Contact sheet: categories as rows, layers as columns."""
    from PIL import Image, ImageDraw

    layers = list(manifest["config"]["layers"])
    categories = list(manifest["config"]["catalogue"]["categories"])
    cells: Dict[tuple, list] = {}
    for e in manifest.get("entries", {}).values():
        cells.setdefault((e["category"], e["layer"]), []).append(e)

    label_w, label_h = 120, 16
    sheet = Image.new("RGB", (label_w + thumb * len(layers), label_h + thumb * len(categories)),
                      (255, 255, 255))
    draw = ImageDraw.Draw(sheet)
    for j, layer in enumerate(layers):
        draw.text((label_w + j * thumb + 4, 2), f"layer {layer}", fill=(0, 0, 0))
    picks, gaps = [], []
    for i, cat in enumerate(categories):
        y = label_h + i * thumb
        draw.text((4, y + thumb // 2 - 6), cat[:18], fill=(0, 0, 0))
        for j, layer in enumerate(layers):
            x = label_w + j * thumb
            best = select_best(cells.get((cat, layer), []))
            if best is None or not (root / best["image"]).exists():
                gaps.append({"category": cat, "layer": layer})
                draw.rectangle([x + 1, y + 1, x + thumb - 2, y + thumb - 2], outline=(200, 0, 0))
                draw.text((x + 8, y + thumb // 2 - 6), "missing", fill=(200, 0, 0))
                continue
            with Image.open(root / best["image"]) as im:
                sheet.paste(im.convert("RGB").resize((thumb, thumb), Image.BILINEAR), (x, y))
            picks.append({"category": cat, "layer": layer, "concept": best["concept"],
                          "image": best["image"], "recognition_rate": _mean_rate(best),
                          "final_loss": best.get("final_loss")})
    path = out / "gallery.png"
    sheet.save(path)
    summary = {"selection_rule": GALLERY_RULE, "picks": picks, "gaps": gaps}
    jpath = out / "gallery.json"
    jpath.write_text(json.dumps(summary, indent=1))
    return {"files": [str(path), str(jpath)], "gaps": gaps, "data": summary}
