import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from concept_lens import cli, runner
from concept_lens.errors import InputError
from concept_lens.report import GALLERY_RULE, report, select_best
from concept_lens.runner import (ExperimentConfig, JudgeSettings, load_config, pair_seed,
                                 resolve_config, run_sweep, strip_timestamps, validate_manifest)

GOLDEN = Path(__file__).parent / "golden"


def _catalogue(tmp_path, body='fruit = ["apple", "orange"]\n[hints]\nfruit = "fruit"\n'):
    path = tmp_path / "cat.toml"
    path.write_text(body)
    return str(path)


def _toy_config(tmp_path, **kw):
    base = dict(backend="toy", preset="toy", layers=[0, 2], catalogue=_catalogue(tmp_path),
                optimizer={"steps": 4}, output_dir=str(tmp_path / "out"), run_id="r")
    base.update(kw)
    return ExperimentConfig(**base)


def test_default_layers():
    assert ExperimentConfig().layers == [1, 5, 10, 15, 20, 25, 30]


def test_print_config_matches_golden(capsys):
    assert cli.main(["sweep", "--print-config"]) == 0
    out = capsys.readouterr().out
    assert out == (GOLDEN / "print_config_default.json").read_text()


def test_golden_holds_full_scale_parameters():
    d = json.loads((GOLDEN / "print_config_default.json").read_text())
    assert d["backend"]["image_resolution"] == 448
    assert d["stack_resolutions"] == list(range(448, 7, -20)) and len(d["stack_resolutions"]) == 23
    for layer, cfg in d["synthesis"].items():
        o, a = cfg["optimizer"], cfg["augmentation"]
        assert (a["max_shift"], a["noise_sigma"]) == (56, 0.1)
        assert (o["momentum"], o["steps"], o["batch_size"], o["grad_clip_norm"]) == (0.9, 600, 8, 1.0)
        assert o["sigma_schedule"] == [2.0, 16.0]
        expected = (0.15, 0.5) if int(layer) in (10, 15, 20, 25) else (0.04, 0.005)
        assert (o["learning_rate"], o["temperature"]) == expected


def test_toml_config_with_layer_overrides(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        'backend = "toy"\npreset = "toy"\nlayers = [0, 3]\nseed = 7\n'
        'catalogue = "bundled:toy_catalogue"\n'
        '[optimizer]\nsteps = 50\n'
        '[layer_overrides.3]\nlearning_rate = 0.5\nmax_shift = 0\n')
    cfg = load_config(path)
    resolved = resolve_config(cfg)
    assert resolved["synthesis"]["0"]["optimizer"]["learning_rate"] == 0.15
    assert resolved["synthesis"]["3"]["optimizer"]["learning_rate"] == 0.5
    assert resolved["synthesis"]["3"]["augmentation"]["max_shift"] == 0
    assert all(resolved["synthesis"][k]["optimizer"]["steps"] == 50 for k in ("0", "3"))
    assert resolved["seed"] == 7


@pytest.mark.parametrize("body", [
    'layers = [0]\n[layer_overrides.2]\nlearning_rate = 0.1\n',
    'layers = [0]\n[layer_overrides.0]\nwarp = 1\n',
    'colour = "red"\n',
    'layers = [0\n',
])
def test_invalid_config(tmp_path, body):
    path = tmp_path / "exp.toml"
    path.write_text('backend = "toy"\n' + body)
    with pytest.raises(InputError):
        resolve_config(load_config(path))


def test_unknown_category(tmp_path):
    with pytest.raises(InputError):
        resolve_config(_toy_config(tmp_path, categories=["vegetables"]))


def test_layer_out_of_range(tmp_path):
    with pytest.raises(IndexError):
        resolve_config(_toy_config(tmp_path, layers=[0, 9]))


def test_pair_seed_is_stable():
    assert pair_seed(0, "apple", 1) == pair_seed(0, "apple", 1)
    assert len({pair_seed(0, "apple", l) for l in range(10)}) == 10
    assert pair_seed(0, "apple", 1) != pair_seed(1, "apple", 1)


def test_sweep_counting_contract(tmp_path):
    manifest = run_sweep(_toy_config(tmp_path))
    root = tmp_path / "out" / "r"
    assert len(list(root.rglob("image.png"))) == 4
    assert len(list(root.rglob("trajectory.json"))) == 4
    assert len(list(root.rglob("manifest.json"))) == 1
    assert manifest["complete"] is True
    assert list(manifest["entries"]) == ["fruit/apple/layer0", "fruit/orange/layer0",
                                         "fruit/apple/layer2", "fruit/orange/layer2"]
    assert validate_manifest(root) == []


def test_config_echo(tmp_path):
    manifest = run_sweep(_toy_config(tmp_path, layers=[1]))
    root = tmp_path / "out" / "r"
    for entry in manifest["entries"].values():
        assert entry["seed"] == pair_seed(0, entry["concept"], entry["layer"])
        traj = json.loads((root / entry["trajectory"]).read_text())
        assert traj["config"] == entry["synthesis"] == manifest["config"]["synthesis"]["1"]
        assert len(traj["loss"]) == entry["synthesis"]["optimizer"]["steps"]
        assert traj["seed"] == entry["seed"]


def test_resume_skips_completed(tmp_path, monkeypatch):
    cfg = _toy_config(tmp_path)
    real = runner._run_pair
    calls = []

    def interrupted(*args):
        if len(calls) == 2:
            raise KeyboardInterrupt
        calls.append(args[3:])
        return real(*args)

    monkeypatch.setattr(runner, "_run_pair", interrupted)
    with pytest.raises(KeyboardInterrupt):
        run_sweep(cfg)
    mpath = tmp_path / "out" / "r" / "manifest.json"
    first = json.loads(mpath.read_text())["entries"]
    assert len(first) == 2

    calls.clear()
    monkeypatch.setattr(runner, "_run_pair", lambda *a: (calls.append(a[3:]), real(*a))[1])
    manifest = run_sweep(cfg)
    assert len(calls) == 2
    for key, entry in first.items():
        assert manifest["entries"][key] == entry
    assert manifest["complete"]


def test_pair_failure_is_recorded(tmp_path, monkeypatch, capsys):
    real = runner.synthesize

    def flaky(target, *a, **k):
        if target.concept == "orange":
            raise RuntimeError("simulated crash")
        return real(target, *a, **k)

    monkeypatch.setattr(runner, "synthesize", flaky)
    manifest = run_sweep(_toy_config(tmp_path, layers=[0]))
    status = {k: e["status"] for k, e in manifest["entries"].items()}
    assert status == {"fruit/apple/layer0": "completed", "fruit/orange/layer0": "failed"}
    assert "simulated crash" in manifest["entries"]["fruit/orange/layer0"]["error"]
    assert manifest["complete"] is False
    assert validate_manifest(tmp_path / "out" / "r") == []


def test_determinism_modulo_timestamps(tmp_path):
    cfg = _toy_config(tmp_path)
    a = strip_timestamps(run_sweep(cfg))
    shutil.rmtree(tmp_path / "out")
    b = strip_timestamps(run_sweep(cfg))
    assert a == b


def test_worker_pool_matches_serial(tmp_path):
    serial = strip_timestamps(run_sweep(_toy_config(tmp_path)))
    shutil.rmtree(tmp_path / "out")
    pooled = run_sweep(_toy_config(tmp_path, workers=2))
    pooled = strip_timestamps(pooled)
    pooled["config"]["workers"] = serial["config"]["workers"]
    assert pooled == serial


def test_changed_config_refuses_resume(tmp_path):
    run_sweep(_toy_config(tmp_path, layers=[0]))
    with pytest.raises(InputError):
        run_sweep(_toy_config(tmp_path, layers=[0], seed=3))


def test_validate_reports_problems(tmp_path):
    run_sweep(_toy_config(tmp_path, layers=[0]))
    root = tmp_path / "out" / "r"
    (root / "fruit" / "apple" / "layer0" / "image.png").unlink()
    m = json.loads((root / "manifest.json").read_text())
    m["entries"]["fruit/orange/layer0"]["layer"] = "zero"
    (root / "manifest.json").write_text(json.dumps(m))
    problems = validate_manifest(root)
    assert any(p.startswith("missing file: fruit/apple/layer0/image.png") for p in problems)
    assert any(p.startswith("schema:") for p in problems)


def test_sweep_with_offline_judge(tmp_path):
    cfg = _toy_config(tmp_path, layers=[0], judge=JudgeSettings(enabled=True, samples=3))
    manifest = run_sweep(cfg)
    for entry in manifest["entries"].values():
        recs = entry["recognition"]
        assert [r["protocol"]["kind"] for r in recs] == ["open", "hinted"]
        assert all(len(r["raw_responses"]) == 3 for r in recs)
        assert recs[1]["question"].startswith("What fruit is in the image")
        assert recs[0]["category"] == "fruit"
    assert validate_manifest(tmp_path / "out" / "r") == []


# -- reports ------------------------------------------------------------------

def _fake_manifest(tmp_path, layers, entries):
    root = tmp_path / "run"
    root.mkdir(exist_ok=True)
    from PIL import Image

    for e in entries:
        path = root / e["image"]
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.new("RGB", (64, 64), (int(255 * e["final_loss"] ** 2) % 256, 0, 0)).save(path)
    m = {"schema_version": 1, "run_id": "fake",
         "config": {"layers": layers, "seed": 0, "backend": {}, "synthesis": {},
                    "catalogue": {"categories": {"animals": []}},
                    "judge": {"threshold": 0.5, "protocols": ["open"]}},
         "entries": {e["key"]: e for e in entries}}
    (root / "manifest.json").write_text(json.dumps(m))
    return root


def _entry(concept, layer, rate_verdicts, loss):
    key = f"animals/{concept}/layer{layer}"
    rec = {"image_id": key, "concept": concept,
           "protocol": {"kind": "open", "category": None, "samples_per_image": len(rate_verdicts),
                        "wording": "guess"},
           "question": "q", "raw_responses": ["x"] * len(rate_verdicts),
           "verdicts": rate_verdicts, "category": "animals", "layer": layer, "errors": []}
    return {"key": key, "category": "animals", "concept": concept, "layer": layer, "seed": 0,
            "status": "completed", "image": f"{key}/image.png",
            "trajectory": f"{key}/trajectory.json", "final_loss": loss, "recognition": [rec]}


def test_recognition_report_one_line_seven_points(tmp_path):
    layers = [1, 5, 10, 15, 20, 25, 30]
    entries = [_entry(c, l, [1, 1, 0] if c == "cat" else [0, 0, 1], -0.5)
               for c in ("cat", "dog") for l in layers]
    root = _fake_manifest(tmp_path, layers, entries)
    result = report(root / "manifest.json", "recognition")
    rows = result["data"]["rows"]
    assert [r["layer"] for r in rows] == layers
    assert {r["category"] for r in rows} == {"animals"}
    assert all(r["proportion"] == 0.5 and r["n"] == 2 for r in rows)
    assert result["gaps"] == []
    assert any(f.endswith("recognition_open.png") for f in result["files"])


def test_recognition_report_marks_gaps(tmp_path):
    entries = [_entry("cat", 1, [1], -0.5)]
    root = _fake_manifest(tmp_path, [1, 5], entries)
    result = report(root, "recognition")
    assert result["gaps"] == [{"protocol": "open", "category": "animals", "layer": 5}]


def test_gallery_tie_break(tmp_path):
    entries = [_entry("cat", 1, [1, 0], -0.2), _entry("dog", 1, [0, 1], -0.7),
               _entry("eel", 1, [0, 0], -0.99),
               _entry("cat", 5, [1, 1], -0.1), _entry("dog", 5, [1, 0], -0.9)]
    # layer 1: cat and dog tie at 0.5; dog has the lower loss. eel has the lowest loss but rate 0.
    assert select_best([e for e in entries if e["layer"] == 1])["concept"] == "dog"
    assert select_best([e for e in entries if e["layer"] == 5])["concept"] == "cat"
    tie = [_entry("b", 1, [1], -0.5), _entry("a", 1, [1], -0.5)]
    assert select_best(tie)["concept"] == "a"
    root = _fake_manifest(tmp_path, [1, 5, 10], entries)
    result = report(root, "gallery")
    picks = {(p["layer"]): p["concept"] for p in result["data"]["picks"]}
    assert picks == {1: "dog", 5: "cat"}
    assert result["data"]["selection_rule"] == GALLERY_RULE and "convention" in GALLERY_RULE
    assert result["gaps"] == [{"category": "animals", "layer": 10}]
    assert Path(result["files"][0]).exists()


def test_probe_report_from_manifest(tmp_path):
    cfg = _toy_config(tmp_path, layers=[0])
    run_sweep(cfg)
    root = tmp_path / "out" / "r"
    code = cli.main(["probe", "--concepts", "apple,orange", "--toy-corpora", "10", "--noise",
                     "10", "--layers", "0,1", "--iterations", "500", "--out",
                     str(root / "probe"), "--manifest", str(root)])
    assert code == 0
    assert validate_manifest(root) == []
    result = report(root, "probe")
    pv = json.loads(Path(result["files"][-1]).read_text())["p_values"]
    assert len(pv) == 2 * 2 * 2
    for row in pv:
        assert row["matched_mean"] > row["mismatched_mean"] and row["p_value"] < 0.01


def test_report_without_probe(tmp_path):
    run_sweep(_toy_config(tmp_path, layers=[0]))
    with pytest.raises(InputError):
        report(tmp_path / "out" / "r", "probe")


# -- CLI ----------------------------------------------------------------------

def test_cli_extract(tmp_path):
    out = tmp_path / "v.json"
    assert cli.main(["extract", "--concepts", "apple,frog", "--layers", "0,3", "--out",
                     str(out)]) == 0
    data = json.loads(out.read_text())
    assert [(v["concept"], v["layer"]) for v in data["vectors"]] == [
        ("apple", 0), ("frog", 0), ("apple", 3), ("frog", 3)]


def test_cli_synthesize(tmp_path, capsys):
    out = tmp_path / "s"
    assert cli.main(["synthesize", "--concept", "bee", "--layer", "1", "--steps", "6", "--lr",
                     "0.2", "--tau", "0.4", "--seed", "2", "--snapshot-every", "3",
                     "--out", str(out)]) == 0
    traj = json.loads((out / "trajectory.json").read_text())
    assert traj["config"]["optimizer"]["learning_rate"] == 0.2
    assert traj["config"]["optimizer"]["temperature"] == 0.4
    assert len(traj["loss"]) == 6 and traj["seed"] == 2
    assert sorted(p.name for p in out.glob("*.png")) == ["image.png", "snapshot_00003.png",
                                                        "snapshot_00006.png"]


def test_cli_sweep_judge_report(tmp_path, capsys):
    cat = _catalogue(tmp_path)
    out = tmp_path / "o"
    args = ["sweep", "--backend", "toy", "--preset", "toy", "--catalogue", cat, "--layers", "0",
            "--steps", "3", "--out", str(out), "--run-id", "cli"]
    assert cli.main(args) == 0
    assert cli.main(["judge", "--images", str(out / "cli"), "--samples", "2"]) == 0
    m = json.loads((out / "cli" / "manifest.json").read_text())
    assert all(len(e["recognition"]) == 2 for e in m["entries"].values())
    for kind in ("recognition", "gallery"):
        assert cli.main(["report", "--manifest", str(out / "cli"), "--kind", kind]) == 0


def test_cli_judge_loose_images(tmp_path):
    from concept_lens.backend import ToyBackend
    from concept_lens.runner import save_image

    toy = ToyBackend()
    g = np.random.default_rng(0)
    for concept in ("apple", "lion"):
        save_image(toy.render_concept_image(concept, g), tmp_path / f"{concept}.png")
    assert cli.main(["judge", "--images", str(tmp_path), "--samples", "3", "--protocol",
                     "open", "--catalogue", "bundled:toy_catalogue"]) == 0
    data = json.loads((tmp_path / "recognition.json").read_text())
    assert {r["concept"] for r in data["records"]} == {"apple", "lion"}
    assert all(r["rate"] == 1.0 for r in data["records"])


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    assert cli.main(["extract", "--concepts", "apple", "--layers", "7"]) != 0
    assert cli.main(["synthesize", "--concept", "bee", "--layer", "0", "--steps", "0",
                     "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err

    def broken(target, *a, **k):
        raise RuntimeError("nope")

    monkeypatch.setattr(runner, "synthesize", broken)
    assert cli.main(["sweep", "--backend", "toy", "--preset", "toy", "--catalogue",
                     _catalogue(tmp_path), "--layers", "0", "--out", str(tmp_path / "o")]) == 1
