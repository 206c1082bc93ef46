import json
import struct
import subprocess
import sys

import pytest

from specret.artifacts import bundle_shapes
from specret.cli import main
from specret.training import LOSS_KEYS, read_report

CFG = {
    "seed": 1,
    "synth": {"n_cubes": 3, "cube_width": 8, "cube_height": 8, "n_bands": 16, "library_size": 8},
    "aux": {"propnet": {"epochs": 3, "set_size": 20, "sets_per_cube": 2},
            "bgnet": {"epochs": 3, "set_size": 20, "sets_per_cube": 2}},
    "train": {"epochs": 3, "d_z": 4, "batch_size": 16},
    "infer": {"max_pixels": 2},
}


def write_cfg(path, **changes):
    doc = json.loads(json.dumps(CFG))
    for block, vals in changes.items():
        if isinstance(vals, dict):
            doc.setdefault(block, {}).update(vals)
        else:
            doc[block] = vals
    path.write_text(json.dumps(doc))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(root / "cfg.json")
    out = root / "out"
    for cmd in ("synth", "train-aux", "train", "infer", "match", "hitrate"):
        assert run(cmd, "--config", cfg, "--out", out) == 0, cmd
    return cfg, out


def test_synth_is_deterministic(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert run("synth", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("synth", "--config", cfg, "--out", tmp_path / "b") == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert run("synth", "--config", cfg, "--seed", "2", "--out", tmp_path / "c") == 0
    assert (tmp_path / "c/cubes/cube-000.hsic").read_bytes() != (tmp_path / "a/cubes/cube-000.hsic").read_bytes()


def test_synth_zero_cubes(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", synth={"n_cubes": 0})
    assert run("synth", "--config", cfg, "--out", tmp_path) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["n_cubes"] == 0 and (tmp_path / "library.json").exists()


def test_default_band_count_in_header(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", synth={"n_cubes": 1, "n_bands": 32})
    doc = json.loads(cfg.read_text())
    del doc["synth"]["n_bands"]
    cfg.write_text(json.dumps(doc))
    assert run("synth", "--config", cfg, "--out", tmp_path) == 0
    head = (tmp_path / "cubes/cube-000.hsic").read_bytes()[:34]
    magic, version, w, h, r, lo, hi = struct.unpack("<4sHIIIdd", head)
    assert magic == b"HSIC" and r == 32 and (w, h) == (8, 8) and (lo, hi) == (7.56, 13.16)


def test_train_report_has_every_epoch_and_loss(pipeline):
    _, out = pipeline
    rep = read_report(out / "epsnet.report.jsonl")
    assert [r["epoch"] for r in rep] == [0, 1, 2]
    for r in rep:
        assert set(r["train"]) == set(LOSS_KEYS)


def test_epochs_flag_overrides(pipeline, tmp_path):
    cfg, out = pipeline
    model = tmp_path / "e.ckpt"
    cfg2 = write_cfg(tmp_path / "c.json", paths={"data": str(out), "aux": str(out), "model": str(model)})
    assert run("train", "--config", cfg2, "--epochs", "2", "--out", tmp_path) == 0
    assert len(read_report(tmp_path / "e.report.jsonl")) == 2
    assert run("train", "--config", cfg2, "--epochs", "0", "--out", tmp_path) == 2


def test_interrupted_run_resumes_bit_exact(pipeline, tmp_path):
    _, out = pipeline
    paths = {"data": str(out), "aux": str(out), "model": str(tmp_path / "r.ckpt")}
    cfg = write_cfg(tmp_path / "c.json", paths=paths)
    assert run("train", "--config", cfg, "--stop-after", "2", "--out", tmp_path) == 0
    assert len(read_report(tmp_path / "r.report.jsonl")) == 2
    cfg_r = write_cfg(tmp_path / "cr.json", paths=paths, train={"resume": True})
    assert run("train", "--config", cfg_r, "--out", tmp_path) == 0
    assert (tmp_path / "r.ckpt").read_bytes() == (out / "epsnet.ckpt").read_bytes()
    assert (tmp_path / "r.report.jsonl").read_bytes() == (out / "epsnet.report.jsonl").read_bytes()


def test_resume_rejects_other_config(pipeline, tmp_path):
    _, out = pipeline
    paths = {"data": str(out), "aux": str(out), "model": str(tmp_path / "r.ckpt")}
    cfg = write_cfg(tmp_path / "c.json", paths=paths)
    assert run("train", "--config", cfg, "--stop-after", "1", "--out", tmp_path) == 0
    other = write_cfg(tmp_path / "o.json", paths=paths, train={"resume": True, "lr": 5e-4})
    assert run("train", "--config", other, "--out", tmp_path) == 2


def test_missing_aux_models_exit_2(pipeline, tmp_path):
    _, out = pipeline
    cfg = write_cfg(tmp_path / "c.json", paths={"data": str(out), "aux": str(tmp_path / "none")})
    assert run("train", "--config", cfg, "--out", tmp_path) == 2
    assert run("train", "--config", cfg, "--unconditioned", "--out", tmp_path) == 0
    assert (tmp_path / "epsnet-uncond.ckpt").exists()


def test_missing_data_and_bad_config_exit_2(tmp_path):
    assert run("train", "--out", tmp_path / "empty") == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synth": {"n_cubes": 1, "colour": "red"}}))
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path) == 2


def test_infer_bundle_shapes(pipeline):
    _, out = pipeline
    shapes = bundle_shapes(out / "bundle.bin")
    assert shapes and all(s == (1280, 16) for s in shapes)
    assert len(shapes) == 6  # two pixels on each of three cubes


def test_hitrate_reaches_one_at_library_size(pipeline):
    _, out = pipeline
    doc = json.loads((out / "hitrate.json").read_text())
    assert doc["format"] == "specret-hitrate"
    for curve in doc["curves"]:
        ks = curve["k_values"]
        for v, rates in curve["hit_rate"].items():
            assert all(b >= a for a, b in zip(rates, rates[1:]))
            assert all(r == 1.0 for k, r in zip(ks, rates) if k >= 8), v


def test_version_mismatch_rejected(pipeline, tmp_path):
    cfg, out = pipeline
    doc = json.loads((out / "scorecards.json").read_text())
    doc["version"] = 99
    bad = tmp_path / "sc.json"
    bad.write_text(json.dumps(doc))
    cfg2 = write_cfg(tmp_path / "c.json", paths={"scorecards": str(bad)})
    assert run("hitrate", "--config", cfg2, "--out", tmp_path) == 2


def test_match_scorecards_cover_every_query(pipeline):
    _, out = pipeline
    doc = json.loads((out / "scorecards.json").read_text())
    assert len(doc["cards"]) == 6
    for card in doc["cards"]:
        assert len(card["MD"]["ranked"]) == 8 and {"L2", "CD"} <= set(card)


def test_gradcheck_exit_codes(tmp_path):
    assert run("gradcheck", "--out", tmp_path) == 0
    assert run("gradcheck", "--inject-fault", "--out", tmp_path) == 3


def test_selftest_and_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "specret.cli", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "FAIL" not in proc.stderr and json.loads(proc.stdout)
