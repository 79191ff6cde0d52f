import json
import os

import numpy as np
import pytest

from tcreloc.cli import main
from tcreloc.io import load_manifest

SCENE = "width = 160\nheight = 96\nbaseline = 0.2, 0.4\nquery_translation = 0.2\nsequences = 2\ndistractor_count = 1\n"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "scene.cfg"
    cfg.write_text(SCENE)
    out = root / "data"
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--count", "4", "--seed", "42"]) == 0
    return root, out / "manifest.jsonl"


def test_synth_zero_count_writes_valid_empty_manifest(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--count", "0"]) == 0
    m = load_manifest(str(tmp_path / "manifest.jsonl"))
    assert len(m) == 0


def test_synth_manifest(dataset):
    _, manifest = dataset
    m = load_manifest(str(manifest))
    assert [e.id for e in m.entries] == ["000000", "000001", "000002", "000003"]
    assert {(e.ref_seq, e.query_seq) for e in m.entries} == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_register_prints_trace(dataset, capsys):
    _, manifest = dataset
    assert main(["register", "--manifest", str(manifest), "--triplet", "000001"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("level iteration")
    assert len(out) == 1 + 40 + 4
    assert out[-2].startswith("E = ")


def test_self_triplet_registers_to_identity(dataset, tmp_path, capsys):
    _, manifest = dataset
    lines = open(manifest).read().splitlines()
    rec = json.loads(lines[1])
    base = os.path.dirname(str(manifest))
    rec["files"]["q"] = {"image": os.path.join(base, rec["files"]["r0"]["image"])}
    rec["gt_q_r0"] = [float(x) for x in np.eye(4).ravel()]
    for frame in ("r0", "r1"):
        rec["files"][frame] = {k: os.path.join(base, v) for k, v in rec["files"][frame].items()}
    path = tmp_path / "self.jsonl"
    path.write_text(lines[0] + "\n" + json.dumps(rec) + "\n")
    assert main(["register", "--manifest", str(path), "--triplet", rec["id"]]) == 0
    out = capsys.readouterr().out
    row = [l for l in out.splitlines() if l.startswith("T_q_r0 = ")][0]
    t = np.array([float(x) for x in row.split("=")[1].split()]).reshape(4, 4)
    assert np.max(np.abs(t - np.eye(4))) < 1e-10


def test_eval_and_determinism(dataset, tmp_path):
    _, manifest = dataset
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["eval", "--manifest", str(manifest), "--out", str(out)]) == 0
        outs.append(out)
    names = sorted(os.listdir(outs[0]))
    assert names == ["confusion_matrix.csv", "cumulative_accuracy.csv", "records.csv", "saliency_report.csv"]
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    curve = (outs[0] / "cumulative_accuracy.csv").read_text().splitlines()
    assert curve[0] == "threshold,fraction" and len(curve) == 21


def test_train_head_and_head_features(dataset, tmp_path):
    root, manifest = dataset
    cfg = root / "train.cfg"
    cfg.write_text("c_out = 2\nbatch_size = 2\ngradient = adjoint\nregistration.iterations_per_level = 1, 1, 1, 1\n")
    out = tmp_path / "run"
    assert main(["train-head", "--manifest", str(manifest), "--config", str(cfg), "--out", str(out), "--epochs", "1"]) == 0
    assert (out / "head.ckpt").exists() and (out / "loss_curve.csv").exists()
    report = tmp_path / "sal.csv"
    assert main(["saliency-report", "--manifest", str(manifest), "--features", f"head:{out / 'head.ckpt'}",
                 "--out", str(report)]) == 0
    assert report.read_text().startswith("class,level,mean,std\n")


def test_config_templates(capsys):
    assert main(["config", "registration"]) == 0
    assert "huber_gamma = 0.1" in capsys.readouterr().out


def test_exit_codes(dataset, tmp_path, capsys):
    root, manifest = dataset
    # usage errors
    assert main([]) == 1
    assert main(["synth", "--count", "1"]) == 1
    # validation errors
    assert main(["register", "--manifest", str(manifest), "--triplet", "nope"]) == 1
    assert main(["eval", "--manifest", str(tmp_path / "missing.jsonl")]) == 1
    bad = root / "bad.cfg"
    bad.write_text("widht = 3\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path), "--count", "1"]) == 1
    assert main(["register", "--manifest", str(manifest), "--triplet", "000000", "--features", "vgg"]) == 1
    # numerical failure
    strict = root / "strict.cfg"
    strict.write_text("min_valid_pixels = 1000000\n")
    assert main(["register", "--manifest", str(manifest), "--triplet", "000000", "--config", str(strict)]) == 2
    err = capsys.readouterr().err
    assert "numerical failure" in err
