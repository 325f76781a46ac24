import json

import numpy as np
import pytest

from conftest import TINY
from texmesh.cli import main
from texmesh.dataio import read_jsonl, read_manifest
from texmesh.mesh_io import read_obj


def _sets(**extra):
    out = []
    for k, v in {**TINY, **extra}.items():
        out += ["--set", f"{k}={v}"]
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    s = _sets(epochs=1)
    assert main(["synth", "--out", str(root / "data"), "--n-per-class", "2", "--seed", "3", *s]) == 0
    assert main(["fit-shapes", "--out", str(root / "shapes"), *s]) == 0
    assert main(["train", "--out", str(root / "train"), "--manifest", str(root / "data/manifest.jsonl"),
                 "--model", str(root / "shapes/model.npz"), *s]) == 0
    assert main(["infer", "--out", str(root / "pred"), "--manifest", str(root / "data/manifest.jsonl"),
                 "--model", str(root / "train/model.npz"), "--limit", "2", *s]) == 0
    return root


def test_pipeline_outputs(pipeline):
    header = json.loads((pipeline / "train/train_run.json").read_text())
    assert {"config_hash", "seed", "torch", "numpy"} <= set(header)
    preds = read_jsonl(pipeline / "pred/predictions.jsonl")
    assert len(preds) == 2 and len(preds[0]["class_losses"]) == 3
    assert np.allclose(np.asarray(preds[0]["rotation"]) @ np.asarray(preds[0]["rotation"]).T, np.eye(3),
                       atol=1e-9)
    mesh = read_obj(pipeline / "pred" / preds[0]["mesh"])
    assert len(mesh.vertices) == 10 * 4 ** TINY["template_level"] + 2
    assert (pipeline / "pred" / preds[0]["mask"]).exists()


def test_eval_writes_metrics(pipeline, capsys):
    assert main(["eval", "--out", str(pipeline / "eval"), "--manifest", str(pipeline / "data/manifest.jsonl"),
                 "--predictions", str(pipeline / "pred/predictions.jsonl")]) == 0
    text = (pipeline / "eval/metrics.csv").read_text()
    assert text.startswith("level,n,acc_pi_6") and "\nall,2," in text
    assert "without predictions" in capsys.readouterr().err


def test_single_class_infer_skips_classification(pipeline):
    out = pipeline / "pred1"
    assert main(["infer", "--out", str(out), "--manifest", str(pipeline / "data/manifest.jsonl"),
                 "--model", str(pipeline / "train/model.npz"), "--limit", "1", "--classes", "spindle"]) == 0
    (rec,) = read_jsonl(out / "predictions.jsonl")
    assert rec["class"] == "spindle" and "class_losses" not in rec


def test_eval_identity_is_perfect(pipeline, tmp_path):
    recs = read_manifest(pipeline / "data/manifest.jsonl")
    rows = []
    for r in recs:
        rows.append({"id": r.id, "class": r.cls, "azimuth": np.degrees(r.azimuth),
                     "elevation": np.degrees(r.elevation), "theta": np.degrees(r.theta),
                     "mask": r.mask, "visible_mask": r.visible_mask})
    (tmp_path / "p.jsonl").write_text("".join(json.dumps(x) + "\n" for x in rows))
    assert main(["eval", "--out", str(tmp_path / "e"), "--manifest", str(pipeline / "data/manifest.jsonl"),
                 "--predictions", str(tmp_path / "p.jsonl")]) == 0
    row = (tmp_path / "e/metrics.csv").read_text().splitlines()[1].split(",")
    assert row[:4] == ["all", str(len(recs)), "1.000000", "1.000000"]
    assert row[5:7] == ["1.000000", "1.000000"] and row[-1] == "1.000000"


def test_invalid_key_exits_2(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "no_such_key=1"]) == 2
    assert "no_such_key" in capsys.readouterr().err
