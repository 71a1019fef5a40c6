import csv
import hashlib
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from hkrm import knowledge_graphs as kg
from hkrm.cli import main
from hkrm.runs import load_metrics

from oracles import attribute_graph, relationship_graph, tally


def digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One small training run shared by the tests that only read its outputs."""
    root = tmp_path_factory.mktemp("run")
    config = os.path.join(os.path.dirname(__file__), "fixtures", "small_run.toml")
    out = root / "out"
    assert main(["train", "--config", config, "--out", str(out)]) == 0
    return out


def test_no_arguments_prints_help_and_exits_1(capsys):
    assert main([]) == 1
    assert "build-graph" in capsys.readouterr().err


def test_unknown_flag_exits_1(capsys):
    assert main(["train", "--nope"]) == 1


def test_version(capsys):
    assert main(["--version"]) == 0
    out = capsys.readouterr().out
    assert "hkrm" in out and "graph" in out


def test_console_script_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hkrm.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout


@pytest.mark.parametrize("kind", ["attribute", "relationship"])
def test_build_graph_matches_golden_file(tmp_path, fixture_path, kind):
    out = tmp_path / f"{kind}.graph"
    csv_out = tmp_path / f"{kind}.csv"
    args = ["build-graph", "--annotations", fixture_path("annotations50.ndjson"), "--kind", kind]
    assert main(args + ["--out", str(out), "--csv", str(csv_out)]) == 0
    golden = fixture_path(f"annotations50_{kind}.graph")
    assert digest(out) == digest(golden)
    # the golden file itself agrees with the brute-force oracle
    graph = kg.load_graph(golden)
    counts, triples = tally(fixture_path("annotations50.ndjson"))
    if kind == "attribute":
        with open(fixture_path("annotations50.ndjson")) as fh:
            table, _ = kg.ingest_annotations(fh.readlines())
        oracle = attribute_graph(counts, table.class_names, table.attribute_names)
    else:
        oracle = relationship_graph(triples, graph.class_names)
    np.testing.assert_allclose(graph.edges, oracle, rtol=0, atol=1e-9)
    with open(csv_out) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == len(graph.class_names) + 1


def test_build_graph_does_not_modify_its_input(tmp_path, fixture_path):
    src = tmp_path / "ann.ndjson"
    shutil.copy(fixture_path("annotations50.ndjson"), src)
    before = digest(src)
    assert main(["build-graph", "--annotations", str(src), "--kind", "attribute", "--out", str(tmp_path / "g")]) == 0
    assert digest(src) == before


def test_bad_annotations_exit_2(tmp_path, fixture_path, capsys):
    bad = tmp_path / "bad.ndjson"
    with open(fixture_path("annotations50.ndjson")) as fh:
        first = fh.readline()
    bad.write_text(first + "not json\n")
    assert main(["build-graph", "--annotations", str(bad), "--kind", "attribute", "--out", str(tmp_path / "g")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_annotations_exit_2(tmp_path):
    args = ["build-graph", "--annotations", str(tmp_path / "absent"), "--kind", "attribute", "--out", str(tmp_path / "g")]
    assert main(args) == 2


def test_invalid_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[implicit]\nnum_graphs = 0\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "implicit.num_graphs" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(tmp_path, fixture_path):
    cfg = tmp_path / "diverge.toml"
    text = open(fixture_path("small_run.toml")).read().split("[train]")[0]
    cfg.write_text(
        text + "[train]\nepochs = 3\nbaseline_epochs = 0\ntrain_scenes = 6\nannotation_scenes = 40\n"
        "learning_rate = 1e6\ngrad_clip = 0.0\nmomentum = 0.0\n"
    )
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 3
    assert (out / "last_good.ckpt").exists()


def test_train_outputs_and_eval_agree(trained, tmp_path):
    assert {"model.ckpt", "metrics.json", "metrics.csv", "epoch000.ckpt", "epoch001.ckpt"} <= set(os.listdir(trained))
    doc = load_metrics(trained / "metrics.json")
    out = tmp_path / "eval.json"
    args = ["eval", "--model", str(trained / "model.ckpt"), "--scenes", str(doc["eval_scenes"])]
    assert main(args + ["--seed", str(doc["eval_seed"]), "--out", str(out)]) == 0
    with open(out) as fh:
        assert json.load(fh) == doc["final"]


def test_eval_to_stdout(trained, capsys):
    assert main(["eval", "--model", str(trained / "model.ckpt"), "--scenes", "2", "--seed", "9"]) == 0
    assert json.loads(capsys.readouterr().out)["num_regions"] > 0


def test_eval_does_not_modify_the_checkpoint(trained):
    before = digest(trained / "model.ckpt")
    assert main(["eval", "--model", str(trained / "model.ckpt"), "--scenes", "1", "--seed", "0"]) == 0
    assert digest(trained / "model.ckpt") == before


def test_training_via_cli_is_deterministic(trained, tmp_path, fixture_path):
    out = tmp_path / "again"
    assert main(["train", "--config", fixture_path("small_run.toml"), "--out", str(out), "--jobs", "2"]) == 0
    for name in ("metrics.json", "model.ckpt", "metrics.csv"):
        assert digest(out / name) == digest(trained / name)


def test_json_logs_are_one_object_per_line(tmp_path, fixture_path, capsys):
    args = ["train", "--config", fixture_path("small_run.toml"), "--ablation", "baseline", "--out", str(tmp_path / "o")]
    assert main(args + ["--log", "json"]) == 0
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.strip()]
    assert lines
    records = [json.loads(ln) for ln in lines]
    assert all("level" in r and "message" in r for r in records)
    assert any(r["message"] == "epoch done" and "train_loss" in r for r in records)


def test_inspect_edges_explicit_and_implicit(trained, tmp_path):
    out = tmp_path / "edges"
    model = str(trained / "model.ckpt")
    assert main(["inspect-edges", "--model", model, "--scenes", "2", "--out", str(out)]) == 0
    assert main(["inspect-edges", "--model", model, "--module", "implicit", "--out", str(out)]) == 0
    names = set(os.listdir(out))
    assert {"scene000_attr_pred.csv", "scene000_attr_adj.csv", "scene000_attr_target.csv"} <= names
    assert {"scene001_attr_pred.csv", "scene000_implicit_graph0.csv", "scene000_implicit_graph1.csv"} <= names
    assert "scene000_implicit_average.csv" in names
    with open(out / "scene000_attr_adj.csv") as fh:
        rows = list(csv.reader(fh))
    adj = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    np.testing.assert_allclose(adj.sum(axis=1)[adj.sum(axis=1) > 0], 1.0, atol=1e-9)


def test_inspect_edges_missing_branch_exits_2(tmp_path, fixture_path):
    out = tmp_path / "o"
    args = ["train", "--config", fixture_path("small_run.toml"), "--ablation", "attr", "--out", str(out)]
    assert main(args) == 0
    args = ["inspect-edges", "--model", str(out / "model.ckpt"), "--module", "implicit", "--out", str(tmp_path / "e")]
    assert main(args) == 2


def test_export_metrics(trained, tmp_path):
    metrics = str(trained / "metrics.json")
    for what in ("steps", "epochs", "final"):
        out = tmp_path / f"{what}.csv"
        assert main(["export-metrics", "--metrics", metrics, "--what", what, "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert len(rows) >= 2
    with open(tmp_path / "final.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:3] == ["source", "seed", "ablation"] and "accuracy" in header


def test_export_metrics_rejects_foreign_json(tmp_path):
    bogus = tmp_path / "m.json"
    bogus.write_text('{"schema": "other"}')
    assert main(["export-metrics", "--metrics", str(bogus), "--out", str(tmp_path / "x.csv")]) == 2


def test_gen_world_writes_world_and_annotations(tmp_path, fixture_path):
    world = tmp_path / "world.json"
    ann = tmp_path / "ann.ndjson"
    args = ["gen-world", "--config", fixture_path("small_run.toml"), "--out", str(world)]
    assert main(args + ["--annotations", str(ann), "--annotation-scenes", "5"]) == 0
    with open(world) as fh:
        assert len(json.load(fh)["class_names"]) == 12
    with open(ann) as fh:
        records = kg.parse_annotations(fh)
    assert len({r["image"] for r in records}) == 5
