import csv
import glob
import json
import os
import time

import numpy as np
import pytest
from PIL import Image

from conftest import DATA_ROOT
from dpgnn import cli
from dpgnn.config import ConfigError, RunConfig, load_config_file, resolve
from dpgnn.graph_data import ToySpec, generate_toy_dataset, write_tu_dataset
from dpgnn.reporting import read_curves

FAST = ["--epochs", "2", "--folds", "2", "--hidden", "8", "--layers", "2"]


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    write_tu_dataset(generate_toy_dataset(ToySpec(graphs_per_class=10), seed=0), root, "toy")
    return str(root)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = [l for l in err.splitlines() if l.strip()]
    assert len(lines) == 1, err
    return json.loads(lines[0])


# -- config --------------------------------------------------------------------

def test_defaults_match_training_protocol():
    cfg = resolve()
    tc = cfg.train_config()
    assert (tc.num_layers, tc.epochs, tc.batch_size, tc.seed) == (5, 300, 32, 0)
    assert len(cfg.grid()) == 192


def test_precedence_file_then_flags(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("hidden: 64\nlr: 0.001\nlambda4: 1\n")
    cfg = resolve(load_config_file(p), {"lr": 0.01, "hidden": None})
    assert (cfg.hidden, cfg.lr, cfg.lambda4) == (64, 0.01, 1.0)


@pytest.mark.parametrize("text,field", [
    ("hidden: 0\n", "hidden"),
    ("lr: -1\n", "lr"),
    ("bogus: 3\n", "bogus"),
    ("first_tf: sum\n", "first_tf"),
    ("hidden: 3.5\n", "hidden"),
    ("- a\n- b\n", "config"),
    ("lambda3: -0.5\n", "lambda3"),
])
def test_config_errors_name_the_field(tmp_path, text, field):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError) as err:
        resolve(load_config_file(p))
    assert err.value.field == field


def test_digest_ignores_output_location():
    a, b = RunConfig(out="x", workers=1), RunConfig(out="y", workers=4)
    assert a.digest() == b.digest()
    assert a.digest() != RunConfig(seed=1).digest()


# -- inspect -------------------------------------------------------------------

def test_inspect_mutag(capsys):
    code, out, err = run(capsys, "inspect", "--dataset", str(DATA_ROOT), "--name", "MUTAG")
    assert code == 0 and err == ""
    assert out.splitlines() == ["dataset #G C_G C_N AvgN AvgE MaxNeighb",
                                "MUTAG 188 2 7 17.93 19.79 4"]


def test_inspect_toy_matches_generation(capsys, toy_root):
    code, out, _ = run(capsys, "inspect", "--dataset", toy_root, "--name", "toy")
    ds = generate_toy_dataset(ToySpec(graphs_per_class=10), seed=0)
    fields = out.splitlines()[1].split()
    assert code == 0
    assert fields[:4] == ["toy", "20", "2", str(ds.num_node_classes)]
    assert float(fields[4]) == pytest.approx(np.mean([g.node_count for g in ds.graphs]), abs=0.005)


# -- errors --------------------------------------------------------------------

def test_missing_dataset_is_structured(capsys, tmp_path):
    code, out, err = run(capsys, "inspect", "--dataset", str(tmp_path), "--name", "NOPE")
    assert code == 1 and out == ""
    e = error_of(err)
    assert e["error"] == "DatasetFormatError" and e["file"].endswith("NOPE")
    (tmp_path / "NOPE").mkdir()
    code, _, err = run(capsys, "inspect", "--dataset", str(tmp_path), "--name", "NOPE")
    assert code == 1 and error_of(err)["file"].endswith("NOPE_A.txt")


def test_bad_flag_value(capsys):
    code, _, err = run(capsys, "cv", "--lr", "0")
    assert code == 2 and error_of(err) == {"error": "ConfigError", "field": "lr", "message": "must be > 0"}


def test_usage_errors(capsys):
    for argv in (["train"], ["cv", "--precision", "16"], ["cv", "--hidden", "x"], []):
        code, _, err = run(capsys, *argv)
        assert code == 2 and error_of(err)["error"] == "UsageError"


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run(capsys, "inspect", "--config", str(tmp_path / "none.yaml"))
    assert code == 2 and error_of(err)["field"] == "config"


# -- cv and export -------------------------------------------------------------

@pytest.fixture(scope="module")
def mutag_cv(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    code = cli.main(["cv", "--dataset", str(DATA_ROOT), "--name", "MUTAG", "--out", str(out),
                     "--lambda2", "1", "--lambda5", "1", *FAST])
    assert code == 0
    (run_dir,) = glob.glob(str(out / "cv-MUTAG-*"))
    return run_dir


def test_cv_outputs(mutag_cv):
    rows = read_curves(os.path.join(mutag_cv, "curves.csv"))
    assert len(rows) == 2 * 2
    assert list(rows[0]) == ["fold", "epoch", "lr", "train_acc", "val_acc",
                             "l1", "l2", "l3", "l4", "l5", "combined"]
    first = open(os.path.join(mutag_cv, "curves.csv")).readline()
    echo = json.loads(first.split("=", 1)[1])
    assert echo["lambda2"] == 1.0 and echo["name"] == "MUTAG"
    summary = json.load(open(os.path.join(mutag_cv, "summary.json")))
    assert summary["model"] == "DP-GNN" and len(summary["fold_accuracies"]) == 2
    assert summary["run_config"]["lambda5"] == 1.0
    png = Image.open(os.path.join(mutag_cv, "curves.png"))
    assert json.loads(png.info["Description"])["lambda2"] == 1.0
    assert sorted(os.path.basename(p) for p in glob.glob(os.path.join(mutag_cv, "fold*.npz"))) == \
        ["fold0.npz", "fold1.npz"]


def test_cv_baseline_label(capsys, toy_root, tmp_path):
    code, out, _ = run(capsys, "cv", "--dataset", toy_root, "--name", "toy", "--out",
                       str(tmp_path), "--no-checkpoints", *FAST)
    assert code == 0 and "ExpGNN-equivalent baseline" in out
    (summary,) = glob.glob(str(tmp_path / "cv-toy-*" / "summary.json"))
    assert json.load(open(summary))["model"].startswith("ExpGNN-equivalent baseline")
    assert not glob.glob(str(tmp_path / "cv-toy-*" / "*.npz"))


def test_cv_parallel_matches_serial(toy_root, tmp_path):
    base = ["cv", "--dataset", toy_root, "--name", "toy", "--no-checkpoints", *FAST]
    assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    (a,) = glob.glob(str(tmp_path / "a" / "*" / "curves.csv"))
    (b,) = glob.glob(str(tmp_path / "b" / "*" / "curves.csv"))
    assert os.path.basename(os.path.dirname(a)) == os.path.basename(os.path.dirname(b))
    assert open(a).read().splitlines()[1:] == open(b).read().splitlines()[1:]


def test_export_from_checkpoint(capsys, mutag_cv, tmp_path):
    ckpt = os.path.join(mutag_cv, "fold0.npz")
    out1, out2 = str(tmp_path / "e1.csv"), str(tmp_path / "e2.csv")
    code, out, _ = run(capsys, "export", "--checkpoint", ckpt, "--output", out1)
    assert code == 0 and "188 rows" in out
    assert run(capsys, "export", "--checkpoint", ckpt, "--output", out2)[0] == 0
    assert open(out1, "rb").read() == open(out2, "rb").read()
    lines = open(out1).read().splitlines()
    assert lines[0].startswith("# ")
    rows = list(csv.reader(lines[1:]))
    assert len(rows) == 189 and len(rows[0]) == 3 + 8
    assert sum(r[2] == "validation" for r in rows[1:]) in (94, 95)
    meta = json.loads(lines[0][2:].split("=", 1)[1])
    assert meta["run_config"]["name"] == "MUTAG" and meta["fold_index"] == 0


def test_export_default_output_path(capsys, mutag_cv):
    ckpt = os.path.join(mutag_cv, "fold1.npz")
    assert run(capsys, "export", "--checkpoint", ckpt)[0] == 0
    assert os.path.exists(os.path.join(mutag_cv, "fold1.embeddings.csv"))


def test_export_corrupt_checkpoint(capsys, tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"\x00garbage")
    code, out, err = run(capsys, "export", "--checkpoint", str(bad))
    assert code == 1 and out == ""
    assert error_of(err)["error"] == "CheckpointError"
    code, _, err = run(capsys, "export", "--checkpoint", str(tmp_path / "missing.npz"))
    assert code == 1 and error_of(err)["error"] == "CheckpointError"


# -- grid ----------------------------------------------------------------------

def test_grid_ranking_and_resume(capsys, toy_root, tmp_path):
    argv = ["grid", "--dataset", toy_root, "--name", "toy", "--out", str(tmp_path), *FAST,
            "--grid-hidden", "8", "--grid-lr", "0.01", "--grid-first-tf", "identical",
            "--grid-lambdas", "0,0,0,0", "1,0,0,0", "0,1,0,0", "0,0,1,0", "0,0,0,1"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    (run_dir,) = glob.glob(str(tmp_path / "grid-toy-*"))
    ranking = open(os.path.join(run_dir, "ranking.csv")).read()
    rows = list(csv.DictReader(l for l in ranking.splitlines() if not l.startswith("#")))
    assert len(rows) == 5 and ranking.startswith("# config=")
    points = sorted(glob.glob(os.path.join(run_dir, "points", "*", "result.json")))
    assert len(points) == 5
    # simulate an interrupted run: one point missing, the rest must be reused
    os.remove(points[0])
    mtimes = {p: os.path.getmtime(p) for p in points[1:]}
    time.sleep(0.05)
    code, out2, _ = run(capsys, *argv)
    assert code == 0
    assert all(os.path.getmtime(p) == t for p, t in mtimes.items())
    assert os.path.exists(points[0])
    assert open(os.path.join(run_dir, "ranking.csv")).read() == ranking
    assert out2 == out


def test_single_point_grid(capsys, toy_root, tmp_path):
    code, out, _ = run(capsys, "grid", "--dataset", toy_root, "--name", "toy", "--out",
                       str(tmp_path), *FAST, "--grid-hidden", "8", "--grid-lr", "0.01",
                       "--grid-first-tf", "mlp", "--grid-lambdas", "1,0,0,1")
    assert code == 0
    assert out.splitlines()[0].split()[0] == "1" and "lambda=[1,0,0,1]" in out
    assert len(out.splitlines()) == 2


def test_bad_grid_lambdas(capsys):
    code, _, err = run(capsys, "grid", "--grid-lambdas", "1,0,0")
    assert code == 2 and error_of(err)["field"] == "grid_lambdas"


# -- ablate --------------------------------------------------------------------

def test_ablate_report(capsys, toy_root, tmp_path):
    code, out, _ = run(capsys, "ablate", "--dataset", toy_root, "--name", "toy", "--out",
                       str(tmp_path), *FAST)
    assert code == 0
    (run_dir,) = glob.glob(str(tmp_path / "ablate-toy-*"))
    rows = list(csv.DictReader(l for l in open(os.path.join(run_dir, "ablation.csv"))
                               if not l.startswith("#")))
    assert len(rows) == 6
    assert rows[0]["lambda"] == "[0,0,0,0]"
    base = float(rows[0]["accuracy"])
    helpful = [i for i in range(4) if float(rows[1 + i]["accuracy"]) >= base - 1e-12]
    expect = "[" + ",".join("1" if i in helpful else "0" for i in range(4)) + "]"
    assert rows[5]["lambda"] == expect
    text = open(os.path.join(run_dir, "ablation.txt")).read()
    assert text.startswith("# config=")
    body = text.split("\n", 1)[1]
    assert body in out
    lines = body.splitlines()
    first = lines[1].split()
    assert first[0] == "[0,0,0,0]" and float(first[1]) == pytest.approx(base, abs=5e-5)
    assert lines[-2].split() == ["combined", "lambda", expect]
    assert os.path.exists(os.path.join(run_dir, "ablation.png"))


# -- default configuration budget ---------------------------------------------

@pytest.mark.slow
def test_toy_default_config_under_a_minute(toy_root, tmp_path):
    start = time.perf_counter()
    code = cli.main(["cv", "--dataset", toy_root, "--name", "toy", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    assert code == 0
    assert elapsed < 60, f"default toy run took {elapsed:.1f}s"
