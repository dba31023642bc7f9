import csv
import json

import numpy as np
import pytest
from PIL import Image

from onn.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, aggregate, main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("images")
    r = np.random.default_rng(0)
    for i in range(12):
        base = r.uniform(40, 200)
        img = np.clip(base + r.normal(0, 15, (16, 16)), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(d / f"im{i:02d}.png")
    return d


@pytest.fixture
def ini(tmp_path, dataset):
    path = tmp_path / "exp.ini"
    path.write_text(
        f"[data]\ndataset = {dataset}\nimages = 12\n"
        "[network]\nhidden = 2,2\n"
        "[operators]\nlibrary = mul-*-tanh,sin-median-*\n"
        "[spm]\ngamma = 2\nruns = 2\niterations = 4\nprobe_images = 4\n"
        "[train]\nfolds = 3\nrun_folds = 0,1\nrestarts = 2\nepochs = 2\nbatch_size = 2\n"
    )
    return path


def run(ini, out, *args):
    return main([*args, "--config", str(ini), "--out", str(out)])


def test_full_pipeline(ini, tmp_path, capsys):
    out = tmp_path / "run"
    # 16x16 corpus resized to 60x60 on load
    assert run(ini, out, "prepare", "--export-png", "2") == EXIT_OK
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert 0.35 < manifest["changed_fraction"] < 0.45
    assert len(list((out / "data" / "png").iterdir())) == 2
    assert run(ini, out, "spm") == EXIT_OK
    elite = json.loads((out / "spm" / "elite.json").read_text())
    assert [len(layer) for layer in elite["hidden"]] == [2, 2]
    assert (out / "spm" / "ledger.csv").is_file()
    assert run(ini, out, "train") == EXIT_OK
    train = out / "train"
    for name in ("runs.csv", "curves.csv", "summary.csv", "schema.txt", "manifest.json"):
        assert (train / name).is_file()
    assert len(list((train / "checkpoints").iterdir())) == 4
    baseline = tmp_path / "base.csv"
    baseline.write_text("model,test_psnr\nexternal,30.0\n")
    assert run(ini, out, "report", "--baseline", str(baseline)) == EXIT_OK
    with open(train / "report.csv") as fh:
        rows = {r["model"]: r for r in csv.DictReader(fh)}
    assert set(rows) == {"onn", "cnn", "external"}
    assert rows["onn"]["folds"] == "2"
    assert "incomplete" not in capsys.readouterr().out


def test_train_is_deterministic(ini, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    assignment = tmp_path / "elite.json"
    assignment.write_text(json.dumps({"hidden": [["sin-median-tanh", "mul-sum-tanh"], ["mul-max-tanh"] * 2]}))
    for out in outs:
        assert run(ini, out, "train", "--assignment", str(assignment)) == EXIT_OK
    for name in ("runs.csv", "curves.csv", "summary.csv"):
        assert (outs[0] / "train" / name).read_bytes() == (outs[1] / "train" / name).read_bytes()


def test_report_flags_missing_folds(tmp_path):
    d = tmp_path / "train"
    d.mkdir()
    (d / "runs.csv").write_text(
        "fold,model,restart,status,train_psnr,test_psnr,selected\n"
        "0,onn,0,ok,20.0,19.0,1\n0,cnn,0,ok,19.0,18.0,1\n1,cnn,0,ok,19.5,18.5,1\n"
    )
    (d / "manifest.json").write_text(json.dumps({"expected_folds": [0, 1]}))
    table, notes = aggregate(d)
    assert notes == ["onn: incomplete, missing folds [1]"]
    cnn = next(row for row in table if row[0] == "cnn")
    assert cnn[4] == pytest.approx(18.25)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--library", "mul-sum-tanh", "--configs", "2"]) == EXIT_OK
    assert "1/1 operator sets passed" in capsys.readouterr().out
    assert main(["gradcheck", "--library", "mul-sum-tanh", "--configs", "1", "--tolerance", "0"]) == EXIT_NUMERIC


@pytest.mark.parametrize("argv, code", [
    (["gradcheck", "--set", "network.kernel=2"], EXIT_CONFIG),
    (["gradcheck", "--library", "nope-sum-tanh"], EXIT_CONFIG),
    (["spm", "--set", "data.dataset=/nonexistent/dir"], EXIT_CONFIG),
    (["report", "/nonexistent/run"], EXIT_DATA),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code
    assert capsys.readouterr().err


def test_train_without_assignment(ini, tmp_path):
    assert run(ini, tmp_path / "x", "train") == EXIT_CONFIG


def test_too_few_images(ini, tmp_path):
    assert run(ini, tmp_path / "x", "prepare", "--set", "data.images=50") == EXIT_DATA


def test_workers_env(monkeypatch):
    monkeypatch.setenv("ONN_WORKERS", "many")
    assert main(["gradcheck", "--library", "mul-sum-tanh", "--configs", "1"]) == EXIT_CONFIG


def test_corpus_command(tmp_path):
    assert main(["corpus", str(tmp_path / "c"), "--count", "3"]) == EXIT_OK
    files = sorted((tmp_path / "c").iterdir())
    assert len(files) == 3
    with Image.open(files[0]) as im:
        assert min(im.size) >= 60
