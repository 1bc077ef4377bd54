import csv
import io
import json

import numpy as np
import pytest
from PIL import Image

from translab.cli import main
from translab.datasets import decode_mask, load_manifest, make_synthetic

TINY = ["--backbone", "tiny", "--input-size", "32", "--batch-size", "2"]


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return make_synthetic(tmp_path_factory.mktemp("cli"), 4, 48, seed=1, n_val=4)


@pytest.fixture(scope="module")
def checkpoint(root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--root", str(root), "--out", str(out), "--iterations", "2"] + TINY) == 0
    return out / "checkpoint.pt"


def json_lines(text):
    """Every top-level JSON object in ``text``, single-line or indented."""
    decoder, docs, pos = json.JSONDecoder(), [], 0
    while (start := text.find("{", pos)) != -1:
        if start and text[start - 1] != "\n":
            pos = start + 1
            continue
        doc, pos = decoder.raw_decode(text, start)
        docs.append(doc)
    return docs


def test_train_help_lists_defaults(capsys):
    assert main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for flag, default in [("--base-lr", "0.02"), ("--momentum", "0.9"),
                          ("--weight-decay", "0.0005"), ("--epochs", "16"),
                          ("--lambda", "5.0"), ("--boundary-loss", "dice"),
                          ("--batch-size", "8"), ("--bam-levels", "c1,c2,c4")]:
        assert flag in text
        assert f"(default: {default})" in text


def test_no_command_and_unknown_command(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--root", "x", "--epochs", "zero"]) == 1


def test_train_echoes_config(root, tmp_path, capsys):
    args = ["train", "--root", str(root), "--out", str(tmp_path), "--iterations", "1",
            "--lambda", "2.5"] + TINY
    assert main(args) == 0
    first = json_lines(capsys.readouterr().out)[0]
    assert first["config"]["lam"] == 2.5 and first["config"]["backbone"] == "tiny"
    assert first["config"]["base_lr"] == 0.02


def test_config_file_and_flag_precedence(root, tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("backbone: tiny\ninput_size: 32\nbatch_size: 2\niterations: 1\nlr: 0.01\n"
                   "seed: 4\n")
    assert main(["train", "--root", str(root), "--out", str(tmp_path / "o"),
                 "--config", str(cfg), "--seed", "9"]) == 0
    echoed = json_lines(capsys.readouterr().out)[0]["config"]
    assert echoed["base_lr"] == 0.01 and echoed["seed"] == 9


def test_invalid_config_exits_one(root, tmp_path):
    assert main(["train", "--root", str(root), "--out", str(tmp_path), "--epochs", "0"]) == 1
    assert main(["train", "--root", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1


def test_dataset_stats_json(root, capsys):
    assert main(["dataset-stats", "--root", str(root)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["n_images"] == 4 and stats["mcc"] > 0
    assert main(["dataset-stats", "--root", str(root), "--split", "validation",
                 "--difficulty", "hard"]) == 0
    assert json.loads(capsys.readouterr().out)["n_images"] == 2


def test_make_synthetic(tmp_path, capsys):
    out = tmp_path / "syn"
    assert main(["make-synthetic", "--out", str(out), "--n-images", "3", "--n-val", "2",
                 "--image-size", "32"]) == 0
    assert len(load_manifest(out, "train")) == 3 and len(load_manifest(out, "val")) == 2
    assert main(["make-synthetic", "--out", str(out), "--n-images", "0"]) == 1


def test_gen_boundary(root, tmp_path):
    assert main(["gen-boundary", "--root", str(root), "--out", str(tmp_path)]) == 0
    written = sorted(tmp_path.glob("*_boundary.png"))
    assert len(written) == 4
    values = np.unique(np.asarray(Image.open(written[0])))
    assert set(values.tolist()) <= {0, 255}
    assert main(["gen-boundary", "--thickness", "0", "--root", str(root)]) == 1


def test_predict_writes_masks(checkpoint, root, tmp_path):
    black = tmp_path / "black.png"
    Image.fromarray(np.zeros((512, 512, 3), np.uint8)).save(black)
    odd = load_manifest(root, "train")[0].image_path
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(checkpoint), "--out", str(out),
                 "--emit-boundary", "--overlay", str(black), str(odd)]) == 0
    mask = decode_mask(out / "black_mask.png")
    assert mask.shape == (512, 512)
    boundary = np.asarray(Image.open(out / "black_boundary.png"))
    assert boundary.shape == (512, 512) and boundary.dtype == np.uint8
    assert (out / f"{odd.stem}_overlay.png").is_file()
    assert decode_mask(out / f"{odd.stem}_mask.png").shape == (48, 48)


def test_predict_failures(checkpoint, tmp_path):
    bogus = tmp_path / "not_an_image.png"
    bogus.write_text("hello")
    assert main(["predict", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "p"),
                 str(bogus)]) == 2
    assert main(["predict", "--checkpoint", str(tmp_path / "none.pt"), "--out",
                 str(tmp_path), str(bogus)]) == 1


def test_evaluate_pred_dir_and_checkpoint(checkpoint, root, tmp_path, capsys):
    gt_dir = root / "validation" / "masks"
    assert main(["evaluate", "--root", str(root), "--split", "validation",
                 "--pred-dir", str(gt_dir), "--out", str(tmp_path)]) == 0
    reports = json_lines(capsys.readouterr().out)[-1]
    assert reports["all"]["miou"] == 100.0 and reports["hard"]["mae"] == 0.0
    assert (tmp_path / "report.csv").is_file()

    assert main(["evaluate", "--root", str(root), "--split", "validation",
                 "--checkpoint", str(checkpoint)]) == 0
    lines = json_lines(capsys.readouterr().out)
    assert lines[0]["config"]["backbone"] == "tiny"
    assert set(lines[-1]) == {"all", "easy", "hard"}


def test_evaluate_requires_one_source(root):
    assert main(["evaluate", "--root", str(root), "--split", "validation"]) == 1


def test_evaluate_missing_prediction_exits_two(root, tmp_path):
    assert main(["evaluate", "--root", str(root), "--split", "validation",
                 "--pred-dir", str(tmp_path)]) == 2


def test_ablate_bam_level_sweep(root, tmp_path, capsys):
    out = tmp_path / "abl.csv"
    assert main(["ablate", "--spec", "bam_level_sweep", "--root", str(root), "--iterations", "1",
                 "--out", str(out)] + TINY) == 0
    stdout = capsys.readouterr().out
    csv_text = stdout[stdout.index("variant,"):]
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    assert [r["variant"] for r in rows] == ["BL", "BL+C1", "BL+C1&2", "BL+C1&2&4"]
    assert out.read_text().replace("\r\n", "\n") == csv_text.replace("\r\n", "\n")
