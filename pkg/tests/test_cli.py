import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from vesselprior.checkpoint import load_checkpoint
from vesselprior.cli import main, overlay
from vesselprior.metrics import read_csv

MODEL = "depth = 3\nbase_channels = 4\ninput_size = 32x32\n"
AE = "prior = socae\nepochs = 1\nbatch_size = 4\nlatent_channels = 4\nhead_bias = -3\n" + MODEL
SEG = "prior = none\nlambda = 0\nepochs = 1\nbatch_size = 4\n" + MODEL


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "8", "--size", "32", "--seed", "7", "--out", str(root / "data")]) == 0
    (root / "ae.cfg").write_text("# auto-encoder\n" + AE)
    (root / "seg.cfg").write_text(SEG)
    return root


def test_synth_writes_pairs_and_manifest(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--count", "32", "--size", "64", "--seed", "7", "--out", str(out)]) == 0
    assert len(list((out / "images").glob("*.png"))) == 32
    assert len(list((out / "masks").glob("*.png"))) == 32
    assert (out / "manifest.csv").read_text().startswith("case_id,seed,foreground_fraction\n")
    again = tmp_path / "again"
    main(["synth", "--count", "32", "--size", "64", "--seed", "7", "--out", str(again)])
    assert _files(out) == _files(again)


def test_unknown_command_and_missing_command(capsys):
    assert main(["bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1


def test_bad_arguments_exit_one():
    assert main(["synth", "--count", "x", "--out", "d"]) == 1
    assert main(["synth", "--count", "2", "--size", "16", "--out", "d"]) == 1


def test_eval_identical_files(tmp_path, capsys):
    mask = np.zeros((20, 20), np.uint8)
    mask[5:15, 8:11] = 255
    Image.fromarray(mask).save(tmp_path / "g.png")
    Image.fromarray(mask).save(tmp_path / "p.png")
    assert main(["eval", "--gt", str(tmp_path / "g.png"), "--pred", str(tmp_path / "p.png")]) == 0
    out = capsys.readouterr().out
    assert "DSC: 1.0000" in out and "HD: 0.0000" in out


def test_eval_directories_and_csv(tmp_path, capsys):
    (tmp_path / "gt").mkdir()
    (tmp_path / "pred").mkdir()
    for i in range(3):
        m = np.zeros((16, 16), np.uint8)
        m[4 : 8 + i, 4:10] = 255
        Image.fromarray(m).save(tmp_path / "gt" / f"c{i}.png")
        Image.fromarray(np.roll(m, i, axis=1)).save(tmp_path / "pred" / f"c{i}_mask.png")
    csv_path = tmp_path / "m.csv"
    args = ["eval", "--gt", str(tmp_path / "gt"), "--pred", str(tmp_path / "pred"), "--csv", str(csv_path)]
    assert main(args) == 0
    assert "DSC:" in capsys.readouterr().out
    report = read_csv(csv_path)
    assert [c.case_id for c in report.per_case] == ["c0", "c1", "c2"]
    assert report.per_case[0].dsc == 1.0


def test_eval_errors(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((5, 5), np.uint8)).save(tmp_path / "b.png")
    assert main(["eval", "--gt", str(tmp_path / "a.png"), "--pred", str(tmp_path / "b.png")]) == 1
    assert main(["eval", "--gt", str(tmp_path / "nope.png"), "--pred", str(tmp_path / "b.png")]) == 1
    assert main(["eval", "--gt", str(tmp_path / "a.png"), "--pred", str(tmp_path / "a.png"), "--threshold", "1"]) == 1


def test_training_commands_and_predict(workspace, tmp_path, capsys):
    data, ae_ckpt, seg_ckpt = workspace / "data", tmp_path / "ae.ckpt", tmp_path / "seg.ckpt"
    log = tmp_path / "ae.log"
    args = ["train-ae", "--data", str(data), "--config", str(workspace / "ae.cfg"), "--out", str(ae_ckpt), "--log", str(log)]
    assert main(args) == 0
    assert load_checkpoint(ae_ckpt).kind == "socae"
    assert log.read_text().startswith("step,recon_loss")

    args = [
        "train-seg", "--data", str(data), "--config", str(workspace / "seg.cfg"),
        "--override", "prior=socae", "--override", "lambda=40", "--prior", str(ae_ckpt), "--out", str(seg_ckpt),
    ]
    assert main(args) == 0
    ckpt = load_checkpoint(seg_ckpt)
    assert ckpt.kind == "unet" and ckpt.extra["lambda"] == 40.0 and ckpt.extra["prior"] == "socae"

    image = next((data / "images").glob("*.png"))
    gt = data / "masks" / image.name
    out = tmp_path / "pred" / "case"
    args = ["predict", "--checkpoint", str(seg_ckpt), "--image", str(image), "--out", str(out), "--gt", str(gt)]
    assert main(args) == 0
    for suffix in ("_prob.png", "_mask.png", "_overlay.png"):
        assert (tmp_path / "pred" / f"case{suffix}").is_file()
    with Image.open(tmp_path / "pred" / "case_overlay.png") as img:
        assert img.mode == "RGB" and img.size == (32, 32)
    with Image.open(tmp_path / "pred" / "case_mask.png") as img:
        assert set(np.unique(np.asarray(img))) <= {0, 255}


def test_train_seg_needs_prior_checkpoint(workspace, tmp_path):
    args = ["train-seg", "--data", str(workspace / "data"), "--config", str(workspace / "seg.cfg"),
            "--override", "prior=socae", "--out", str(tmp_path / "s.ckpt")]
    assert main(args) == 1
    assert not (tmp_path / "s.ckpt").exists()


def test_config_errors_exit_one(workspace, tmp_path):
    base = ["train-seg", "--data", str(workspace / "data"), "--config", str(workspace / "seg.cfg"), "--out", str(tmp_path / "s.ckpt")]
    assert main(base + ["--override", "lamda=40"]) == 1
    assert main(base + ["--override", "lambda=-1"]) == 1
    assert main(base + ["--override", "nokey"]) == 1
    assert main(["train-ae", "--data", str(workspace / "data"), "--config", str(workspace / "seg.cfg"), "--out", "x"]) == 1
    assert main(base[:2] + [str(tmp_path / "missing")] + base[3:]) == 1
    assert not (tmp_path / "s.ckpt").exists()


def test_predict_errors(workspace, tmp_path):
    image = next((workspace / "data" / "images").glob("*.png"))
    out = str(tmp_path / "p")
    assert main(["predict", "--checkpoint", str(tmp_path / "none.ckpt"), "--image", str(image), "--out", out]) == 1
    seg_ckpt = tmp_path / "seg.ckpt"
    main(["train-seg", "--data", str(workspace / "data"), "--config", str(workspace / "seg.cfg"), "--out", str(seg_ckpt)])
    rgb = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(rgb)
    assert main(["predict", "--checkpoint", str(seg_ckpt), "--image", str(rgb), "--out", out]) == 1
    assert not list(tmp_path.glob("p_*"))


def test_runtime_failure_exits_two(workspace, tmp_path):
    args = ["train-seg", "--data", str(workspace / "data"), "--config", str(workspace / "seg.cfg"),
            "--override", "learning_rate=inf", "--out", str(tmp_path / "s.ckpt")]
    assert main(args) == 2


def test_cross_validate_command_is_reproducible(workspace, tmp_path, capsys):
    def run(name):
        args = ["cross-validate", "--data", str(workspace / "data"), "--config", str(workspace / "seg.cfg"),
                "--ae-config", str(workspace / "ae.cfg"), "--override", "prior=socae", "--override", "lambda=10",
                "-k", "2", "--seed", "3", "--run-dir", str(tmp_path / name)]
        assert main(args) == 0
        return tmp_path / name

    a, b = run("a"), run("b")
    assert "DSC:" in capsys.readouterr().out
    assert _files(a) == _files(b)
    assert {"metrics.csv", "audit.json", "seg.cfg", "ae.cfg", "ae_fold1.ckpt"} <= set(_files(a))


def test_inputs_are_not_modified(workspace, tmp_path):
    before = _files(workspace / "data")
    main(["train-seg", "--data", str(workspace / "data"), "--config", str(workspace / "seg.cfg"), "--out", str(tmp_path / "s.ckpt")])
    assert _files(workspace / "data") == before


def test_overlay_colours():
    image = np.full((1, 8, 8), 0.5, np.float32)
    pred = np.zeros((8, 8), np.uint8)
    pred[2:6, 2:6] = 1
    gt = np.zeros((8, 8), np.uint8)
    gt[0:3, 0:3] = 1
    rgb = overlay(image, pred, gt)
    assert tuple(rgb[0, 0]) == (0, 255, 0)
    assert tuple(rgb[5, 5]) == (0, 0, 255)
    assert tuple(rgb[4, 4]) == (128, 128, 128)


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "vesselprior", "synth", "--count", "2", "--size", "32", "--out", str(tmp_path / "d")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "vesselprior", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
