from pathlib import Path

import numpy as np
import pytest

from flsn import config as C
from flsn.checkpoint import load_checkpoint
from flsn.cli import main
from flsn.fileio import read_tensor, write_tensor
from flsn.metrics import count_params
from flsn.synth import read_manifest

TINY = ["--nc", "4", "--branches", "1", "--blocks-per-branch", "1", "--crop-size", "8", "-q"]


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--samples", "4", "--test-samples", "2", "--regime", "HE", "--seed", "3",
                 "--out", str(root), "--size", "8", "-q"]) == 0
    return root


def test_synth_layout_and_determinism(tmp_path, capsys):
    for run in ("a", "b"):
        assert main(["synth", "--samples", "4", "--test-samples", "0", "--regime", "LE", "--seed", "7",
                     "--out", str(tmp_path / run), "--size", "8", "-q"]) == 0
    assert "manifest" in capsys.readouterr().out
    assert len(read_manifest(tmp_path / "a", "train")) == 4
    a = tree(tmp_path / "a")
    b = tree(tmp_path / "b")
    a.pop(C.RESOLVED_NAME), b.pop(C.RESOLVED_NAME)  # records its own root path
    assert a == b
    before = tree(tmp_path / "a")
    assert main(["synth", "--samples", "4", "--test-samples", "0", "--regime", "LE", "--seed", "7",
                 "--out", str(tmp_path / "a"), "--size", "8", "-q"]) == 0
    assert tree(tmp_path / "a") == before
    assert C.load(tmp_path / "a" / C.RESOLVED_NAME).noise.regime == "LE"


def test_synth_both_regimes(tmp_path):
    assert main(["synth", "--samples", "1", "--test-samples", "1", "--regime", "BOTH", "--out", str(tmp_path),
                 "--size", "8", "-q"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["HE", "LE"]
    for regime in ("HE", "LE"):
        assert len(read_manifest(tmp_path / regime)) == 2
        assert C.load(tmp_path / regime / C.RESOLVED_NAME).noise.regime == regime
    he = read_tensor(tmp_path / "HE" / "train" / "sample_00000" / "hr.flt")
    le = read_tensor(tmp_path / "LE" / "train" / "sample_00000" / "hr.flt")
    assert np.array_equal(he, le)


def test_train_ablation_param_counts(data, tmp_path):
    counts = {}
    for name, flags in (("full", []), ("no_ne", ["--no-ne"]), ("no_ba", ["--no-ba"])):
        out = tmp_path / name
        assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", *flags, *TINY]) == 0
        model, _, _ = load_checkpoint(out / "checkpoint.flc")
        counts[name] = count_params(model)
        assert (out / C.RESOLVED_NAME).exists() and (out / "train_log.csv").exists()
    assert counts["no_ne"] < counts["full"] and counts["no_ba"] < counts["full"]


def test_train_resume_matches_uninterrupted(data, tmp_path):
    common = ["--data", str(data), "--checkpoint-every", "2", "--seed", "1", *TINY]
    assert main(["train", "--out", str(tmp_path / "full"), "--epochs", "4", *common]) == 0
    assert main(["train", "--out", str(tmp_path / "part"), "--epochs", "2", *common]) == 0
    assert main(["train", "--out", str(tmp_path / "part"), "--epochs", "4",
                 "--resume", str(tmp_path / "part" / "ckpt_epoch_0002.flc"), *common]) == 0
    for name in ("train_log.csv", "checkpoint.flc"):
        assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_train_nan_loss_exit_code(data, tmp_path, capsys):
    bad = tmp_path / "bad"
    for p in data.rglob("*"):
        if p.is_file():
            dest = bad / p.relative_to(data)
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(p.read_bytes())
    for f in (bad / "train").rglob("frame_*.flt"):
        write_tensor(f, np.full(read_tensor(f).shape, np.nan, np.float32))
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "run"), "--epochs", "1", *TINY]) == 2
    err = capsys.readouterr().err
    assert "epoch 0" in err and "step 1" in err


def test_train_geometry_error(data, tmp_path, capsys):
    rc = main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--branches", "2", "--nc", "4",
               "--blocks-per-branch", "1", "--crop-size", "6", "-q"])
    assert rc == 1 and "2^B = 4" in capsys.readouterr().err


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", *TINY]) == 0
    return out / "checkpoint.flc"


def test_infer_shape_and_determinism(ckpt, data, tmp_path, capsys):
    src = read_manifest(data, "test")[0] / "frame_1_2.flt"
    for name in ("a.flt", "b.flt"):
        assert main(["infer", str(ckpt), str(src), str(tmp_path / "o" / name), "-q"]) == 0
    assert "ms" in capsys.readouterr().out
    out = read_tensor(tmp_path / "o" / "a.flt")
    assert out.shape == (1, 1, 16, 16)
    assert (tmp_path / "o" / "a.flt").read_bytes() == (tmp_path / "o" / "b.flt").read_bytes()
    assert (tmp_path / "o" / C.RESOLVED_NAME).exists()


def test_infer_geometry_and_channel_errors(data, tmp_path, capsys):
    out = tmp_path / "m"
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--nc", "4", "--branches", "2",
                 "--blocks-per-branch", "1", "--crop-size", "8", "-q"]) == 0
    write_tensor(tmp_path / "f50.flt", np.zeros((1, 1, 50, 50), np.float32))
    assert main(["infer", str(out / "checkpoint.flc"), str(tmp_path / "f50.flt"), str(tmp_path / "x.flt")]) == 2
    assert "2^B = 4" in capsys.readouterr().err
    write_tensor(tmp_path / "c2.flt", np.zeros((1, 2, 8, 8), np.float32))
    assert main(["infer", str(out / "checkpoint.flc"), str(tmp_path / "c2.flt"), str(tmp_path / "x.flt")]) == 2


def test_eval_trained_beats_untrained(data, tmp_path):
    common = ["--data", str(data), "--seed", "0", "--lr0", "3e-3", "--batch-size", "4", *TINY]
    assert main(["train", "--out", str(tmp_path / "init"), "--epochs", "0", *common]) == 0
    assert main(["train", "--out", str(tmp_path / "fit"), "--epochs", "60", *common]) == 0
    means = {}
    for run in ("init", "fit"):
        report = tmp_path / run / "eval.csv"
        assert main(["eval", str(tmp_path / run / "checkpoint.flc"), str(data), "--split", "train",
                     "--report", str(report), "-q"]) == 0
        lines = report.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2 + 4 * 15
        means[run] = float(lines[-1].split(",")[2])
    assert means["fit"] < means["init"]


def test_eval_frames_and_baseline(ckpt, data, tmp_path):
    rep = tmp_path / "e" / "r.csv"
    assert main(["eval", str(ckpt), str(data), "--frames", "0,14", "--report", str(rep), "-q"]) == 0
    assert len(rep.read_text(encoding="utf-8").splitlines()) == 2 + 2 * 2
    assert (tmp_path / "e" / C.RESOLVED_NAME).exists()
    assert main(["eval", "bilinear", str(data), "--report", str(tmp_path / "b.csv"), "-q"]) == 0
    assert main(["eval", str(ckpt), str(data), "--frames", "15"]) == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--samples", "8"]) == 0
    out = capsys.readouterr().out
    assert "flsn/end-to-end" in out and "FAIL" not in out
    assert main(["gradcheck", "--samples", "2", "--tol", "1e-30"]) == 2


def test_info_param_constant(capsys):
    assert main(["info", "--nc", "4", "--branches", "2", "--blocks-per-branch", "1", "--size", "16", "16", "-v"]) == 0
    out = capsys.readouterr().out
    assert "parameters  1585" in out and "GFLOPs" in out and "conv2d" in out
    assert main(["info", "--nc", "4", "--branches", "2", "--size", "18", "16"]) == 1


def test_convert_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 65536, size=(1, 1, 6, 5)).astype(np.float32)
    write_tensor(tmp_path / "a.flt", img)
    assert main(["convert", str(tmp_path / "a.flt"), str(tmp_path / "a.pgm"), "-q"]) == 0
    assert main(["convert", str(tmp_path / "a.pgm"), str(tmp_path / "b.flt"), "-q"]) == 0
    assert (tmp_path / "a.flt").read_bytes() == (tmp_path / "b.flt").read_bytes()
    assert main(["convert", str(tmp_path / "a.flt"), str(tmp_path / "a.png")]) == 1


@pytest.mark.parametrize(
    "argv",
    [["frobnicate"], ["train", "--bogus", "3"], ["train", "--nc"], ["synth", "stray"], ["synth", "--regime", "XX"], []],
)
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_missing_files_exit_2(tmp_path, capsys):
    assert main(["infer", str(tmp_path / "none.flc"), "x.flt", "y.flt"]) == 2
    assert "none.flc" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "r"), *TINY]) == 2
    assert "manifest" in capsys.readouterr().err
