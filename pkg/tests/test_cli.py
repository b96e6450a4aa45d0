import json

import numpy as np
import pytest

from advseg import cli
from advseg import tensor as T
from advseg.data import CONTOUR, NUCLEUS, load_label, read_manifest, save_image, save_label


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out_dir", out, "--n", 3, "--seed", 7, "--height", 64, "--width", 64,
               "--min_cells", 2, "--max_cells", 3) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--manifest", dataset / "manifest.tsv", "--out_dir", out, "--total_steps", 10,
               "--n_train", 2, "--seed", 1, "--checkpoint_interval", 5) == 0
    return out


# ------------------------------------------------------------------ config


def test_config_file_and_overrides(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nn = 4\nseed=3  # trailing\nout-dir = x\n")
    supplied = cli.read_config_file(tmp_path / "c.cfg")
    supplied.update(cli.parse_overrides(["--n", "2", "--noise_sigma=0.05"]))
    cfg = cli.resolve(cli.schema_for("synth"), supplied)
    assert cfg["n"] == 2 and cfg["seed"] == 3 and cfg["out_dir"] == "x" and cfg["noise_sigma"] == 0.05


@pytest.mark.parametrize("args", [
    ("synth", "--out_dir", "x", "--bogus", "1"),
    ("synth", "--n", "3"),
    ("synth", "--out_dir", "x", "--n", "many"),
    ("gradcheck", "stray"),
    ("fly",),
    ("train", "--config", "/nonexistent/c.cfg"),
])
def test_usage_errors_exit_2(args, capsys):
    assert run(*args) == 2


def test_unknown_key_is_named(capsys):
    assert run("synth", "--out_dir", "x", "--colour", "red") == 2
    assert "colour" in capsys.readouterr().err


def test_bool_coercion():
    cfg = cli.resolve(cli.schema_for("segment"), {"checkpoint": "c", "input": "i", "out_dir": "o", "save_proba": "no"})
    assert cfg["save_proba"] is False


# ------------------------------------------------------------------- synth


def test_synth_writes_pairs_and_manifest(dataset):
    entries = read_manifest(dataset / "manifest.tsv")
    assert len(entries) == 3
    assert len((dataset / "manifest.tsv").read_text().splitlines()) == 3
    assert all(img.is_file() and lab.is_file() for img, lab in entries)


def test_synth_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--out_dir", tmp_path / d, "--n", 5, "--seed", 7) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 11
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_zero_samples(tmp_path):
    assert run("synth", "--out_dir", tmp_path, "--n", 0) == 0
    assert (tmp_path / "manifest.tsv").read_text() == ""


# ------------------------------------------------------------------- train


def test_train_outputs(trained):
    assert (trained / "final.ckpt").is_file()
    assert (trained / "checkpoint_000005.ckpt").is_file()
    lines = (trained / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss_d,loss_e,d_real_mean,d_fake_mean" and len(lines) == 11


def test_train_is_deterministic(dataset, trained, tmp_path):
    assert run("train", "--manifest", dataset / "manifest.tsv", "--out_dir", tmp_path, "--total_steps", 10,
               "--n_train", 2, "--seed", 1) == 0
    assert (tmp_path / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()


def test_train_single_example_and_resume(dataset, trained, tmp_path):
    assert run("train", "--manifest", dataset / "manifest.tsv", "--out_dir", tmp_path, "--total_steps", 10,
               "--n_train", 2, "--seed", 1, "--resume", trained / "checkpoint_000005.ckpt") == 0
    assert (tmp_path / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()


def test_train_cross_entropy_mode(dataset, tmp_path):
    assert run("train", "--manifest", dataset / "manifest.tsv", "--out_dir", tmp_path, "--total_steps", 3,
               "--n_train", 1, "--mode", "cross_entropy") == 0
    rows = (tmp_path / "loss.csv").read_text().splitlines()[1:]
    assert len(rows) == 3 and all(r.split(",")[1] == "nan" for r in rows)


def test_train_rejects_small_manifest(dataset, tmp_path, capsys):
    assert run("train", "--manifest", dataset / "manifest.tsv", "--out_dir", tmp_path, "--n_train", 4) == 2
    assert "fewer than n_train=4" in capsys.readouterr().err


def test_train_nan_exits_3(dataset, tmp_path, monkeypatch):
    real = T.conv2d

    def poisoned(x, kernel, bias, stride=1, padding="same"):
        out = real(x, kernel, bias, stride, padding)
        out.data[...] = np.nan
        return out

    monkeypatch.setattr(T, "conv2d", poisoned)
    assert run("train", "--manifest", dataset / "manifest.tsv", "--out_dir", tmp_path, "--total_steps", 2) == 3
    dump = json.loads((tmp_path / "divergence_dump.json").read_text())
    assert dump["step"] == 1


def test_resume_with_corrupt_checkpoint(dataset, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert run("train", "--manifest", dataset / "manifest.tsv", "--out_dir", tmp_path,
               "--resume", tmp_path / "bad.ckpt") == 2


# ----------------------------------------------------------------- segment


def test_segment_full_frame(trained, tmp_path):
    img = np.random.default_rng(0).random((512, 640))
    save_image(tmp_path / "big.png", img)
    for out in ("o1", "o2"):
        assert run("segment", "--checkpoint", trained / "final.ckpt", "--input", tmp_path / "big.png",
                   "--out_dir", tmp_path / out) == 0
    label = load_label(tmp_path / "o1" / "big.png")
    assert label.shape == (512, 640)
    prob = np.load(tmp_path / "o1" / "big_proba.npy")
    assert prob.shape == (512, 640, 3)
    assert (tmp_path / "o1" / "big.png").read_bytes() == (tmp_path / "o2" / "big.png").read_bytes()


def test_segment_manifest_input(trained, dataset, tmp_path):
    assert run("segment", "--checkpoint", trained / "final.ckpt", "--input", dataset / "manifest.tsv",
               "--out_dir", tmp_path, "--save_proba", "false") == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["frame_0000.png", "frame_0001.png", "frame_0002.png"]


def test_segment_rejects_tiny_image(trained, tmp_path, capsys):
    save_image(tmp_path / "tiny.png", np.zeros((8, 8)))
    assert run("segment", "--checkpoint", trained / "final.ckpt", "--input", tmp_path / "tiny.png",
               "--out_dir", tmp_path / "o") == 2
    assert "9" in capsys.readouterr().err


def test_segment_needs_running_stats(tmp_path):
    from advseg.trainer import TrainConfig, checkpoint_save, init_state

    checkpoint_save(init_state(TrainConfig()), tmp_path / "fresh.ckpt")
    save_image(tmp_path / "a.png", np.zeros((16, 16)))
    assert run("segment", "--checkpoint", tmp_path / "fresh.ckpt", "--input", tmp_path / "a.png",
               "--out_dir", tmp_path / "o") == 2


# ---------------------------------------------------------------- evaluate


def test_evaluate_identical_dirs(dataset, tmp_path, capsys):
    assert run("evaluate", "--pred_dir", dataset / "labels", "--gt_dir", dataset / "labels", "--out_dir", tmp_path) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["precision"] == summary["recall"] == summary["f_measure"] == 1.0
    assert "F=1.0000" in capsys.readouterr().out


def test_evaluate_hand_built_case(tmp_path):
    gt = np.zeros((16, 16), dtype=np.uint8)
    gt[1:7, 1:7] = CONTOUR
    gt[2:6, 2:6] = NUCLEUS          # 16-pixel cell
    gt[9:15, 9:15] = CONTOUR
    gt[10:14, 10:14] = NUCLEUS      # second 16-pixel cell
    pred = gt.copy()
    pred[2:6, 2] = CONTOUR          # first cell shrinks to 12 pixels: J = 0.75
    pred[10:14, 10:14] = CONTOUR    # second cell missed
    pred[0, 12:15] = NUCLEUS        # spurious 3-pixel blob
    for d, lab in (("p", pred), ("g", gt)):
        (tmp_path / d).mkdir()
        save_label(tmp_path / d / "f.png", lab)
    assert run("evaluate", "--pred_dir", tmp_path / "p", "--gt_dir", tmp_path / "g", "--out_dir", tmp_path / "o") == 0
    s = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert (s["tp"], s["fp"], s["fn"]) == (1, 1, 1)
    assert s["precision"] == 0.5 and s["recall"] == 0.5 and s["mean_jaccard"] == 0.75


def test_evaluate_mismatched_sets(dataset, tmp_path, capsys):
    (tmp_path / "p").mkdir()
    save_label(tmp_path / "p" / "frame_0000.png", np.zeros((64, 64), dtype=np.uint8))
    save_label(tmp_path / "p" / "extra.png", np.zeros((64, 64), dtype=np.uint8))
    assert run("evaluate", "--pred_dir", tmp_path / "p", "--gt_dir", dataset / "labels", "--out_dir", tmp_path) == 2
    err = capsys.readouterr().err
    assert "frame_0001.png" in err and "extra.png" in err


# --------------------------------------------------------------- gradcheck


def test_gradcheck_passes(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    for name in ("conv2d", "batchnorm(train)", "batchnorm(infer)", "leaky_relu", "fully_connected", "sigmoid",
                 "softmax_channels", "log", "clamp", "concat_channels", "crop", "estimator end-to-end",
                 "discriminator end-to-end"):
        assert name in out
    assert "FAIL" not in out


def test_gradcheck_catches_a_broken_backward(monkeypatch, capsys):
    from advseg import verify

    real = T.sigmoid

    def skewed(x):
        out = real(x)
        bw = out._backward
        if bw is not None:
            out._backward = lambda g: tuple(1.001 * gi for gi in bw(g))
        return out

    monkeypatch.setattr(T, "sigmoid", skewed)
    monkeypatch.setattr(verify, "_network_checks", lambda rng, per_tensor: {})
    assert run("gradcheck") == 1
    out = capsys.readouterr().out
    assert "FAIL  sigmoid" in out


# ------------------------------------------------------------------ report


def test_report_outputs(trained, tmp_path):
    from advseg.evaluation import MatchResult, compute_metrics, write_metrics_csv

    write_metrics_csv(tmp_path / "m.csv", [("f0", compute_metrics(MatchResult(3, 1, 0, jaccards=[0.8, 0.7, 0.9])))])
    assert run("report", "--loss_csv", trained / "loss.csv", "--metrics_csv", tmp_path / "m.csv",
               "--out_dir", tmp_path / "r") == 0
    for name in ("loss_curve.png", "metrics.png", "summary.txt"):
        assert (tmp_path / "r" / name).stat().st_size > 0
    assert "f0" in (tmp_path / "r" / "summary.txt").read_text()


def test_report_empty_csvs(tmp_path):
    (tmp_path / "l.csv").write_text("")
    (tmp_path / "m.csv").write_text("frame,tp,fp,fn,precision,recall,f,mean_jaccard\n")
    assert run("report", "--loss_csv", tmp_path / "l.csv", "--metrics_csv", tmp_path / "m.csv",
               "--out_dir", tmp_path / "r") == 0
    assert "metric rows: 0" in (tmp_path / "r" / "summary.txt").read_text()


def test_report_malformed_row(tmp_path, capsys):
    (tmp_path / "l.csv").write_text("step,loss_d,loss_e,d_real_mean,d_fake_mean\n1,0.1,0.2,0.3\n")
    (tmp_path / "m.csv").write_text("")
    assert run("report", "--loss_csv", tmp_path / "l.csv", "--metrics_csv", tmp_path / "m.csv",
               "--out_dir", tmp_path / "r") == 2
    assert "l.csv:2" in capsys.readouterr().err
