import json
import subprocess
import sys

import numpy as np
import pytest

from alcn.cli import main
from conftest import write_idx

SYNTH = ["--dataset", "synth", "--num-classes", "3", "--per-class", "12", "--resolution", "8", "--seed", "0"]
SMALL = ["--set", "arch.channel_widths=[2,4]", "--latent-dim", "4", "--batch-size", "8", "--epochs", "1",
         "--lr-denoiser", "1e-3", "--lr-noisegen", "1e-3", "--log-every", "1"]


def train(run_dir, *extra, target="disk"):
    return main(["train", *SYNTH, "--target", target, *SMALL, "--output-dir", str(run_dir), *extra])


@pytest.fixture(scope="module")
def alcn_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "alcn"
    assert train(run) == 0
    return run


def test_protocol_is_idempotent(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["protocol", *SYNTH, "--target", "square", "--out", str(a)]) == 0
    assert main(["protocol", *SYNTH, "--target", "square", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    m = json.loads(a.read_text())
    assert m["target_class"] == "square"
    assert "train=" in capsys.readouterr().out


def test_protocol_usage_errors(tmp_path, capsys):
    pixels = np.zeros((20, 8, 8), np.uint8)
    write_idx(tmp_path, pixels, np.arange(20) % 10)
    args = ["protocol", "--dataset", "mnist", "--data-path", str(tmp_path), "--seed", "0", "--out", str(tmp_path / "m.json")]
    assert main(args + ["--target", "dog"]) == 2
    assert "valid classes" in capsys.readouterr().err
    assert main(["protocol", "--dataset", "synth", "--target", "disk", "--out", str(tmp_path / "x.json")]) == 2
    assert "seed" in capsys.readouterr().err


def test_train_writes_run_directory(alcn_run):
    for name in ("config.json", "manifest.json", "metrics.csv", "timing.csv", "validation.csv", "summary.json"):
        assert (alcn_run / name).exists(), name
    assert list((alcn_run / "checkpoints").glob("step_*.ckpt"))
    assert list((alcn_run / "grids").glob("*.png"))
    header = (alcn_run / "metrics.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["step", "epoch", "recon_loss"]
    assert not (alcn_run / ".lock").exists()


def test_train_refuses_to_clobber(alcn_run, capsys):
    assert train(alcn_run) == 1
    assert "--overwrite" in capsys.readouterr().err


def test_metrics_are_reproducible(tmp_path):
    assert train(tmp_path / "a") == 0
    assert train(tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_eval_prints_auc_last(alcn_run, capsys):
    assert main(["eval", "--run", str(alcn_run)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1].startswith("AUC_avg=")
    auc = float(lines[-1].split("=")[1])
    summary = json.loads((alcn_run / "eval" / "summary.json").read_text())
    assert summary["auc_avg"] == pytest.approx(auc, abs=1e-6)
    for name in ("scores.csv", "roc.csv", "roc.png"):
        assert (alcn_run / "eval" / name).exists()


def test_eval_errors(alcn_run, tmp_path, capsys):
    ckpt = next((alcn_run / "checkpoints").glob("*.ckpt"))
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(tmp_path / "missing.json")]) == 2
    assert main(["eval"]) == 2
    capsys.readouterr()


def test_eval_config_mismatch_needs_force(tmp_path, capsys):
    run = tmp_path / "r"
    assert train(run) == 0
    snap = json.loads((run / "config.json").read_text())
    snap["optim.lr_denoiser"] = 0.5
    (run / "config.json").write_text(json.dumps(snap))
    with pytest.warns(UserWarning, match="expected"):
        assert main(["eval", "--run", str(run)]) == 1
    assert "--force" in capsys.readouterr().err
    with pytest.warns(UserWarning):
        assert main(["eval", "--run", str(run), "--force"]) == 0


def test_score_single_image(alcn_run, tmp_path, capsys):
    ckpt = next((alcn_run / "checkpoints").glob("*.ckpt"))
    img = tmp_path / "img.npy"
    np.save(img, np.zeros((1, 8, 8), np.float32))
    assert main(["score", "--checkpoint", str(ckpt), "--image", str(img)]) == 0
    assert float(capsys.readouterr().out.strip()) >= 0
    assert main(["score", "--checkpoint", str(ckpt), "--image", str(tmp_path / "none.png")]) == 2


def test_report_rows_and_columns(alcn_run, tmp_path, capsys):
    base = tmp_path / "dae"
    assert train(base, "--strategy", "gaussian", "--sigma", "0.2") == 0
    other = tmp_path / "dae_sq"
    assert train(other, "--strategy", "gaussian", "--sigma", "0.2", target="square") == 0
    for run in (alcn_run, base, other):
        assert main(["eval", "--run", str(run)]) == 0
    out = tmp_path / "table.csv"
    assert main(["report", str(alcn_run), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2
    assert main(["report", str(alcn_run), str(base), str(other), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    # two model rows; classes in dataset order, then the mean
    assert lines[0] == "model,disk,square,AUC_avg"
    assert [l.split(",")[0] for l in lines[1:]] == ["DAE+ALCN", "DAE+Gaussian(sigma=0.2)"]
    assert out.with_suffix(".md").exists()
    assert main(["report", str(tmp_path / "nothing"), "--out", str(out)]) == 2
    capsys.readouterr()


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "alcn", "protocol", *SYNTH, "--target", "disk",
                          "--out", str(tmp_path / "m.json")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
