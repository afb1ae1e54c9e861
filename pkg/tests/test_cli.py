import json

import numpy as np
import pytest

from vidmatte import cli
from vidmatte.predictor import load_alpha, save_alpha
from vidmatte.synthcomp import load_sample, read_manifest

TINY_CFG = """
dim=8
n_heads=2
n_points=1
backbone_channels=4,4,8,8
window=2
resize_sides=32
epochs=2
decay_epochs=1
"""
SMALL = ["--set", "frames=4", "--set", "height=32", "--set", "width=32"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert cli.main(["synthesize", "--n", "2", "--seed", "5", "--out", str(root / "data")] + SMALL) == 0
    return root


def test_synthesize_outputs(work, tmp_path):
    paths = read_manifest(work / "data" / "train.txt")
    assert len(paths) == 2 and all(p.exists() for p in paths)
    assert load_sample(paths[0]).shape == (4, 32, 32)
    assert cli.main(["synthesize", "--n", "2", "--seed", "5", "--out", str(tmp_path)] + SMALL) == 0
    for a, b in zip(paths, read_manifest(tmp_path / "train.txt")):
        assert a.read_bytes() == b.read_bytes()
    assert "command=synthesize" in (tmp_path / cli.RESOLVED_NAME).read_text()


def test_train_infer_eval_pipeline(work):
    manifest = str(work / "data" / "train.txt")
    cfg = str(work / "tiny.cfg")
    runs = []
    for name in ("a", "b"):
        out = work / f"train_{name}"
        assert cli.main(["train", manifest, "--config", cfg, "--out", str(out)]) == 0
        runs.append(out)
    for f in ("checkpoint.vmck", "train_log.csv"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
    log = (runs[0] / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,epoch,lr,focal,dice,temporal,total" and len(log) == 1 + 2 * 2 * 2
    assert "config_hash=" in (runs[0] / cli.RESOLVED_NAME).read_text()

    pred = work / "pred"
    assert cli.main(["infer", str(runs[0] / "checkpoint.vmck"), manifest, "--out", str(pred), "--window", "3"]) == 0
    alphas = [load_alpha(p) for p in sorted(pred.glob("*.vmka"))]
    assert len(alphas) == 2 and all(a.shape == (4, 32, 32, 1) for a in alphas)

    reports = []
    for name in ("r1", "r2"):
        assert cli.main(["eval", str(pred), manifest, "--out", str(work / name)]) == 0
        reports.append(work / name)
    for f in ("report.json", "report.csv"):
        assert (reports[0] / f).read_bytes() == (reports[1] / f).read_bytes()
    data = json.loads((reports[0] / "report.json").read_text())
    assert all(np.isfinite(data["mean"][k]) for k in ("mad", "mse", "grad", "conn", "dtssd"))


def test_identity_predictions_score_zero(work, tmp_path):
    manifest = work / "data" / "train.txt"
    pred = tmp_path / "pred"
    pred.mkdir()
    for p in read_manifest(manifest):
        save_alpha(load_sample(p).alpha, pred / (p.stem + ".vmka"))
    assert cli.main(["eval", str(pred), str(manifest), "--out", str(tmp_path / "rep")]) == 0
    mean = json.loads((tmp_path / "rep" / "report.json").read_text())["mean"]
    assert all(mean[k] == 0 for k in ("mad", "mse", "grad", "conn", "dtssd"))


def test_missing_prediction_exits_2(work, tmp_path, capsys):
    (tmp_path / "pred").mkdir()
    code = cli.main(["eval", str(tmp_path / "pred"), str(work / "data" / "train.txt"), "--out", str(tmp_path / "r")])
    assert code == cli.EXIT_IO
    assert "train_0000" in capsys.readouterr().err


def test_resume_matches_uninterrupted(work):
    manifest = str(work / "data" / "train.txt")
    cfg = str(work / "tiny.cfg")
    assert cli.main(["train", manifest, "--config", cfg, "--until-epoch", "1", "--out", str(work / "half")]) == 0
    assert cli.main(["train", manifest, "--config", cfg, "--resume", str(work / "half" / "checkpoint.vmck"),
                     "--out", str(work / "rest")]) == 0
    assert cli.main(["train", manifest, "--config", cfg, "--out", str(work / "whole")]) == 0
    assert (work / "rest" / "checkpoint.vmck").read_bytes() == (work / "whole" / "checkpoint.vmck").read_bytes()


def test_usage_errors(work, tmp_path):
    manifest = str(work / "data" / "train.txt")
    assert cli.main(["train", manifest, "--set", "bogus=1", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["train", manifest, "--set", "window", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--out", str(tmp_path)])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE


def test_io_errors(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["synthesize", "--n", "1", "--out", str(blocker / "sub")]) == cli.EXIT_IO
    assert cli.main(["train", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "o")]) == cli.EXIT_IO
    bad = tmp_path / "bad.vmck"
    bad.write_bytes(b"garbage!")
    assert cli.main(["infer", str(bad), str(tmp_path / "m.txt"), "--out", str(tmp_path / "o")]) == cli.EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_3(work, tmp_path, capsys):
    manifest = str(work / "data" / "train.txt")
    code = cli.main(["train", manifest, "--config", str(work / "tiny.cfg"), "--set", "lr_other=1e300",
                     "--set", "lr_backbone=1e300", "--set", "grad_clip=0", "--out", str(tmp_path)])
    assert code == cli.EXIT_NUMERIC
    assert "numeric failure" in capsys.readouterr().err


def test_threads_env(monkeypatch):
    monkeypatch.setenv("VMF_THREADS", "3")
    assert cli.n_threads() == 3
    monkeypatch.setenv("VMF_THREADS", "zero")
    with pytest.raises(cli.UsageError):
        cli.n_threads()


def test_gradcheck_op_scope_is_deterministic(tmp_path, capsys):
    assert cli.main(["gradcheck", "--scope", "op", "--seeds", "2", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["gradcheck", "--scope", "op", "--seeds", "2", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "gradcheck.txt").read_text()
    assert a == (tmp_path / "b" / "gradcheck.txt").read_text()
    assert "matmul" in a


def test_ablate_rows(work, tmp_path):
    code = cli.main(["ablate", str(work / "data" / "train.txt"), "--config", str(work / "tiny.cfg"),
                     "--set", "epochs=1", "--set", "decay_epochs=", "--out", str(tmp_path)])
    assert code == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["row"] for r in rows] == ["none", "+SFTM", "+LQTM", "+both"]
    assert len({r["config_hash"] for r in rows}) == 4
    assert len({r["seed"] for r in rows}) == 1
    assert all(np.isfinite(r[k]) for r in rows for k in ("mad", "mse", "grad", "conn", "dtssd"))
    assert (tmp_path / "ablation.csv").read_text().count("\n") == 5
