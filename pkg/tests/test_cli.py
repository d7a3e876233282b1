import csv
import json
import subprocess
import sys
from importlib.resources import files
from pathlib import Path

import numpy as np
import pytest

from lrrfuse import cli
from lrrfuse import network as net
from lrrfuse import trainer as tr
from lrrfuse.imageio import read_gray, write_gray

DATA = files("lrrfuse") / "data"
HERE = Path(__file__).parent


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def tiny_model(tmp_path):
    path = tmp_path / "m.lrrw"
    assert run("init", "--out", path, "--N", 4, "--T", 2, "--seed", 5) == 0
    return path


@pytest.fixture
def pair(tmp_path):
    ir, vi = tr.synthetic_pair(np.random.default_rng(9), 32)
    write_gray(tmp_path / "ir.png", ir[0])
    write_gray(tmp_path / "vi.png", vi[0])
    return tmp_path / "ir.png", tmp_path / "vi.png"


def _dirs(tmp_path, n, size, seed):
    ir_dir, vi_dir = tmp_path / "ir", tmp_path / "vi"
    ir_dir.mkdir()
    vi_dir.mkdir()
    ds = tr.synthetic_dataset(n, size, seed)
    for i in range(n):
        write_gray(ir_dir / f"p{i}.png", ds[i][0][0])
        write_gray(vi_dir / f"p{i}.png", ds[i][1][0])
    return ir_dir, vi_dir


# -- init ------------------------------------------------------------------


def test_init_lrrnet_matches_library(tmp_path):
    path = tmp_path / "m.lrrw"
    assert run("init", "--out", path, "--N", 4, "--T", 2, "--seed", 3) == 0
    got, want = net.load_params(path), net.init_params(3, 4, 3, 2)
    for (_, a), (_, b) in zip(got.named(), want.named()):
        assert np.array_equal(a, b)


def test_init_dictionary(tmp_path):
    from lrrfuse.lista import load_dictionary

    assert run("init", "--kind", "dictionary", "--out", tmp_path / "d.lrrw", "--patch-size", 4, "--n-low", 3) == 0
    d, patch = load_dictionary(tmp_path / "d.lrrw")
    assert patch == 4 and d.m1 == 3 and d.m2 == 13


# -- decompose -------------------------------------------------------------


@pytest.mark.parametrize("mode", ["matrix", "conv"])
def test_decompose_zero_image(tmp_path, tiny_model, mode):
    write_gray(tmp_path / "z.png", np.zeros((24, 24)))
    model = tiny_model
    if mode == "matrix":
        model = tmp_path / "d.lrrw"
        run("init", "--kind", "dictionary", "--out", model)
    assert run("decompose", "--input", tmp_path / "z.png", "--mode", mode, "--model", model, "--out-base", tmp_path / "o") == 0
    for part in ("base", "salient"):
        assert not read_gray(tmp_path / f"o.{part}.png").any()
    side = json.loads((tmp_path / "o.json").read_text())
    assert side["mode"] == mode and side["iterations"]


def test_decompose_missing_model(tmp_path, pair, capsys):
    code = run("decompose", "--input", pair[1], "--mode", "conv", "--model", tmp_path / "none.lrrw", "--out-base", tmp_path / "o")
    assert code == 2
    assert "model not found" in capsys.readouterr().err
    assert not list(tmp_path.glob("o.*"))


def test_decompose_wrong_model_kind(tmp_path, pair, tiny_model):
    code = run("decompose", "--input", pair[1], "--mode", "matrix", "--model", tiny_model, "--out-base", tmp_path / "o")
    assert code == 2
    assert not list(tmp_path.glob("o.*"))


@pytest.mark.parametrize("mode", ["matrix", "conv"])
def test_decompose_deterministic(tmp_path, pair, tiny_model, mode):
    model = tiny_model
    if mode == "matrix":
        model = tmp_path / "d.lrrw"
        run("init", "--kind", "dictionary", "--out", model)
    for out in ("a", "b"):
        assert run("decompose", "--input", pair[1], "--mode", mode, "--model", model, "--out-base", tmp_path / out, "--format", "pgm") == 0
    for part in ("base.pgm", "salient.pgm", "json"):
        assert (tmp_path / f"a.{part}").read_bytes() == (tmp_path / f"b.{part}").read_bytes()


def test_decompose_conv_matches_library(tmp_path, pair, tiny_model):
    from lrrfuse import llrr
    from lrrfuse.imageio import quantize

    run("decompose", "--input", pair[0], "--mode", "conv", "--branch", "ir", "--model", tiny_model, "--out-base", tmp_path / "o")
    p = net.load_params(tiny_model)
    img = read_gray(pair[0])
    L, S = (t.data[0] for t in llrr.split_project(llrr.stack_forward(img[None], p.branch_ir), p.C21, p.C22))
    assert np.array_equal(np.asarray(read_gray(tmp_path / "o.base.png") * 255).round().astype(np.uint8), quantize(L))
    assert np.array_equal(np.asarray(read_gray(tmp_path / "o.salient.png") * 255).round().astype(np.uint8), quantize(S))


# -- fuse ------------------------------------------------------------------


def test_fuse_same_input(tmp_path, pair, tiny_model):
    assert run("fuse", "--ir", pair[1], "--vi", pair[1], "--model", tiny_model, "--out", tmp_path / "f.png") == 0
    f = read_gray(tmp_path / "f.png")
    assert f.shape == (32, 32) and np.isfinite(f).all()


def test_fuse_size_mismatch(tmp_path, pair, tiny_model, capsys):
    write_gray(tmp_path / "small.png", np.zeros((16, 20)))
    assert run("fuse", "--ir", pair[0], "--vi", tmp_path / "small.png", "--model", tiny_model, "--out", tmp_path / "f.png") == 2
    assert "size" in capsys.readouterr().err
    assert not (tmp_path / "f.png").exists()


def test_fuse_missing_input(tmp_path, tiny_model, pair):
    assert run("fuse", "--ir", tmp_path / "nope.png", "--vi", pair[1], "--model", tiny_model, "--out", tmp_path / "f.png") == 2


def test_fuse_golden(tmp_path):
    out = tmp_path / "f.png"
    assert run("fuse", "--ir", DATA / "sample_ir.png", "--vi", DATA / "sample_vi.png", "--model", DATA / "tiny_model.lrrw", "--out", out) == 0
    assert out.read_bytes() == (DATA / "golden_fused.png").read_bytes()


def test_fuse_pgm_output(tmp_path, pair, tiny_model):
    assert run("fuse", "--ir", pair[0], "--vi", pair[1], "--model", tiny_model, "--out", tmp_path / "f.pgm") == 0
    assert (tmp_path / "f.pgm").read_bytes().startswith(b"P5")


def test_fuse_bad_extension(tmp_path, pair, tiny_model):
    assert run("fuse", "--ir", pair[0], "--vi", pair[1], "--model", tiny_model, "--out", tmp_path / "f.jpg") == 2
    assert not (tmp_path / "f.jpg").exists()


# -- train -----------------------------------------------------------------

TRAIN = ("--N", 4, "--T", 2, "--image-size", 16, "--batch-size", 2, "--max-iterations", 3)


def test_train_lr_zero_returns_init(tmp_path):
    ir, vi = _dirs(tmp_path, 3, 20, 1)
    init = tmp_path / "init.lrrw"
    run("init", "--out", init, "--N", 4, "--T", 2, "--seed", 8)
    assert run("train", "--ir-dir", ir, "--vi-dir", vi, "--init", init, "--out", tmp_path / "m.lrrw", "--learning-rate", 0, *TRAIN) == 0
    for (_, a), (_, b) in zip(net.load_params(init).named(), net.load_params(tmp_path / "m.lrrw").named()):
        assert np.array_equal(a, b)
    assert len(tr.read_trace(tmp_path / "m.csv")) == 3


def test_train_same_seed_identical_trace(tmp_path):
    ir, vi = _dirs(tmp_path, 4, 16, 2)
    for name in ("a", "b"):
        assert run("train", "--ir-dir", ir, "--vi-dir", vi, "--out", tmp_path / f"{name}.lrrw", "--seed", 4, "--learning-rate", 1e-3, *TRAIN) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.lrrw").read_bytes() == (tmp_path / "b.lrrw").read_bytes()


def test_train_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"N": 4, "T": 2, "image_size": 16, "batch_size": 2, "max_iterations": 2, "learning_rate": 0.5, "gamma1": 2.0}))
    assert run("train", "--synthetic", 3, "--config", cfg, "--learning-rate", 0, "--out", tmp_path / "m.lrrw") == 0
    meta = net.load_params(tmp_path / "m.lrrw").metadata
    stored = json.loads(meta["train_config"])
    assert stored["learning_rate"] == 0 and stored["loss"]["gamma1"] == 2.0 and meta["iterations"] == 2


def test_train_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learnig_rate": 1}))
    assert run("train", "--synthetic", 2, "--config", cfg, "--out", tmp_path / "m.lrrw") == 2
    assert not (tmp_path / "m.lrrw").exists()


def test_train_unknown_flag_is_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "--synthetic", 2, "--out", tmp_path / "m.lrrw", "--bogus", 1)
    assert exc.value.code == 2


def test_train_invalid_value_before_files(tmp_path):
    assert run("train", "--synthetic", 2, "--out", tmp_path / "m.lrrw", "--image-size", 20) == 2
    assert list(tmp_path.iterdir()) == []


def test_train_empty_dirs(tmp_path):
    ir, vi = _dirs(tmp_path, 0, 16, 0)
    assert run("train", "--ir-dir", ir, "--vi-dir", vi, "--out", tmp_path / "m.lrrw") == 2


def test_train_pairing_error(tmp_path, capsys):
    ir, vi = _dirs(tmp_path, 2, 16, 0)
    write_gray(ir / "lonely.png", np.zeros((16, 16)))
    assert run("train", "--ir-dir", ir, "--vi-dir", vi, "--out", tmp_path / "m.lrrw", *TRAIN) == 2
    assert "lonely" in capsys.readouterr().err


def test_train_failure_removes_partial_outputs(tmp_path, monkeypatch):
    ckpt = tmp_path / "ck"
    calls = []

    def boom(row):
        calls.append(row)
        if len(calls) == 3:
            raise cli.GradientError("synthetic failure", "x")

    real_train = tr.train
    monkeypatch.setattr(tr, "train", lambda *a, **k: real_train(*a, **{**k, "on_iteration": boom}))
    code = run("train", "--synthetic", 3, "--out", tmp_path / "m.lrrw", "--checkpoint-every", 1, "--checkpoint-dir", ckpt, *TRAIN)
    assert code == 1
    assert not (tmp_path / "m.lrrw").exists() and not (tmp_path / "m.csv").exists()
    assert list(ckpt.iterdir()) == []


def test_train_checkpoints_and_trace_path(tmp_path):
    trace = tmp_path / "t" / "trace.csv"
    trace.parent.mkdir()
    assert run("train", "--synthetic", 3, "--out", tmp_path / "m.lrrw", "--trace", trace, "--checkpoint-every", 2, "--checkpoint-dir", tmp_path / "ck", *TRAIN) == 0
    assert trace.read_text().startswith("iter,pixel,shallow,middle,deep,total\n")
    assert [p.name for p in sorted((tmp_path / "ck").iterdir())] == ["checkpoint_000002.lrrw"]


# -- eval ------------------------------------------------------------------


def test_eval_empty_dirs(tmp_path):
    for d in ("f", "i", "v"):
        (tmp_path / d).mkdir()
    assert run("eval", "--fused-dir", tmp_path / "f", "--ir-dir", tmp_path / "i", "--vi-dir", tmp_path / "v", "--out", tmp_path / "r.csv") == 0
    assert (tmp_path / "r.csv").read_text() == "name,En,SD,MI,SSIMm,VIFm,Nabf\n"


def test_eval_identical_triples(tmp_path):
    img = np.random.default_rng(1).random((48, 48))
    for d in ("f", "i", "v"):
        (tmp_path / d).mkdir()
        write_gray(tmp_path / d / "x.png", img)
    assert run("eval", "--fused-dir", tmp_path / "f", "--ir-dir", tmp_path / "i", "--vi-dir", tmp_path / "v", "--out", tmp_path / "r.csv", "--text", tmp_path / "r.txt") == 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["name"] for r in rows] == ["x", "mean"]
    assert abs(float(rows[0]["SSIMm"]) - 1) <= 1e-9
    assert float(rows[0]["Nabf"]) <= 1e-6
    assert "SSIMm↑" in (tmp_path / "r.txt").read_text(encoding="utf-8")


def test_eval_missing_fused_file(tmp_path):
    ir, vi = _dirs(tmp_path, 2, 48, 0)
    (tmp_path / "f").mkdir()
    write_gray(tmp_path / "f" / "p0.png", np.zeros((48, 48)))
    assert run("eval", "--fused-dir", tmp_path / "f", "--ir-dir", ir, "--vi-dir", vi, "--out", tmp_path / "r.csv") == 2
    assert not (tmp_path / "r.csv").exists()


def test_eval_synthetic_golden(tmp_path):
    ir, vi = tmp_path / "ir", tmp_path / "vi"
    fused = tmp_path / "fused"
    for d in (ir, vi, fused):
        d.mkdir()
    ds = tr.synthetic_dataset(3, 48, seed=21)
    for i in range(3):
        write_gray(ir / f"s{i}.png", ds[i][0][0])
        write_gray(vi / f"s{i}.png", ds[i][1][0])
        assert run("fuse", "--ir", ir / f"s{i}.png", "--vi", vi / f"s{i}.png", "--model", DATA / "tiny_model.lrrw", "--out", fused / f"s{i}.png") == 0
    assert run("eval", "--fused-dir", fused, "--ir-dir", ir, "--vi-dir", vi, "--out", tmp_path / "r.csv", "--threads", 2) == 0
    got = list(csv.reader(open(tmp_path / "r.csv")))
    want = list(csv.reader(open(HERE / "data" / "eval_golden.csv")))
    assert got[0] == want[0] and [r[0] for r in got] == [r[0] for r in want]
    np.testing.assert_allclose(np.array([r[1:] for r in got[1:]], float), np.array([r[1:] for r in want[1:]], float), rtol=1e-12, atol=0)


# -- check-grad ------------------------------------------------------------


def test_check_grad_passes(capsys):
    assert run("check-grad") == 0
    out = capsys.readouterr().out
    assert "checks passed" in out and "FAIL" not in out


def test_check_grad_fault_injection(capsys):
    assert run("check-grad", "--inject-fault") == 1
    assert "FAIL" in capsys.readouterr().out


@pytest.mark.parametrize("seed", [1, 17])
def test_check_grad_seed_does_not_change_verdict(seed):
    assert run("check-grad", "--seed", seed) == 0


# -- threads and process-level behavior -------------------------------------


@pytest.mark.parametrize("value", ["0", "-3", "many"])
def test_bad_thread_env(monkeypatch, tmp_path, value):
    monkeypatch.setenv("LRRFUSE_THREADS", value)
    with pytest.raises(cli.CliError, match="LRRFUSE_THREADS"):
        cli.resolve_threads(None)


def test_thread_flag_beats_env(monkeypatch):
    monkeypatch.setenv("LRRFUSE_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads("2") == 2


def test_bad_threads_flag_exit_code(tmp_path, pair, tiny_model):
    assert run("fuse", "--ir", pair[0], "--vi", pair[1], "--model", tiny_model, "--out", tmp_path / "f.png", "--threads", "0") == 2


def test_console_entry_point(tmp_path, pair, tiny_model):
    proc = subprocess.run([sys.executable, "-m", "lrrfuse.cli", "fuse", "--ir", str(pair[0]), "--vi", str(pair[1]), "--model", str(tiny_model), "--out", str(tmp_path / "f.png")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "lrrfuse.cli", "fuse", "--ir", "x", "--vi", "y", "--model", str(tmp_path / "no.lrrw"), "--out", str(tmp_path / "g.png")], capture_output=True, text=True)
    assert proc.returncode == 2
