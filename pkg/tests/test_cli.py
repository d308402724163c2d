import csv
import filecmp
import json
import os

import numpy as np
import pytest
from PIL import Image

from sdflow import layers as L
from sdflow.cli import main
from sdflow.config import defaults
from sdflow.trainer import LOG_COLUMNS, read_log

TOY = """# tiny model for command-line tests
flow_steps = 1
cond_flow_steps = 1
hf_blocks = 1
deg_blocks = 1
width = 8
estimator_layers = 1
dm_blocks = 1
n_components = 2
disc_width = 4
batch = 2
patch = 16
dtype = float64
iters_pretrain = 3
iters_forward = 3
iters_finetune = 2
"""


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.cfg"
    cfg.write_text(TOY)
    data = root / "corpus"
    assert main(["synth-data", "--out", str(data), "--n", "20", "--size", "32", "--scale", "4", "--seed", "3"]) == 0
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    return root, cfg, data, run / "model.ckpt"


def _png_shape(path):
    with Image.open(path) as im:
        return im.size


# -- synth-data --------------------------------------------------------------------

def test_synth_data_contract_and_determinism(tmp_path, capsys):
    args = ["synth-data", "--n", "64", "--size", "64", "--scale", "4", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert "wrote 64" in capsys.readouterr().out
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for sub in ("hr", "lr"):
        names = sorted(os.listdir(tmp_path / "a" / sub))
        assert len(names) == 64
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, names, shallow=False)
        assert not mismatch and not errors
    assert filecmp.cmp(tmp_path / "a" / "theta.csv", tmp_path / "b" / "theta.csv", shallow=False)
    assert _png_shape(tmp_path / "a" / "lr" / "000000.png") == (16, 16)


def test_synth_data_bad_size(tmp_path, capsys):
    code = main(["synth-data", "--n", "2", "--size", "63", "--scale", "4", "--out", str(tmp_path / "c")])
    assert code == 2 and "divisible" in capsys.readouterr().err


def test_bad_flags_and_unknown_key(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth-data", "--n", "many"])
    assert e.value.code == 2
    assert main(["synth-data", "--set", "bogus_key=1", "--out", str(tmp_path / "d")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("flow_steps = 2\nnot_a_key = 3\n")
    assert main(["synth-data", "--config", str(bad), "--out", str(tmp_path / "e")]) == 2


def test_help_documents_every_key(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for key in defaults():
        assert key in out


# -- train -------------------------------------------------------------------------

def test_train_pretrain_iters(toy, tmp_path):
    _, cfg, data, _ = toy
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out),
                 "--phase", "pretrain", "--iters", "200"]) == 0
    assert (out / "model.ckpt").exists()
    rows = read_log(str(out / "loss.csv"))
    assert len(rows) == 200 and all(np.isfinite(r["nll_y"]) for r in rows)


def test_loss_csv_columns(toy):
    root, *_ = toy
    with open(root / "run" / "loss.csv") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = list(reader)
    assert tuple(header) == LOG_COLUMNS and len(rows) == 8
    phase3 = [dict(zip(header, r)) for r in rows if r[1] == "3"]
    for k in ("nll_x", "nll_y", "content", "domain_gen", "sr_pix", "sr_per", "sr_gan", "ds_pix", "ds_per", "ds_gan"):
        assert all(np.isfinite(float(r[k])) for r in phase3)


def test_resume_matches_uninterrupted(toy, tmp_path):
    root, cfg, data, _ = toy
    part = tmp_path / "part"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(part), "--phase", "pretrain"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(part),
                 "--resume", str(part / "model.ckpt")]) == 0
    full = read_log(str(root / "run" / "loss.csv"))
    resumed = read_log(str(part / "loss.csv"))
    assert [r["total"] for r in resumed] == [r["total"] for r in full]
    with open(part / "model.ckpt", "rb") as a, open(root / "run" / "model.ckpt", "rb") as b:
        assert a.read() == b.read()


def test_divergence_exit_code(toy, tmp_path, capsys):
    _, cfg, data, _ = toy
    out = tmp_path / "div"
    code = main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out),
                 "--set", "lr_model=1e12", "--set", "grad_clip=1e30"])
    assert code == 4
    assert "diverged" in capsys.readouterr().err
    assert (out / "model.ckpt").exists()


def test_missing_corpus_is_io_error(toy, tmp_path):
    _, cfg, *_ = toy
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 3


# -- sr / downscale ------------------------------------------------------------------

def test_sr_tau_zero_identical(toy, tmp_path):
    _, _, data, ck = toy
    out = tmp_path / "sr"
    lr = data / "lr" / "000000.png"
    assert main(["sr", "--checkpoint", str(ck), "--input", str(lr), "--out", str(out),
                 "--tau", "0", "--n-samples", "3"]) == 0
    files = [out / f"000000_s{k}.png" for k in range(3)]
    assert all(f.read_bytes() == files[0].read_bytes() for f in files)
    assert _png_shape(files[0]) == (32, 32)


def test_sr_diversity_reported(toy, tmp_path, capsys):
    _, _, data, ck = toy
    assert main(["sr", "--checkpoint", str(ck), "--input", str(data / "lr" / "000001.png"),
                 "--out", str(tmp_path), "--tau", "0.8", "--n-samples", "10"]) == 0
    line = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("diversity")][0]
    assert float(line.split()[1]) > 0


def test_sr_paper_size(toy, tmp_path):
    _, _, _, ck = toy
    img = (np.random.default_rng(0).random((48, 48, 3)) * 255).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "in.png")
    assert main(["sr", "--checkpoint", str(ck), "--input", str(tmp_path / "in.png"), "--out", str(tmp_path / "o")]) == 0
    assert _png_shape(tmp_path / "o" / "in_s0.png") == (192, 192)


def test_downscale(toy, tmp_path):
    _, _, data, ck = toy
    assert main(["downscale", "--checkpoint", str(ck), "--input", str(data / "hr"), "--out", str(tmp_path),
                 "--tau", "0", "--n-samples", "2"]) == 0
    a, b = tmp_path / "000003_s0.png", tmp_path / "000003_s1.png"
    assert _png_shape(a) == (8, 8) and a.read_bytes() == b.read_bytes()


def test_checkpoint_mismatch_exit_5(toy, tmp_path, capsys):
    _, _, data, ck = toy
    code = main(["sr", "--checkpoint", str(ck), "--input", str(data / "lr" / "000000.png"),
                 "--out", str(tmp_path), "--set", "flow_steps=2"])
    assert code == 5 and "entry" in capsys.readouterr().err
    garbage = tmp_path / "junk.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    assert main(["sr", "--checkpoint", str(garbage), "--input", str(data / "lr"), "--out", str(tmp_path)]) == 5
    assert main(["sr", "--checkpoint", str(tmp_path / "none.ckpt"), "--input", str(data / "lr"),
                 "--out", str(tmp_path)]) == 3


# -- verify ----------------------------------------------------------------------------

def test_verify_fresh_build_passes(tmp_path, capsys):
    report = tmp_path / "verify.json"
    assert main(["verify", "--report", str(report)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "suite,check,value,tolerance,passed,detail"
    rows = list(csv.reader(out[1:]))
    assert rows and all(r[4] == "PASS" for r in rows)
    data = json.loads(report.read_text())
    assert data["passed"] and {c["suite"] for c in data["checks"]} == {"invertibility", "logdet", "gradient"}
    assert all("tol" in c for c in data["checks"])
    tols = {c["suite"]: c["tol"] for c in data["checks"] if c["name"] != "domain_stop_gradient"
            and c["name"] != "composition_sum"}
    assert tols == {"invertibility": 1e-5, "logdet": 1e-4, "gradient": 1e-3}


def test_verify_catches_injected_logdet_bug(monkeypatch, capsys):
    def buggy(self, x):
        # drops the H*W factor
        return torch.log(torch.abs(self.scale)).sum().expand(x.shape[0])

    import torch
    monkeypatch.setattr(L.ActNorm, "_logdet", buggy)
    assert main(["verify", "--suites", "logdet"]) == 1
    rows = {r[1]: r[4] for r in csv.reader(capsys.readouterr().out.splitlines()[1:])}
    assert rows["actnorm"] == "FAIL"
    assert rows["inv1x1"] == "PASS" and rows["squeeze"] == "PASS"


# -- eval ----------------------------------------------------------------------------

def test_eval_outputs(toy, tmp_path, capsys):
    root, _, data, ck = toy
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(ck), "--data", str(data), "--out", str(out), "--n-samples", "2",
                 "--sweep", "--log", str(root / "run" / "loss.csv")]) == 0
    with open(out / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert set(rows[0]) == {"image_id", "metric", "value"}
    metrics = {r["metric"] for r in rows}
    assert {"sr_bicubic_psnr_y", "sr_bicubic_ssim_y", "ds_bicubic_psnr_y"} <= metrics
    assert {"sr_tau0_psnr_y", "sr_tau0.8_diversity", "ds_tau0.8_psnr_y"} <= metrics
    assert all(np.isfinite(float(r["value"])) or r["metric"].endswith("psnr_y") for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_images"] == 2
    with open(out / "tau_sweep.csv") as f:
        sweep = list(csv.DictReader(f))
    assert [float(r["tau"]) for r in sweep] == [0.0, 0.4, 0.8, 1.2]
    assert (out / "tau_sweep.png").stat().st_size > 0 and (out / "losses.png").stat().st_size > 0
