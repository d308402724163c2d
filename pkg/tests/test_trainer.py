import csv
import dataclasses
import hashlib
import math

import numpy as np
import pytest
import torch

from sdflow import checkpoint as ckpt
from sdflow import trainer as T
from sdflow.config import TrainConfig
from sdflow.data import synth_corpus
from sdflow.errors import (CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError, ConfigError,
                           TrainingDivergenceError)
from sdflow.model import ModelConfig
from sdflow.numerics import precision
from sdflow.objectives import make_proxy


def toy_config(**kw):
    base = dict(model=ModelConfig.toy(2), iters_pretrain=3, iters_forward=3, iters_finetune=3,
                batch=2, patch=8, dtype="float64", seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(20, 16, 2, seed=1)


def _hash(module):
    h = hashlib.sha256()
    for t in module.state_dict().values():
        h.update(t.detach().numpy().tobytes())
    return h.hexdigest()


def _losses(rows):
    return [(r["iter"], r["total"]) for r in rows]


def test_lr_schedule():
    assert T.lr_at(0, 100, 1e-4) == 1e-4
    assert T.lr_at(50, 100, 1e-4) == 5e-5
    assert T.lr_at(96, 100, 1e-4) == pytest.approx(1e-4 / 16, rel=1e-15)
    assert T.lr_at(96, 100, 1e-5) == pytest.approx(1e-5 / 16, rel=1e-15)


def test_config_validation():
    with pytest.raises(ConfigError):
        toy_config(lr_model=0)
    with pytest.raises(ConfigError):
        toy_config(patch=7)
    with pytest.raises(ConfigError):
        toy_config(milestones=(0.9, 0.5))
    cfg = toy_config()
    assert cfg.phase_bounds() == {"pretrain": (0, 3), "forward": (3, 6), "finetune": (6, 9)}
    assert [T.phase_of(cfg, i) for i in (0, 3, 8)] == [1, 2, 3]


def test_fifty_iteration_determinism(corpus):
    cfg = toy_config(iters_pretrain=10, iters_forward=20, iters_finetune=20)
    _, a = T.train(cfg, corpus)
    _, b = T.train(cfg, corpus)
    assert len(a) == 50
    for ra, rb in zip(a, b):
        assert all((ra[k] == rb[k]) or (math.isnan(ra[k]) and math.isnan(rb[k])) for k in T.LOG_COLUMNS)


def test_phase_terms_in_log(corpus, tmp_path):
    path = tmp_path / "loss.csv"
    T.train(toy_config(), corpus, log_path=str(path))
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0].keys()) == T.LOG_COLUMNS and len(rows) == 9
    active = {1: {"nll_x", "nll_y", "content"}, 2: {"domain_gen", "disc_domain"},
              3: {"sr_pix", "sr_per", "sr_gan", "ds_pix", "ds_per", "ds_gan", "disc_sr", "disc_lr"}}
    for r in rows:
        ph = int(r["phase"])
        on = set().union(*(active[p] for p in active if p <= ph))
        for k in set().union(*active.values()):
            assert math.isfinite(float(r[k])) == (k in on), (ph, k)


def test_checkpoint_byte_identical(corpus, tmp_path):
    state, _ = T.train(toy_config(), corpus, phase="pretrain")
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    T.save_checkpoint(state, str(a))
    T.save_checkpoint(T.load_checkpoint(str(a)), str(b))
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_wrong_k_names_entry(corpus, tmp_path):
    state = T.new_state(toy_config())
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(state, str(path))
    wrong = toy_config(model=dataclasses.replace(ModelConfig.toy(2), flow_steps=2))
    with pytest.raises(CheckpointShapeError, match=r"entry model\."):
        T.load_checkpoint(str(path), wrong)
    wider = toy_config(model=dataclasses.replace(ModelConfig.toy(2), width=6))
    with pytest.raises(CheckpointShapeError, match=r"entry model\..*shape"):
        T.load_checkpoint(str(path), wider)


def test_checkpoint_version_and_truncation(tmp_path):
    path = tmp_path / "c.ckpt"
    ckpt.write_entries(str(path), {"a": torch.arange(4.0, dtype=torch.float64), "b": torch.tensor([True])})
    data = path.read_bytes()
    assert data[:8] == b"SDFLOWCK"
    back = ckpt.read_entries(str(path))
    assert torch.equal(back["a"], torch.arange(4.0, dtype=torch.float64)) and back["b"].dtype == torch.bool
    (tmp_path / "v.ckpt").write_bytes(data[:8] + (2).to_bytes(4, "little") + data[12:])
    with pytest.raises(CheckpointVersionError):
        ckpt.read_entries(str(tmp_path / "v.ckpt"))
    (tmp_path / "t.ckpt").write_bytes(data[:-3])
    with pytest.raises(CheckpointTruncatedError):
        ckpt.read_entries(str(tmp_path / "t.ckpt"))


def test_resume_matches_uninterrupted(corpus, tmp_path):
    cfg = toy_config()
    _, full = T.train(cfg, corpus)
    path = tmp_path / "r.ckpt"
    log = tmp_path / "r.csv"
    T.train(cfg, corpus, phase="pretrain", checkpoint_path=str(path), log_path=str(log))
    T.train(cfg, corpus, phase="forward", state=T.load_checkpoint(str(path)), checkpoint_path=str(path),
            log_path=str(log))
    _, rest = T.train(cfg, corpus, state=T.load_checkpoint(str(path)), phase="finetune", log_path=str(log))
    assert _losses(full[6:]) == _losses(rest)
    logged = T.read_log(str(log))
    assert [r["iter"] for r in logged] == list(range(9))
    assert [r["total"] for r in logged] == [r["total"] for r in full]


def test_step_count_with_accumulation(corpus):
    state, _ = T.train(toy_config(accum=3, iters_forward=0, iters_finetune=0), corpus)
    steps = {int(s["step"]) for s in state.opt_model.state.values()}
    assert steps == {3}


def test_update_scope(corpus):
    cfg = toy_config()
    state = T.new_state(cfg)
    state.iteration = 6  # phase 3: every loss and discriminator is active
    with precision("float64"):
        proxy = make_proxy()
        d0, m0 = _hash(state.discs), _hash(state.model)
        _, disc_in = T.model_update(state, 6, corpus, corpus.splits["train"], proxy)
        assert _hash(state.discs) == d0 and _hash(state.model) != m0
        m1 = _hash(state.model)
        T.disc_update(state, 6, disc_in)
        assert _hash(state.model) == m1 and _hash(state.discs) != d0


def test_divergence_saves_last_finite_state(corpus, tmp_path, monkeypatch):
    cfg = toy_config()
    real = T.model_losses
    calls = {"n": 0}

    def flaky(*args, **kw):
        terms, total, disc_in = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 5:
            total = total * float("nan")
        return terms, total, disc_in

    monkeypatch.setattr(T, "model_losses", flaky)
    path = tmp_path / "d.ckpt"
    with pytest.raises(TrainingDivergenceError) as err:
        T.train(cfg, corpus, checkpoint_path=str(path))
    assert err.value.iteration == 4 and err.value.phase == "forward"
    monkeypatch.setattr(T, "model_losses", real)
    state = T.load_checkpoint(str(path))
    assert state.iteration == 4
    assert all(torch.isfinite(p).all() for p in state.model.parameters())
    # resuming from the saved state reproduces the uninterrupted run exactly
    _, full = T.train(cfg, corpus)
    _, rest = T.train(cfg, corpus, state=state)
    assert _losses(full[4:]) == _losses(rest)


def test_smooth():
    assert np.allclose(T.smooth([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
