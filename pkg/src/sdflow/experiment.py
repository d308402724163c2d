"""The desk-scale toy experiment: synthetic corpus, three-phase training, cached on disk.

The run directory holds ``corpus/``, ``run.cfg``, ``model.ckpt`` and ``loss.csv``.
A finished run is reused when its stored configuration matches the requested one.
"""
import hashlib
import os

from . import config as cfgmod
from .data import load_corpus, synth_corpus, write_corpus
from .trainer import load_checkpoint, read_log, train


def desk_config(**overrides):
    cfg = cfgmod.RunConfig(cfgmod.defaults())
    for k, v in overrides.items():
        cfg.set(k, v)
    return cfg


def run_key(cfg):
    return hashlib.sha256(cfg.to_text().encode()).hexdigest()[:12]


def ensure_corpus(cfg, root):
    path = os.path.join(root, "corpus")
    if not os.path.exists(os.path.join(path, "theta.csv")):
        corpus = synth_corpus(cfg["n_images"], cfg["size"], cfg["scale"], cfg["data_seed"])
        write_corpus(corpus, path)
    return load_corpus(path, cfg["scale"])


def run(cfg, root, checkpoint_every=250, progress=None):
    """Train (or resume, or reuse) the run described by ``cfg`` under ``root``.

    Returns ``(state, corpus, log_rows)``.
    """
    os.makedirs(root, exist_ok=True)
    cfg_path = os.path.join(root, "run.cfg")
    with open(cfg_path, "w") as f:
        f.write(cfg.to_text())
    corpus = ensure_corpus(cfg, root)
    tc = cfg.train_config()
    ck, log = os.path.join(root, "model.ckpt"), os.path.join(root, "loss.csv")
    state = load_checkpoint(ck, tc) if os.path.exists(ck) else None
    if state is None or state.iteration < tc.total_iters:
        state, _ = train(tc, corpus, state, "all", log, ck, checkpoint_every, progress)
    return state, corpus, read_log(log)
