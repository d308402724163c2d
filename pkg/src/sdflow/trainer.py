"""Three-phase training: NLL + content, then the full forward loss, then forward + backward.

Randomness for iteration ``k`` (batch crops, dequantisation noise, latent
samples) is derived from ``(seed, k, micro_batch)``, so a run resumed from a
checkpoint draws exactly what the uninterrupted run would have drawn.
"""
import csv
import math
import os
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig, TrainConfig
from .data import dequantize, sample_unpaired_batch
from .errors import (CheckpointError, ConfigError, DegenerateLayerError, NonFiniteError,
                     TrainingDivergenceError)
from .model import SDFlow, per_dim
from .numerics import precision
from .objectives import (Discriminators, backward_terms, content_loss, domain_loss_disc, domain_loss_gen,
                         lsgan_disc, make_proxy, weighted_backward)
from .priors import std_normal_logp

PHASES = ("pretrain", "forward", "finetune")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

LOG_COLUMNS = ("iter", "phase", "lr_model", "lr_disc", "nll_x", "nll_y", "content", "domain_gen",
               "sr_pix", "sr_per", "sr_gan", "ds_pix", "ds_per", "ds_gan", "total",
               "disc_domain", "disc_sr", "disc_lr")


def lr_at(iteration, total, base, milestones=(0.5, 0.75, 0.9, 0.95)):
    """``base`` halved once for every milestone fraction of ``total`` already reached."""
    if total <= 0:
        return base
    passed = sum(iteration >= m * total for m in milestones)
    return base * 0.5 ** passed


def phase_of(config, iteration):
    for i, name in enumerate(PHASES):
        lo, hi = config.phase_bounds()[name]
        if lo <= iteration < hi:
            return i + 1
    raise ConfigError(f"iteration {iteration} is beyond the schedule ({config.total_iters})")


@dataclass
class TrainState:
    config: TrainConfig
    model: SDFlow
    discs: Discriminators
    opt_model: torch.optim.Adam
    opt_disc: torch.optim.Adam
    iteration: int = 0

    @property
    def dtype(self):
        return self.config.dtype


def new_state(config):
    with precision(config.dtype):
        torch.manual_seed(config.seed)
        model = SDFlow(config.model)
        discs = Discriminators(config.model.disc_width)
    opt_model = torch.optim.Adam(model.parameters(), lr=config.lr_model, betas=ADAM_BETAS, eps=ADAM_EPS)
    opt_disc = torch.optim.Adam(discs.parameters(), lr=config.lr_disc, betas=ADAM_BETAS, eps=ADAM_EPS)
    return TrainState(config, model, discs, opt_model, opt_disc, 0)


# -- checkpoints -------------------------------------------------------------

def _optim_entries(opt, params, prefix):
    out = OrderedDict()
    for i, p in enumerate(params):
        for key, val in sorted(opt.state.get(p, {}).items()):
            out[f"{prefix}.{i}.{key}"] = val
    return out


def _load_optim(opt, params, entries, prefix):
    for i, p in enumerate(params):
        keys = [n for n in entries if n.startswith(f"{prefix}.{i}.")]
        if not keys:
            continue
        st = {}
        for n in keys:
            key = n[len(f"{prefix}.{i}."):]
            t = entries[n]
            if key != "step" and tuple(t.shape) != tuple(p.shape):
                raise ckpt.CheckpointShapeError(
                    f"entry {n}: checkpoint shape {tuple(t.shape)} does not match configured {tuple(p.shape)}")
            st[key] = t.to(p.dtype) if key != "step" else t.clone()
        opt.state[p] = st
    stray = [n for n in entries if n.startswith(prefix + ".") and int(n.split(".")[1]) >= len(params)]
    if stray:
        raise ckpt.CheckpointShapeError(f"entry {stray[0]} has no counterpart in the configured architecture")


def state_entries(state):
    e = OrderedDict()
    e["meta.config"] = ckpt.text_entry(RunConfig.from_train_config(state.config).to_text())
    e["meta.iteration"] = torch.tensor(state.iteration, dtype=torch.int64)
    e.update(ckpt.module_entries(state.model, "model"))
    e.update(ckpt.module_entries(state.discs, "discs"))
    e.update(_optim_entries(state.opt_model, list(state.model.parameters()), "opt_model"))
    e.update(_optim_entries(state.opt_disc, list(state.discs.parameters()), "opt_disc"))
    return e


def save_checkpoint(state, path):
    ckpt.write_entries(path, state_entries(state))


def checkpoint_config(path):
    """The training configuration stored in a checkpoint."""
    entries = ckpt.read_entries(path)
    return _stored_config(entries, path)


def _stored_config(entries, path):
    if "meta.config" not in entries:
        raise CheckpointError(f"{path}: no meta.config entry")
    return RunConfig.from_text(ckpt.entry_text(entries["meta.config"])).train_config()


def load_checkpoint(path, config=None):
    """Rebuild a :class:`TrainState`; ``config`` overrides the stored one and is shape-checked."""
    entries = ckpt.read_entries(path)
    config = config or _stored_config(entries, path)
    state = new_state(config)
    ckpt.load_into(state.model, entries, "model")
    ckpt.load_into(state.discs, entries, "discs")
    _load_optim(state.opt_model, list(state.model.parameters()), entries, "opt_model")
    _load_optim(state.opt_disc, list(state.discs.parameters()), entries, "opt_disc")
    state.iteration = int(entries["meta.iteration"])
    return state


# -- one iteration -----------------------------------------------------------

def iteration_rng(seed, iteration, micro):
    """Numpy generator for batch sampling and a torch generator for noise."""
    rng = np.random.default_rng([seed, iteration, micro])
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 62)))
    return rng, gen


def model_losses(model, discs, proxy, x, y, phase, weights, generator=None):
    """Loss terms active in ``phase`` (1, 2 or 3); returns ``(terms, total, disc_inputs)``."""
    z_c_hr, _, z_hp, ld_hr, ld_hf = model.encode_hr(y)
    nll_y = per_dim(-std_normal_logp(z_hp) - ld_hr - ld_hf, y).mean()
    z_c_lr, _, z_lr, z_dp, ld_lr, ld_deg = model.encode_lr(x)
    nll_x = per_dim(-model.deg.prior.log_prob(z_dp) - ld_lr - ld_deg, x).mean()
    content = content_loss(model, z_c_hr, z_c_lr, x, y, proxy, weights.alpha)
    terms = {"nll_x": nll_x, "nll_y": nll_y, "content": content}
    total = nll_x + nll_y + content
    disc_in = {}
    if phase >= 2:
        terms["domain_gen"] = domain_loss_gen(discs.domain, z_c_hr, z_c_lr, z_lr, weights)
        total = total + terms["domain_gen"]
        disc_in["domain"] = (z_c_hr.detach(), z_c_lr.detach())
    if phase >= 3:
        bterms, images = backward_terms(model, discs, proxy, z_c_lr, z_c_hr, x, y, weights, generator)
        ds, sr = weighted_backward(bterms, weights)
        terms.update(bterms)
        total = total + ds + sr
        disc_in["sr"] = (y, images["sr"].detach())
        disc_in["lr"] = (x, images["ds"].detach())
    terms["total"] = total
    return terms, total, disc_in


def disc_losses(discs, disc_in, weights):
    out = {}
    if "domain" in disc_in:
        out["disc_domain"] = domain_loss_disc(discs.domain, *disc_in["domain"], None, weights)
    if "sr" in disc_in:
        out["disc_sr"] = lsgan_disc(discs.sr, *disc_in["sr"])
    if "lr" in disc_in:
        out["disc_lr"] = lsgan_disc(discs.lr, *disc_in["lr"])
    return out


def _finite_or_raise(value, name, iteration, phase):
    if not math.isfinite(value):
        raise TrainingDivergenceError(f"non-finite {name} loss", iteration, PHASES[phase - 1])


def model_update(state, iteration, corpus, ids, proxy):
    """Accumulate gradients over micro-batches and step the flow optimiser.

    Returns the averaged loss terms and the detached discriminator inputs.
    """
    cfg = state.config
    phase = phase_of(cfg, iteration)
    model, discs = state.model, state.discs
    for g in state.opt_model.param_groups:
        g["lr"] = lr_at(iteration, cfg.total_iters, cfg.lr_model, cfg.milestones)
    state.opt_model.zero_grad(set_to_none=True)
    discs.requires_grad_(False)
    sums, disc_inputs = {}, []
    try:
        for m in range(cfg.accum):
            rng, gen = iteration_rng(cfg.seed, iteration, m)
            batch = sample_unpaired_batch(corpus, ids, cfg.patch, cfg.batch, rng)
            x, y = dequantize(batch.x, gen), dequantize(batch.y, gen)
            try:
                terms, total, disc_in = model_losses(model, discs, proxy, x, y, phase, cfg.weights, gen)
            except (DegenerateLayerError, NonFiniteError) as e:
                raise TrainingDivergenceError(str(e), iteration, PHASES[phase - 1]) from e
            _finite_or_raise(float(total.detach()), "flow", iteration, phase)
            (total / cfg.accum).backward()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) / cfg.accum
            disc_inputs.append(disc_in)
    finally:
        discs.requires_grad_(True)
    params = [p for p in model.parameters() if p.grad is not None]
    norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    _finite_or_raise(float(norm), "gradient", iteration, phase)
    state.opt_model.step()
    return sums, disc_inputs


def disc_update(state, iteration, disc_inputs):
    cfg = state.config
    phase = phase_of(cfg, iteration)
    for g in state.opt_disc.param_groups:
        g["lr"] = lr_at(iteration, cfg.total_iters, cfg.lr_disc, cfg.milestones)
    state.opt_disc.zero_grad(set_to_none=True)
    sums = {}
    for disc_in in disc_inputs:
        losses = disc_losses(state.discs, disc_in, cfg.weights)
        if not losses:
            return sums
        total = sum(losses.values())
        _finite_or_raise(float(total.detach()), "discriminator", iteration, phase)
        (total / cfg.accum).backward()
        for k, v in losses.items():
            sums[k] = sums.get(k, 0.0) + float(v.detach()) / cfg.accum
    state.opt_disc.step()
    return sums


def train_iteration(state, corpus, ids, proxy):
    """One update of the flows and (from phase 2 on) of the discriminators."""
    it = state.iteration
    cfg = state.config
    phase = phase_of(cfg, it)
    state.model.train()
    terms, disc_inputs = model_update(state, it, corpus, ids, proxy)
    terms.update(disc_update(state, it, disc_inputs))
    row = {c: float("nan") for c in LOG_COLUMNS}
    row.update(terms)
    row.update(iter=it, phase=phase,
               lr_model=lr_at(it, cfg.total_iters, cfg.lr_model, cfg.milestones),
               lr_disc=lr_at(it, cfg.total_iters, cfg.lr_disc, cfg.milestones))
    state.iteration = it + 1
    return row


# -- loss log ------------------------------------------------------------------

def _fmt(v):
    return str(v) if isinstance(v, int) else repr(float(v))


def read_log(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k in ("iter", "phase") else float(v)) for k, v in r.items()} for r in rows]


class LossLog:
    """Per-iteration CSV; reopening for a resumed run drops rows at or past ``start``."""

    def __init__(self, path, start=0):
        self.path = path
        keep = []
        if path and os.path.exists(path) and start > 0:
            with open(path, newline="") as f:
                keep = [r for r in csv.DictReader(f) if int(r["iter"]) < start]
        if path:
            self.f = open(path, "w", newline="")
            self.w = csv.writer(self.f, lineterminator="\n")
            self.w.writerow(LOG_COLUMNS)
            for r in keep:
                self.w.writerow([r[c] for c in LOG_COLUMNS])
            self.f.flush()

    def append(self, row):
        if self.path:
            self.w.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            self.f.flush()

    def close(self):
        if self.path:
            self.f.close()


def smooth(values, window=50):
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- driver ----------------------------------------------------------------------

def train(config, corpus, state=None, phase="all", log_path=None, checkpoint_path=None,
          checkpoint_every=0, progress=None):
    """Run the selected phase(s) from ``state.iteration``; returns ``(state, rows)``.

    On a non-finite loss the last finite state is written to ``checkpoint_path``
    (when given) and :class:`TrainingDivergenceError` is raised.
    """
    state = state or new_state(config)
    if phase == "all":
        lo, hi = 0, config.total_iters
    elif phase in PHASES:
        lo, hi = config.phase_bounds()[phase]
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    ids = corpus.splits["train"]
    state.iteration = max(state.iteration, lo)
    log = LossLog(log_path, state.iteration)
    rows = []
    with precision(config.dtype):
        proxy = make_proxy(config.proxy_seed)
        try:
            while state.iteration < hi:
                row = train_iteration(state, corpus, ids, proxy)
                rows.append(row)
                log.append(row)
                if progress:
                    progress(row)
                if checkpoint_path and checkpoint_every and state.iteration % checkpoint_every == 0:
                    save_checkpoint(state, checkpoint_path)
        except TrainingDivergenceError:
            if checkpoint_path:
                save_checkpoint(state, checkpoint_path)
            raise
        finally:
            log.close()
        if checkpoint_path:
            save_checkpoint(state, checkpoint_path)
    return state, rows
