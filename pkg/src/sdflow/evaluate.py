"""Held-out evaluation: SR and DS quality, bicubic baselines and the temperature sweep."""
import csv
import json
import math
import os

import numpy as np
import torch

from .data import dequantize
from .imaging import bicubic_downscale, bicubic_upscale
from .metrics import diversity, fd_proxy, psnr_y, ssim_y


def _u8(img):
    return torch.from_numpy(img.transpose(2, 0, 1).copy())[None]


def image_generator(seed, image_id, tag=0):
    s = np.random.SeedSequence([seed, image_id, tag]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s) & (2 ** 62 - 1))


def load_pair(corpus, i):
    """(x, y) of corpus image ``i`` as float tensors without dequantisation noise."""
    return dequantize(_u8(corpus.lr[i]), noise=False), dequantize(_u8(corpus.hr[i]), noise=False)


@torch.no_grad()
def sr_samples(model, x, tau, n, gen):
    z_c = model.lr.content(x)
    return [model.sr_generate(z_c, tau, gen)[0] for _ in range(n)]


@torch.no_grad()
def ds_samples(model, y, tau, n, gen):
    """``n`` downscalings of ``y`` sharing one mixture component (drawn from ``gen``)."""
    z_c = model.hr(y).z_c
    comp = model.deg.prior.draw_components(z_c.shape[0], gen)
    return [model.decode_lr(z_c, tau, gen, comp)[0] for _ in range(n)]


def _mean(v):
    v = [a for a in v if math.isfinite(a)]
    return float(np.mean(v)) if v else float("inf")


def evaluate(model, corpus, ids, taus=(0.0, 0.8), n_samples=10, seed=0):
    """Per-image metric rows plus a set-level summary.

    SR outputs are compared with the HR ground truth, DS outputs with the true LR;
    bicubic upscaling and bicubic downscaling are the baselines.
    """
    s = model.scale
    rows, summary = [], {}
    per = {}

    def add(i, metric, value):
        rows.append((f"{i:06d}", metric, value))
        per.setdefault(metric, []).append(value)

    true_lr, ds_sets, bic_lr = [], {t: [] for t in taus}, []
    model.eval()
    for i in ids:
        x, y = load_pair(corpus, i)
        up = bicubic_upscale(x, s).clamp(0, 1)
        add(i, "sr_bicubic_psnr_y", psnr_y(up, y))
        add(i, "sr_bicubic_ssim_y", ssim_y(up, y))
        bd = bicubic_downscale(y, s).clamp(0, 1)
        add(i, "ds_bicubic_psnr_y", psnr_y(bd, x))
        true_lr.append(x)
        bic_lr.append(bd)
        for k, tau in enumerate(taus):
            sr = sr_samples(model, x, tau, n_samples, image_generator(seed, i, 2 * k))
            add(i, f"sr_tau{tau:g}_psnr_y", psnr_y(sr[0], y))
            add(i, f"sr_tau{tau:g}_ssim_y", ssim_y(sr[0], y))
            add(i, f"sr_tau{tau:g}_diversity", diversity(sr))
            ds = ds_samples(model, y, tau, n_samples, image_generator(seed, i, 2 * k + 1))
            add(i, f"ds_tau{tau:g}_psnr_y", psnr_y(ds[0], x))
            add(i, f"ds_tau{tau:g}_diversity", diversity(ds))
            ds_sets[tau].append(ds[0])
    for metric, values in per.items():
        summary[metric] = _mean(values)
    if len(ids) >= 16:
        summary["ds_bicubic_fd_proxy"] = fd_proxy(bic_lr, true_lr)
        for tau in taus:
            summary[f"ds_tau{tau:g}_fd_proxy"] = fd_proxy(ds_sets[tau], true_lr)
    summary["n_images"] = len(ids)
    return rows, summary


def tau_sweep(model, corpus, ids, taus=(0.0, 0.4, 0.8, 1.2), n_samples=10, seed=0):
    """Rows ``(tau, sr_psnr_y, sr_diversity, ds_psnr_y, ds_diversity)`` averaged over ``ids``.

    PSNR is averaged over all samples of every image, diversity over images.
    """
    model.eval()
    out = []
    for k, tau in enumerate(taus):
        sp, sd, dp, dd = [], [], [], []
        for i in ids:
            x, y = load_pair(corpus, i)
            sr = sr_samples(model, x, tau, n_samples, image_generator(seed, i, 100 + 2 * k))
            ds = ds_samples(model, y, tau, n_samples, image_generator(seed, i, 101 + 2 * k))
            sp.append(np.mean([psnr_y(a, y) for a in sr]))
            dp.append(np.mean([psnr_y(a, x) for a in ds]))
            sd.append(diversity(sr))
            dd.append(diversity(ds))
        out.append({"tau": float(tau), "sr_psnr_y": float(np.mean(sp)), "sr_diversity": float(np.mean(sd)),
                    "ds_psnr_y": float(np.mean(dp)), "ds_diversity": float(np.mean(dd))})
    return out


def _atomic_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def write_rows(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "metric", "value"])
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2]))])


def write_summary(path, summary):
    _atomic_text(path, json.dumps(summary, indent=2, sort_keys=True) + "\n")


def write_sweep(path, sweep):
    cols = ["tau", "sr_psnr_y", "sr_diversity", "ds_psnr_y", "ds_diversity"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in sweep:
            w.writerow([repr(float(r[c])) for c in cols])
