"""Synthetic degradation corpus, dequantisation and unpaired batching.

On disk a corpus is ``hr/NNNNNN.png``, ``lr/NNNNNN.png`` and ``theta.csv`` with
columns ``id, blur_sigma, noise_sigma, seed``.
"""
import csv
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ParameterError, ShapeError
from .imaging import bicubic_downscale, gaussian_blur, rgb_to_ycbcr_y  # noqa: F401  (re-exported)

BLUR_RANGE = (0.2, 3.0)
NOISE_RANGE = (0.0, 0.04)
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class DegradationParams:
    blur_sigma: float
    noise_sigma: float
    scale: int
    seed: int

    def __post_init__(self):
        if not BLUR_RANGE[0] <= self.blur_sigma <= BLUR_RANGE[1]:
            raise ParameterError(f"blur sigma {self.blur_sigma} outside {BLUR_RANGE}")
        if not NOISE_RANGE[0] <= self.noise_sigma <= NOISE_RANGE[1]:
            raise ParameterError(f"noise sigma {self.noise_sigma} outside {NOISE_RANGE}")


# -- image conversion --------------------------------------------------------

def to_tensor(img_u8):
    """HWC uint8 array (or list of them) -> NCHW float tensor in [0, 1]."""
    arr = np.stack(img_u8) if isinstance(img_u8, (list, tuple)) else img_u8[None]
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).astype(np.float64) / 255.0).to(torch.get_default_dtype())


def to_uint8(img):
    """CHW or HWC-ready NCHW tensor with batch 1 -> HWC uint8 array."""
    if img.dim() == 4:
        img = img[0]
    arr = img.detach().clamp(0, 1).cpu().numpy().transpose(1, 2, 0)
    return np.round(arr * 255.0).astype(np.uint8)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, arr):
    tmp = f"{path}.tmp"
    Image.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


# -- procedural HR content ---------------------------------------------------

def _rand_color(rng):
    return tuple(int(v) for v in rng.integers(0, 256, 3))


def _texture(rng, size):
    noise = rng.standard_normal((size, size, 3))
    tex = gaussian_filter(noise, sigma=(rng.uniform(0.7, 4.0),) * 2 + (0,))
    tex /= tex.std() + 1e-8
    return tex


def render_hr(rng, size):
    """One procedural RGB image: gradient, textures, polygons and strokes."""
    ss = 2 * size
    yy, xx = np.mgrid[0:ss, 0:ss] / ss
    angle = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)), 0, 1)[..., None]
    c0, c1 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    canvas = Image.fromarray(((1 - t) * c0 + t * c1).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(rng.integers(2, 6)):
        n = rng.integers(3, 7)
        cx, cy = rng.uniform(0, ss, 2)
        r = rng.uniform(0.1, 0.45) * ss
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a in ang]
        draw.polygon(pts, fill=_rand_color(rng))
    for _ in range(rng.integers(1, 5)):
        pts = [tuple(float(v) for v in rng.uniform(0, ss, 2)) for _ in range(rng.integers(2, 5))]
        draw.line(pts, fill=_rand_color(rng), width=int(rng.integers(1, 5)))
    img = np.asarray(canvas.resize((size, size), Image.LANCZOS), dtype=np.float64)
    img = img + rng.uniform(2, 20) * _texture(rng, size)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


# -- degradation --------------------------------------------------------------

def degrade(hr, blur_sigma, noise_sigma, scale, rng):
    """blur -> bicubic downscale -> additive Gaussian noise, on a (B, 3, H, W) tensor in [0, 1]."""
    x = gaussian_blur(hr, blur_sigma) if blur_sigma > 0 else hr
    x = bicubic_downscale(x, scale)
    if noise_sigma > 0:
        noise = torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(x.dtype)
        x = x + noise_sigma * noise
    return x


@dataclass
class Corpus:
    hr: list
    lr: list
    theta: list
    scale: int
    splits: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.hr)


def split_ids(n):
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    ids = list(range(n))
    return {"train": ids[:n_train], "val": ids[n_train:n_train + n_val], "test": ids[n_train + n_val:]}


def synth_corpus(n_images, size, scale, seed, levels=None):
    """Procedural HR images and their degraded LR counterparts with recorded parameters."""
    levels = levels if levels is not None else int(np.log2(scale))
    if size % scale or size % 2 ** (levels + 1):
        raise ShapeError(f"size {size} must be divisible by {scale} and {2 ** (levels + 1)}")
    seeds = np.random.SeedSequence(seed).generate_state(n_images, dtype=np.uint64)
    hr, lr, theta = [], [], []
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        img = render_hr(rng, size)
        p = DegradationParams(float(rng.uniform(*BLUR_RANGE)), float(rng.uniform(*NOISE_RANGE)), scale, int(s))
        with torch.no_grad():
            x = degrade(to_tensor(img).double(), p.blur_sigma, p.noise_sigma, scale, rng)
        hr.append(img)
        lr.append(to_uint8(x))
        theta.append(p)
    return Corpus(hr, lr, theta, scale, split_ids(n_images))


def write_corpus(corpus, root):
    os.makedirs(os.path.join(root, "hr"), exist_ok=True)
    os.makedirs(os.path.join(root, "lr"), exist_ok=True)
    for i, (h, l) in enumerate(zip(corpus.hr, corpus.lr)):
        write_png(os.path.join(root, "hr", f"{i:06d}.png"), h)
        write_png(os.path.join(root, "lr", f"{i:06d}.png"), l)
    with open(os.path.join(root, "theta.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "blur_sigma", "noise_sigma", "seed"])
        for i, p in enumerate(corpus.theta):
            w.writerow([f"{i:06d}", repr(p.blur_sigma), repr(p.noise_sigma), p.seed])


def load_corpus(root, scale=None):
    names = sorted(f for f in os.listdir(os.path.join(root, "hr")) if f.endswith(".png"))
    hr = [read_png(os.path.join(root, "hr", n)) for n in names]
    lr = [read_png(os.path.join(root, "lr", n)) for n in names]
    theta = []
    theta_path = os.path.join(root, "theta.csv")
    if os.path.exists(theta_path):
        with open(theta_path) as f:
            for row in csv.DictReader(f):
                theta.append(row)
    if scale is None:
        scale = hr[0].shape[0] // lr[0].shape[0]
    return Corpus(hr, lr, theta, scale, split_ids(len(hr)))


# -- training inputs -----------------------------------------------------------

def dequantize(img_u8, generator=None, noise=True):
    """uint8 tensor -> value/255 plus U[0, 1/255) noise (or no noise for evaluation)."""
    x = img_u8.to(torch.get_default_dtype()) / 255.0
    if noise:
        x = x + torch.rand(x.shape, generator=generator, dtype=x.dtype) / 255.0
    return x


class UnpairedBatch(NamedTuple):
    x: torch.Tensor  # (B, 3, p/s, p/s) uint8
    y: torch.Tensor  # (B, 3, p, p) uint8
    x_ids: tuple
    y_ids: tuple


def _crop_flip(img, p, rng):
    h, w = img.shape[:2]
    if h < p or w < p:
        raise ConfigError(f"image {h}x{w} smaller than patch {p}")
    i, j = rng.integers(0, h - p + 1), rng.integers(0, w - p + 1)
    out = img[i:i + p, j:j + p]
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1]
    return np.ascontiguousarray(out)


def sample_unpaired_batch(corpus, ids, patch, batch, rng):
    """One batch whose LR and HR patches come from disjoint source images."""
    s = corpus.scale
    if patch % s:
        raise ConfigError(f"patch {patch} is not divisible by scale {s}")
    if len(ids) < 2 * batch:
        raise ConfigError(f"need at least {2 * batch} images for disjoint unpaired batches, have {len(ids)}")
    chosen = rng.choice(len(ids), size=2 * batch, replace=False)
    y_ids = tuple(int(ids[k]) for k in chosen[:batch])
    x_ids = tuple(int(ids[k]) for k in chosen[batch:])
    y = np.stack([_crop_flip(corpus.hr[i], patch, rng) for i in y_ids])
    x = np.stack([_crop_flip(corpus.lr[i], patch // s, rng) for i in x_ids])
    to_t = lambda a: torch.from_numpy(a.transpose(0, 3, 1, 2).copy())  # noqa: E731
    return UnpairedBatch(to_t(x), to_t(y), x_ids, y_ids)


def make_unpaired_batches(corpus, patch, batch, seed, start=0, split="train"):
    """Endless stream of unpaired batches; batch ``k`` depends only on ``(seed, k)``."""
    ids = corpus.splits[split]
    k = start
    while True:
        yield sample_unpaired_batch(corpus, ids, patch, batch, np.random.default_rng([seed, k]))
        k += 1
