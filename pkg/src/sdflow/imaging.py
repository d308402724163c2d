"""Separable bicubic resampling, Gaussian blur and colour conversion on NCHW tensors."""
import functools
import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError


def cubic_kernel(x, a=-0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x ** 2, x ** 3
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_weights(phase, a=-0.5):
    """The four interpolation taps for a sample ``phase`` in [0, 1) past a grid point."""
    return cubic_kernel([1 + phase, phase, 1 - phase, 2 - phase], a)


def _reflect(idx, n):
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


@functools.lru_cache(maxsize=64)
def resize_matrix(n_in, n_out, a=-0.5, antialias=True):
    """(n_out, n_in) bicubic resampling matrix with reflect boundary.

    Output sample ``o`` sits at input coordinate ``(o + 0.5) * n_in / n_out - 0.5``.
    When shrinking with ``antialias`` the kernel support is stretched by the
    scale factor.  Rows are normalised to sum to one.
    """
    scale = n_out / n_in
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) / scale - 0.5
        taps = np.arange(math.floor(center - support), math.ceil(center + support) + 1)
        w = cubic_kernel((taps - center) / stretch, a)
        w /= w.sum()
        np.add.at(m[o], _reflect(taps, n_in), w)
    m.setflags(write=False)
    return m


def resize(img, height, width, antialias=True):
    _, _, h, w = img.shape
    mh = torch.tensor(resize_matrix(h, height, -0.5, antialias), dtype=img.dtype)
    mw = torch.tensor(resize_matrix(w, width, -0.5, antialias), dtype=img.dtype)
    return torch.einsum("oh,bchw,pw->bcop", mh, img, mw)


def bicubic_downscale(img, s):
    _, _, h, w = img.shape
    if h % s or w % s:
        raise ShapeError(f"image size {h}x{w} is not divisible by scale {s}")
    return resize(img, h // s, w // s)


def bicubic_upscale(img, s):
    _, _, h, w = img.shape
    return resize(img, h * s, w * s)


def reflect_pad(img, pad):
    """Reflect padding that, unlike ``F.pad``, also works when ``pad >= size``."""
    h, w = img.shape[-2:]
    ih = torch.as_tensor(_reflect(np.arange(-pad, h + pad), h))
    iw = torch.as_tensor(_reflect(np.arange(-pad, w + pad), w))
    return img.index_select(-2, ih).index_select(-1, iw)


@functools.lru_cache(maxsize=32)
def _gauss_1d(sigma, ksize):
    r = np.arange(ksize) - (ksize - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma, ksize=None):
    """Separable Gaussian blur with reflect padding (per channel)."""
    if sigma <= 0:
        return img
    if ksize is None:
        ksize = 2 * math.ceil(3 * sigma) + 1
    pad = ksize // 2
    c = img.shape[1]
    k = torch.as_tensor(_gauss_1d(float(sigma), ksize), dtype=img.dtype)
    x = reflect_pad(img, pad)
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, ksize), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, ksize, 1), groups=c)
    return x


def rgb_to_ycbcr_y(img):
    """BT.601 studio-range luma of an RGB image in [0, 1]; returns (B, 1, H, W)."""
    if img.dim() != 4 or img.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W), got {tuple(img.shape)}")
    r, g, b = img[:, 0:1], img[:, 1:2], img[:, 2:3]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
