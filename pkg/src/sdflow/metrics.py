"""PSNR-Y, SSIM-Y, sample diversity and a Frechet distance over proxy features."""
import itertools
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError
from .imaging import _gauss_1d, rgb_to_ycbcr_y
from .nets import FeatureProxy

PSNR_INF = math.inf
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
FD_MIN_SET = 16


@dataclass
class MetricReport:
    psnr_y: float = float("nan")
    ssim_y: float = float("nan")
    diversity: float = float("nan")
    fd_proxy: float = float("nan")

    def as_dict(self):
        return asdict(self)


def _as_nchw(img):
    if img.dim() == 3:
        img = img[None]
    if img.dim() != 4:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {tuple(img.shape)}")
    return img.to(torch.float64)


def luma(img):
    """Y channel of an RGB image; single-channel input is taken to be luma already."""
    img = _as_nchw(img)
    if img.shape[1] == 1:
        return img
    return rgb_to_ycbcr_y(img)


def _pair(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return luma(a), luma(b)


def psnr_y(a, b):
    """PSNR on the BT.601 luma, peak 1.  Identical inputs give ``inf``."""
    ya, yb = _pair(a, b)
    mse = float(((ya - yb) ** 2).mean())
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def _ssim_maps(ya, yb):
    """Local luminance and contrast-structure maps over valid 11x11 Gaussian windows."""
    k = torch.as_tensor(_gauss_1d(SSIM_SIGMA, SSIM_WINDOW), dtype=torch.float64)
    w = (k[:, None] * k[None, :]).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    c = ya.shape[1]
    w = w.expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    filt = lambda t: F.conv2d(t, w, groups=c)  # noqa: E731
    mu_a, mu_b = filt(ya), filt(yb)
    var_a = filt(ya * ya) - mu_a ** 2
    var_b = filt(yb * yb) - mu_b ** 2
    cov = filt(ya * yb) - mu_a * mu_b
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim_y(a, b):
    """Mean SSIM of the luma over valid windows (window 11, sigma 1.5, range 1)."""
    ya, yb = _pair(a, b)
    if min(ya.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"image {tuple(ya.shape[-2:])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    lum, cs = _ssim_maps(ya, yb)
    return float((lum * cs).mean())


def diversity(samples):
    """Mean pairwise mean-absolute difference, in 8-bit units."""
    samples = [_as_nchw(s) for s in samples]
    if len(samples) < 2:
        raise ParameterError("diversity needs at least two samples")
    shape = samples[0].shape
    if any(s.shape != shape for s in samples):
        raise ShapeError("all samples must share one shape")
    diffs = [float((a - b).abs().mean()) for a, b in itertools.combinations(samples, 2)]
    return 255.0 * sum(diffs) / len(diffs)


_PROXIES = {}


def _proxy(seed):
    if seed not in _PROXIES:
        with torch.no_grad():
            _PROXIES[seed] = FeatureProxy(seed).double()
    return _PROXIES[seed]


def proxy_features(images, seed=1234):
    """Global-average FeatureProxy features, one row per image."""
    imgs = torch.cat([_as_nchw(i) for i in images]) if isinstance(images, (list, tuple)) else _as_nchw(images)
    with torch.no_grad():
        return _proxy(seed).pooled(imgs)


def fd_proxy(set_a, set_b, seed=1234):
    """Diagonal-covariance Frechet distance between proxy-feature statistics of two image sets."""
    fa, fb = proxy_features(set_a, seed), proxy_features(set_b, seed)
    for name, f in (("set_a", fa), ("set_b", fb)):
        if f.shape[0] < FD_MIN_SET:
            raise ParameterError(f"{name} has {f.shape[0]} images, need at least {FD_MIN_SET}")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    sd_a, sd_b = fa.std(0, unbiased=False), fb.std(0, unbiased=False)
    # tr(Sa + Sb - 2 (Sa Sb)^1/2) with diagonal S reduces to sum (sd_a - sd_b)^2
    return float(((mu_a - mu_b) ** 2).sum() + ((sd_a - sd_b) ** 2).sum())
