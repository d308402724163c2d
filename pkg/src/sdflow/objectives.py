"""Forward losses (content, latent-domain) and backward losses (pixel, perceptual, GAN)."""
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from .errors import ShapeError
from .imaging import bicubic_downscale, bicubic_upscale, gaussian_blur
from .nets import FeatureProxy, PatchDiscriminator
from .priors import std_normal_sample


@dataclass
class LossWeights:
    alpha: float = 0.05
    beta1: float = 0.05
    beta2: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.1
    lambda4: float = 0.5
    lambda5: float = 0.5
    lambda6: float = 0.1
    tau_pixel: float = 0.0
    tau_perceptual: float = 0.8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def as_dict(self):
        return asdict(self)


def lpf(img, scale):
    """Low-pass filter: 9x9 Gaussian with sigma = scale / 2, reflect padding."""
    return gaussian_blur(img, scale / 2, ksize=9)


def l1(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


class Discriminators(nn.Module):
    """Latent-content, SR-image and LR-image patch discriminators."""

    def __init__(self, width=32):
        super().__init__()
        self.domain = PatchDiscriminator(3, width)
        self.sr = PatchDiscriminator(3, width)
        self.lr = PatchDiscriminator(3, width)


# -- content ----------------------------------------------------------------

def content_terms(decode_hr, decode_lr, x, y, scale, proxy):
    """The four unweighted content terms, given decoded content images."""
    target_hr = bicubic_downscale(y, scale)
    return {
        "pix_hr": l1(lpf(decode_hr, scale), lpf(target_hr, scale)),
        "pix_lr": l1(lpf(decode_lr, scale), lpf(x, scale)),
        "feat_hr": l1(proxy(decode_hr), proxy(target_hr)),
        "feat_lr": l1(proxy(decode_lr), proxy(x)),
    }


def content_loss(model, z_c_hr, z_c_lr, x, y, proxy, alpha=0.05):
    """Decode both content latents with ``z_d = 0`` and compare low frequencies and features."""
    t = content_terms(model.lr.decode_content(z_c_hr), model.lr.decode_content(z_c_lr),
                      x, y, model.scale, proxy)
    return t["pix_hr"] + t["pix_lr"] + alpha * (t["feat_hr"] + t["feat_lr"])


# -- latent domain alignment ------------------------------------------------

def _regularizers(z_c_hr, z_c_lr, z_lr, weights):
    reg = weights.beta1 * ((z_c_hr ** 2).mean() + (z_c_lr ** 2).mean())
    if z_lr is not None:
        reg = reg + weights.beta2 * ((z_lr - z_c_lr.detach()) ** 2).mean()
    return reg


def domain_loss_disc(disc, z_c_hr, z_c_lr, z_lr=None, weights=None):
    """LSGAN loss for the content discriminator: HR content -> 0, LR content -> 1.

    The regularisers do not depend on the discriminator; they are included so
    the value matches the full latent-domain objective.
    """
    weights = weights or LossWeights()
    adv = (disc(z_c_hr) ** 2).mean() + ((1 - disc(z_c_lr)) ** 2).mean()
    return adv + _regularizers(z_c_hr, z_c_lr, z_lr, weights)


def domain_loss_gen(disc, z_c_hr, z_c_lr, z_lr=None, weights=None):
    """The flows' side of the latent-domain game (targets swapped)."""
    weights = weights or LossWeights()
    adv = ((1 - disc(z_c_hr)) ** 2).mean() + (disc(z_c_lr) ** 2).mean()
    return adv + _regularizers(z_c_hr, z_c_lr, z_lr, weights)


def lsgan_disc(disc, real, fake):
    return ((1 - disc(real)) ** 2).mean() + (disc(fake.detach()) ** 2).mean()


def lsgan_gen(disc, fake):
    return ((1 - disc(fake)) ** 2).mean()


# -- backward (generation-side) losses --------------------------------------

def sr_cycle_pixel(y_hat, x, scale):
    """Low-frequency cycle consistency of an SR output with its LR input."""
    return l1(lpf(bicubic_downscale(y_hat, scale), scale), lpf(x, scale))


def ds_cycle_pixel(x_hat, y, scale):
    """Low-frequency agreement of a DS output with the bicubic downscale of its HR input."""
    return l1(lpf(x_hat, scale), lpf(bicubic_downscale(y, scale), scale))


def _two_temperatures(z_c, sample, synthesize, tau_a, tau_b):
    # one batched pass through the inverse flow for both temperatures
    b = z_c.shape[0]
    z = torch.cat([sample(tau_a), sample(tau_b)]).to(z_c.dtype)
    out = synthesize(torch.cat([z_c, z_c]), z)
    return out[:b], out[b:]


def backward_terms(model, discs, proxy, z_c_lr, z_c_hr, x, y, weights, generator=None):
    """Unweighted backward losses plus the generated images.

    SR side: images generated from the LR content are checked for low-frequency
    cycle consistency with x, perceptual similarity to bicubic-upscaled x, and
    realism under the SR-image discriminator.  DS side mirrors it with the HR
    content, BD_s(y) and the LR-image discriminator.
    """
    s = model.scale
    taus = weights.tau_pixel, weights.tau_perceptual
    sr_pix_img, sr_per_img = _two_temperatures(
        z_c_lr, lambda t: std_normal_sample(model.hf_shape(z_c_lr), t, generator),
        model.synthesize_hr, *taus)
    ds_pix_img, ds_per_img = _two_temperatures(
        z_c_hr, lambda t: model.deg.prior.sample(model.deg_shape(z_c_hr), t, generator),
        model.synthesize_lr, *taus)
    bd_y = bicubic_downscale(y, s)
    terms = {
        "sr_pix": sr_cycle_pixel(sr_pix_img, x, s),
        "sr_per": l1(proxy(sr_per_img), proxy(bicubic_upscale(x, s))),
        "sr_gan": lsgan_gen(discs.sr, sr_per_img),
        "ds_pix": ds_cycle_pixel(ds_pix_img, y, s),
        "ds_per": l1(proxy(ds_per_img), proxy(bd_y)),
        "ds_gan": lsgan_gen(discs.lr, ds_per_img),
    }
    images = {"sr": sr_per_img, "ds": ds_per_img}
    return terms, images


def weighted_backward(terms, weights):
    ds = weights.lambda1 * terms["ds_pix"] + weights.lambda2 * terms["ds_per"] + weights.lambda3 * terms["ds_gan"]
    sr = weights.lambda4 * terms["sr_pix"] + weights.lambda5 * terms["sr_per"] + weights.lambda6 * terms["sr_gan"]
    return ds, sr


def backward_losses(model, discs, proxy, x, y, weights=None, generator=None):
    """``(ds_loss, sr_loss)``: the lambda-weighted backward losses for a batch."""
    weights = weights or LossWeights()
    z_c_lr = model.lr.content(x)
    z_c_hr = model.hr(y).z_c
    terms, _ = backward_terms(model, discs, proxy, z_c_lr, z_c_hr, x, y, weights, generator)
    return weighted_backward(terms, weights)


def make_proxy(seed=1234):
    proxy = FeatureProxy(seed)
    proxy.requires_grad_(False)
    return proxy
