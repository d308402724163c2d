"""The bidirectional model: Super-resolution Flow + Downscaling Flow with shared content space."""
from dataclasses import asdict, dataclass, fields

import torch.nn as nn

from .ds_flow import DegFlow, LRFlow
from .numerics import check_finite, check_nchw
from .priors import std_normal_logp, std_normal_sample
from .sr_flow import CONTENT_CHANNELS, HFFlow, HRFlow, hf_channels, levels_for_scale


@dataclass
class ModelConfig:
    scale: int = 4
    flow_steps: int = 8
    cond_flow_steps: int = 4
    hf_blocks: int = 4
    deg_blocks: int = 2
    width: int = 48
    estimator_layers: int = 4
    dm_blocks: int = 8
    n_components: int = 16
    disc_width: int = 32

    def __post_init__(self):
        levels_for_scale(self.scale)
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")

    @classmethod
    def paper(cls, scale=4):
        return cls(scale=scale, flow_steps=16, cond_flow_steps=8, hf_blocks=8, deg_blocks=4,
                   width=64, estimator_layers=8, dm_blocks=16, n_components=16, disc_width=64)

    @classmethod
    def toy(cls, scale=2):
        return cls(scale=scale, flow_steps=1, cond_flow_steps=1, hf_blocks=1, deg_blocks=1,
                   width=8, estimator_layers=1, dm_blocks=1, n_components=2, disc_width=4)

    def as_dict(self):
        return asdict(self)


class SDFlow(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.scale = config.scale
        self.hr = HRFlow(config.scale, config.flow_steps, config.width)
        self.hf = HFFlow(hf_channels(config.scale), config.cond_flow_steps, config.width, config.hf_blocks)
        self.lr = LRFlow(config.flow_steps, config.width, config.estimator_layers, config.dm_blocks)
        self.deg = DegFlow(config.cond_flow_steps, config.width, config.deg_blocks, config.n_components)

    # -- densities ---------------------------------------------------------

    def encode_hr(self, y):
        """HR image -> (z_c, z_h, z_h', logdet_hr, logdet_hf)."""
        check_finite(check_nchw(y, "y"), "y")
        z_c, z_h, ld_hr = self.hr(y)
        z_hp, ld_hf = self.hf(z_h, z_c)
        return z_c, z_h, z_hp, ld_hr, ld_hf

    def encode_lr(self, x):
        """LR image -> (z_c, z_d, z_lr, z_d', logdet_lr, logdet_deg)."""
        check_finite(check_nchw(x, "x"), "x")
        z_c, z_d, z_lr, ld_lr = self.lr(x)
        z_dp, ld_deg = self.deg(z_d, z_c)
        return z_c, z_d, z_lr, z_dp, ld_lr, ld_deg

    def nll_y(self, y):
        _, _, z_hp, ld_hr, ld_hf = self.encode_hr(y)
        return check_finite(-std_normal_logp(z_hp) - ld_hr - ld_hf, "NLL_y")

    def nll_x(self, x):
        *_, z_dp, ld_lr, ld_deg = self.encode_lr(x)
        return check_finite(-self.deg.prior.log_prob(z_dp) - ld_lr - ld_deg, "NLL_x")

    # -- generation --------------------------------------------------------

    def hf_shape(self, z_c):
        b, _, h, w = z_c.shape
        return (b, self.hr.latent_channels - CONTENT_CHANNELS, h, w)

    def sr_generate(self, z_c, tau=0.0, generator=None):
        """Content latent -> SR image; returns ``(clamped, raw)``."""
        z_hp = std_normal_sample(self.hf_shape(z_c), tau, generator, dtype=z_c.dtype)
        y = self.synthesize_hr(z_c, z_hp)
        return y.clamp(0, 1), y

    def synthesize_hr(self, z_c, z_hp):
        return self.hr.inverse(z_c, self.hf.inverse(z_hp, z_c))

    def downscale_generate(self, y, tau=0.0, generator=None, components=None):
        """HR image -> downscaled image; returns ``(clamped, raw)``."""
        z_c = self.hr(y).z_c
        return self.decode_lr(z_c, tau, generator, components)

    def deg_shape(self, z_c):
        b, c, h, w = z_c.shape
        return (b, 4 * c, h // 2, w // 2)

    def decode_lr(self, z_c, tau=0.0, generator=None, components=None):
        z_dp = self.deg.prior.sample(self.deg_shape(z_c), tau, generator, components)
        x = self.synthesize_lr(z_c, z_dp.to(z_c.dtype))
        return x.clamp(0, 1), x

    def synthesize_lr(self, z_c, z_dp):
        return self.lr.inverse(z_c, self.deg.inverse(z_dp, z_c))

    def super_resolve(self, x, tau=0.0, generator=None):
        return self.sr_generate(self.lr.content(x), tau, generator)


def per_dim(nll, image):
    """Per-sample NLL divided by the number of dimensions of one image."""
    return nll / image[0].numel()

