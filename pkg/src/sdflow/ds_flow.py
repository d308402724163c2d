"""LR Flow (image -> content + degradation latents) and the conditional Deg Flow."""
from typing import NamedTuple

import torch
import torch.nn as nn

from .errors import ShapeError
from .layers import CondFlowStep, FlowSequence, FlowStep, Unsqueeze, downscale_block, squeeze
from .nets import CondFeatureExtractor, LRContentExtractor, lrelu
from .priors import MoGPrior


class LRLatents(NamedTuple):
    z_c: torch.Tensor
    z_d: torch.Tensor
    z_lr: torch.Tensor
    logdet: torch.Tensor


class LRFlow(nn.Module):
    """An INN (squeeze block, K flow steps, unsqueeze) plus a content extractor.

    ``z_d = INN(x) - z_c``; the subtraction has unit Jacobian so only the INN
    contributes to the log-determinant.
    """

    def __init__(self, flow_steps=8, width=48, n_estimator=4, n_dm_blocks=8, image_channels=3):
        super().__init__()
        c = 4 * image_channels
        self.inn = FlowSequence([
            downscale_block(image_channels),
            FlowSequence([FlowStep(c, width) for _ in range(flow_steps)]),
            Unsqueeze(),
        ])
        self.content = LRContentExtractor(width, n_estimator, n_dm_blocks, image_channels)

    def forward(self, x):
        _, _, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"LR size {h}x{w} must be even")
        z_lr, logdet = self.inn(x)
        z_c = self.content(x)
        return LRLatents(z_c, z_lr - z_c, z_lr, logdet)

    def inverse(self, z_c, z_d):
        if z_c.shape != z_d.shape:
            raise ShapeError(f"z_c {tuple(z_c.shape)} and z_d {tuple(z_d.shape)} differ")
        return self.inn.inverse(z_c + z_d)

    def decode_content(self, z_c):
        return self.inn.inverse(z_c)


class DegFlow(nn.Module):
    """Squeeze block then P conditional steps; the output stays in squeezed shape.

    The base density is a Gaussian mixture with per-channel parameters, so the
    flow applies to any even LR size.
    """

    def __init__(self, cond_flow_steps=4, width=48, n_blocks=2, n_components=16, image_channels=3):
        super().__init__()
        c = 4 * image_channels
        self.db = downscale_block(image_channels)
        self.cond_net = CondFeatureExtractor(image_channels, width, n_blocks)
        self.cond_reduce = nn.Sequential(nn.Conv2d(4 * width, width, 1), lrelu())
        self.steps = FlowSequence([CondFlowStep(c, width, width) for _ in range(cond_flow_steps)])
        self.prior = MoGPrior(n_components, (c, 1, 1))

    def _cond(self, z_c):
        return self.cond_reduce(squeeze(self.cond_net(z_c)))

    def forward(self, z_d, z_c):
        if z_d.shape != z_c.shape:
            raise ShapeError(f"z_d {tuple(z_d.shape)} and z_c {tuple(z_c.shape)} differ")
        z, logdet = self.db(z_d)
        z, ld = self.steps(z, self._cond(z_c))
        return z, logdet + ld

    def inverse(self, z, z_c):
        z = self.steps.inverse(z, self._cond(z_c))
        return self.db.inverse(z)

