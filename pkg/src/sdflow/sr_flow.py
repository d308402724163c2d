"""HR Flow (image -> content + high-frequency latents) and the conditional HF Flow."""
import math
from typing import NamedTuple

import torch
import torch.nn as nn

from .errors import ShapeError
from .layers import CondFlowStep, FlowSequence, FlowStep, concat, downscale_block, split_channels
from .nets import CondFeatureExtractor

CONTENT_CHANNELS = 3


def levels_for_scale(scale):
    levels = int(round(math.log2(scale)))
    if scale not in (2, 4, 8) or 2 ** levels != scale:
        raise ShapeError(f"scale must be 2, 4 or 8, got {scale}")
    return levels


def hf_channels(scale, image_channels=3):
    return image_channels * 4 ** levels_for_scale(scale) - CONTENT_CHANNELS


class HRLatents(NamedTuple):
    z_c: torch.Tensor
    z_h: torch.Tensor
    logdet: torch.Tensor


class HRFlow(nn.Module):
    """``log2(scale)`` levels of (squeeze, 2 transition steps, K flow steps), then a split.

    The first three output channels are the content latent z_c, the rest z_h.
    """

    def __init__(self, scale=4, flow_steps=8, width=48, image_channels=3):
        super().__init__()
        self.scale = scale
        self.levels = levels_for_scale(scale)
        blocks = []
        c = image_channels
        for _ in range(self.levels):
            blocks.append(downscale_block(c))
            c *= 4
            blocks.append(FlowSequence([FlowStep(c, width) for _ in range(flow_steps)]))
        self.flow = FlowSequence(blocks)
        self.latent_channels = c

    def forward(self, y):
        _, _, h, w = y.shape
        if h % self.scale or w % self.scale:
            raise ShapeError(f"HR size {h}x{w} is not divisible by {self.scale}")
        z, logdet = self.flow(y)
        z_c, z_h = split_channels(z, CONTENT_CHANNELS)
        return HRLatents(z_c, z_h, logdet)

    def inverse(self, z_c, z_h):
        return self.flow.inverse(concat(z_c, z_h))


class HFFlow(nn.Module):
    """P conditional flow steps on z_h, conditioned on features of z_c."""

    def __init__(self, z_channels, cond_flow_steps=4, width=48, n_blocks=4):
        super().__init__()
        self.cond_net = CondFeatureExtractor(CONTENT_CHANNELS, width, n_blocks)
        self.steps = FlowSequence(
            [CondFlowStep(z_channels, self.cond_net.out_channels, width) for _ in range(cond_flow_steps)])

    def _cond(self, z_h, z_c):
        if z_h.shape[0] != z_c.shape[0] or z_h.shape[2:] != z_c.shape[2:]:
            raise ShapeError(f"z_h {tuple(z_h.shape)} and z_c {tuple(z_c.shape)} are not aligned")
        return self.cond_net(z_c)

    def forward(self, z_h, z_c):
        return self.steps(z_h, self._cond(z_h, z_c))

    def inverse(self, z, z_c):
        return self.steps.inverse(z, self._cond(z, z_c))
