"""Invertible building blocks.

Every layer maps ``forward(x, cond=None) -> (y, logdet)`` where ``logdet`` has
shape ``(B,)`` and ``inverse(y, cond=None) -> x`` undoes it exactly.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateLayerError, ShapeError

SCALE_CLAMP = 5.0


def clamp_scale(s, bound=SCALE_CLAMP):
    # soft clamp, identity to first order around 0
    return bound * torch.tanh(s / bound)


def _zeros_logdet(x):
    return x.new_zeros(x.shape[0])


def _check_cond(x, cond):
    if cond is None:
        raise ShapeError("conditional layer called without a condition")
    if cond.shape[0] != x.shape[0] or cond.shape[2:] != x.shape[2:]:
        raise ShapeError(
            f"condition shape {tuple(cond.shape)} does not match input {tuple(x.shape)} spatially")


class FlowLayer(nn.Module):
    kind = "identity"

    def forward(self, x, cond=None):
        return x, _zeros_logdet(x)

    def inverse(self, y, cond=None):
        return y


# ---------------------------------------------------------------------------
# permutations

def squeeze(x):
    """Checkerboard squeeze ``(B, C, H, W) -> (B, 4C, H/2, W/2)``.

    Output channel ``c + k*C`` at ``(i, j)`` holds input ``(c, 2i + k // 2, 2j + k % 2)``,
    i.e. the offsets are ordered (0,0), (0,1), (1,0), (1,1).
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even H and W, got {h}x{w}")
    x = x.reshape(b, c, h // 2, 2, w // 2, 2)
    x = x.permute(0, 3, 5, 1, 2, 4)
    return x.reshape(b, 4 * c, h // 2, w // 2)


def unsqueeze(x):
    b, c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs a channel count divisible by 4, got {c4}")
    c = c4 // 4
    x = x.reshape(b, 2, 2, c, h, w)
    x = x.permute(0, 3, 4, 1, 5, 2)
    return x.reshape(b, c, 2 * h, 2 * w)


def split_channels(x, n_keep):
    c = x.shape[1]
    if not 0 < n_keep < c:
        raise ShapeError(f"n_keep must be in (0, {c}), got {n_keep}")
    return x[:, :n_keep], x[:, n_keep:]


def concat(a, b):
    return torch.cat([a, b], dim=1)


class Squeeze(FlowLayer):
    kind = "squeeze"

    def forward(self, x, cond=None):
        return squeeze(x), _zeros_logdet(x)

    def inverse(self, y, cond=None):
        return unsqueeze(y)


class Unsqueeze(FlowLayer):
    kind = "unsqueeze"

    def forward(self, x, cond=None):
        return unsqueeze(x), _zeros_logdet(x)

    def inverse(self, y, cond=None):
        return squeeze(y)


# ---------------------------------------------------------------------------
# linear layers

class ActNorm(FlowLayer):
    """Per-channel ``y = s * (x + b)`` with data-dependent initialisation."""
    kind = "actnorm"

    def __init__(self, channels):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.scale = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.register_buffer("initialized", torch.tensor(0, dtype=torch.uint8))

    @torch.no_grad()
    def initialize(self, x):
        mean = x.mean(dim=(0, 2, 3), keepdim=True)
        var = ((x - mean) ** 2).mean(dim=(0, 2, 3), keepdim=True)
        var = torch.where(var < 1e-8, torch.ones_like(var), var)
        self.bias.copy_(-mean)
        self.scale.copy_(1.0 / torch.sqrt(var))
        self.initialized.fill_(1)

    def mark_initialized(self):
        self.initialized.fill_(1)

    def _logdet(self, x):
        if (self.scale == 0).any():
            raise DegenerateLayerError("ActNorm has a zero channel scale")
        h, w = x.shape[2:]
        ld = h * w * torch.log(torch.abs(self.scale)).sum()
        return ld.expand(x.shape[0])

    def forward(self, x, cond=None):
        if not self.initialized:
            self.initialize(x)
        return self.scale * (x + self.bias), self._logdet(x)

    def inverse(self, y, cond=None):
        if (self.scale == 0).any():
            raise DegenerateLayerError("ActNorm has a zero channel scale")
        return y / self.scale - self.bias


class InvConv1x1(FlowLayer):
    """Invertible 1x1 convolution with weight ``P @ L @ U``.

    P is a fixed permutation, L unit lower triangular and U upper triangular
    with diagonal ``sign * exp(log_s)``.
    """
    kind = "inv1x1"

    def __init__(self, channels):
        super().__init__()
        q, _ = torch.linalg.qr(torch.randn(channels, channels, dtype=torch.float64))
        self.channels = channels
        self.register_buffer("perm", torch.eye(channels))
        self.register_buffer("sign_s", torch.ones(channels))
        self.register_buffer("l_mask", torch.tril(torch.ones(channels, channels), -1))
        self.lower = nn.Parameter(torch.zeros(channels, channels))
        self.upper = nn.Parameter(torch.zeros(channels, channels))
        self.log_s = nn.Parameter(torch.zeros(channels))
        self.set_weight(q)

    @torch.no_grad()
    def set_weight(self, weight):
        weight = torch.as_tensor(weight, dtype=torch.float64)
        p, l, u = torch.linalg.lu(weight)
        d = torch.diagonal(u)
        if (d.abs() < 1e-12).any():
            raise DegenerateLayerError("weight is singular")
        dtype = self.lower.dtype
        self.perm.copy_(p.to(dtype))
        self.lower.copy_(torch.tril(l, -1).to(dtype))
        self.upper.copy_(torch.triu(u, 1).to(dtype))
        self.sign_s.copy_(torch.sign(d).to(dtype))
        self.log_s.copy_(torch.log(d.abs()).to(dtype))

    def weight(self):
        s = torch.exp(self.log_s)
        if (s.abs() < 1e-12).any():
            raise DegenerateLayerError("InvConv1x1 has a vanishing diagonal entry in U")
        eye = torch.eye(self.channels, dtype=self.lower.dtype, device=self.lower.device)
        l = self.lower * self.l_mask + eye
        u = self.upper * self.l_mask.T + torch.diag(self.sign_s * s)
        return self.perm @ l @ u

    def _logdet(self, x):
        h, w = x.shape[2:]
        return (h * w * self.log_s.sum()).expand(x.shape[0])

    def forward(self, x, cond=None):
        w = self.weight()
        return F.conv2d(x, w[:, :, None, None]), self._logdet(x)

    def inverse(self, y, cond=None):
        w_inv = torch.linalg.inv(self.weight())
        return F.conv2d(y, w_inv[:, :, None, None])


# ---------------------------------------------------------------------------
# coupling layers

class CouplingNet(nn.Module):
    """conv3x3-ReLU-conv3x3-ReLU-conv3x3 with a zero-initialised output conv."""

    def __init__(self, in_channels, out_channels, width=64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
        )
        self.out = nn.Conv2d(width, out_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.body(x))


class AffineCoupling(FlowLayer):
    """``z_b' = exp(clamp(h_s(z_a))) * z_b + h_b(z_a)``; z_a is the first ceil(C/2) channels.

    With ``cond_channels > 0`` the scale/shift network sees ``concat(z_a, cond)``.
    """
    kind = "affine_coupling"

    def __init__(self, channels, width=64, cond_channels=0):
        super().__init__()
        if channels < 2:
            raise ShapeError("affine coupling needs at least 2 channels")
        self.channels_a = (channels + 1) // 2
        self.channels_b = channels - self.channels_a
        self.cond_channels = cond_channels
        self.net = CouplingNet(self.channels_a + cond_channels, 2 * self.channels_b, width)

    def _scale_shift(self, za, cond):
        if self.cond_channels:
            _check_cond(za, cond)
            za = torch.cat([za, cond], dim=1)
        h = self.net(za)
        return clamp_scale(h[:, :self.channels_b]), h[:, self.channels_b:]

    def forward(self, x, cond=None):
        za, zb = x[:, :self.channels_a], x[:, self.channels_a:]
        s, b = self._scale_shift(za, cond)
        zb = torch.exp(s) * zb + b
        return torch.cat([za, zb], dim=1), s.flatten(1).sum(1)

    def inverse(self, y, cond=None):
        za, zb = y[:, :self.channels_a], y[:, self.channels_a:]
        s, b = self._scale_shift(za, cond)
        zb = (zb - b) * torch.exp(-s)
        return torch.cat([za, zb], dim=1)


class CondAffineCoupling(AffineCoupling):
    kind = "cond_affine_coupling"

    def __init__(self, channels, cond_channels, width=64):
        super().__init__(channels, width, cond_channels)


class AffineInjector(FlowLayer):
    """``y = exp(clamp(g_s(cond))) * x + g_b(cond)`` over every channel of x."""
    kind = "affine_injector"

    def __init__(self, channels, cond_channels, width=64):
        super().__init__()
        self.channels = channels
        self.net = CouplingNet(cond_channels, 2 * channels, width)

    def _scale_shift(self, x, cond):
        _check_cond(x, cond)
        h = self.net(cond)
        return clamp_scale(h[:, :self.channels]), h[:, self.channels:]

    def forward(self, x, cond=None):
        s, b = self._scale_shift(x, cond)
        return torch.exp(s) * x + b, s.flatten(1).sum(1)

    def inverse(self, y, cond=None):
        s, b = self._scale_shift(y, cond)
        return (y - b) * torch.exp(-s)


# ---------------------------------------------------------------------------
# compositions

class FlowSequence(FlowLayer):
    kind = "sequence"

    def __init__(self, layers=()):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def forward(self, x, cond=None):
        logdet = _zeros_logdet(x)
        for layer in self.layers:
            x, ld = layer(x, cond)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, y, cond=None):
        for layer in reversed(self.layers):
            y = layer.inverse(y, cond)
        return y


class TransitionStep(FlowSequence):
    kind = "transition_step"

    def __init__(self, channels):
        super().__init__([ActNorm(channels), InvConv1x1(channels)])


class FlowStep(FlowSequence):
    kind = "flow_step"

    def __init__(self, channels, width=64):
        super().__init__([ActNorm(channels), InvConv1x1(channels), AffineCoupling(channels, width)])


class CondFlowStep(FlowSequence):
    kind = "cond_flow_step"

    def __init__(self, channels, cond_channels, width=64):
        super().__init__([
            ActNorm(channels),
            InvConv1x1(channels),
            CondAffineCoupling(channels, cond_channels, width),
            AffineInjector(channels, cond_channels, width),
        ])


def downscale_block(channels):
    """Squeeze followed by two transition steps; ``channels`` is the pre-squeeze count."""
    return FlowSequence([Squeeze(), TransitionStep(4 * channels), TransitionStep(4 * channels)])


# ---------------------------------------------------------------------------
# parameter utilities

@torch.no_grad()
def reset_to_identity(module):
    """Put every invertible layer inside ``module`` at its identity setting."""
    for m in module.modules():
        if isinstance(m, ActNorm):
            m.bias.zero_()
            m.scale.fill_(1.0)
            m.mark_initialized()
        elif isinstance(m, InvConv1x1):
            m.set_weight(torch.eye(m.channels))
        elif isinstance(m, CouplingNet):
            m.out.weight.zero_()
            m.out.bias.zero_()
    return module


@torch.no_grad()
def perturb_parameters(module, std=0.05, seed=0):
    """Add Gaussian noise to all parameters (test helper for non-trivial layers).

    Also marks ActNorm layers initialised so the perturbation is not overwritten.
    """
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, ActNorm):
            m.mark_initialized()
    for p in module.parameters():
        p.add_(std * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return module


def mark_initialized(module):
    for m in module.modules():
        if isinstance(m, ActNorm):
            m.mark_initialized()
    return module

