import math

import torch
import torch.nn as nn

from .errors import ParameterError

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _check_tau(tau):
    if tau < 0:
        raise ParameterError(f"temperature must be >= 0, got {tau}")


def _per_sample_sum(t):
    return t.flatten(1).sum(1)


def std_normal_logp(z):
    """Per-sample log density of z under N(0, I)."""
    return _per_sample_sum(-0.5 * z ** 2 - HALF_LOG_2PI)


def std_normal_sample(shape, tau, generator=None, dtype=None):
    _check_tau(tau)
    if tau == 0:
        return torch.zeros(shape, dtype=dtype)
    return tau * torch.randn(shape, generator=generator, dtype=dtype)


def gaussian_logp(z, mean, log_scale):
    return -0.5 * ((z - mean) * torch.exp(-log_scale)) ** 2 - log_scale - HALF_LOG_2PI


def mog_logp(z, means, log_scales):
    """Per-sample log density of z under an equal-weight diagonal Gaussian mixture.

    ``means`` and ``log_scales`` have shape ``(N, *elem)`` where ``elem`` broadcasts
    against ``z.shape[1:]``.
    """
    n = means.shape[0]
    # (B, N, C, H, W) -> (B, N)
    comp = gaussian_logp(z[:, None], means[None], log_scales[None]).flatten(2).sum(2)
    return torch.logsumexp(comp - math.log(n), dim=1)


class StdNormalPrior(nn.Module):
    def log_prob(self, z):
        return std_normal_logp(z)

    def sample(self, shape, tau=1.0, generator=None):
        return std_normal_sample(shape, tau, generator)


class MoGPrior(nn.Module):
    """Equal-weight mixture of diagonal Gaussians with learnable means and scales.

    ``elem_shape`` is the per-component parameter shape; it must broadcast against
    a latent's ``(C, H, W)``.  Temperature scales only the within-component noise,
    so ``tau=0`` returns the mean of the drawn component.
    """

    def __init__(self, n_components, elem_shape, mean_std=0.1):
        super().__init__()
        if n_components < 1:
            raise ParameterError("a mixture needs at least one component")
        self.n_components = n_components
        self.means = nn.Parameter(mean_std * torch.randn(n_components, *elem_shape))
        self.log_scales = nn.Parameter(torch.zeros(n_components, *elem_shape))

    def log_prob(self, z):
        return mog_logp(z, self.means, self.log_scales)

    def draw_components(self, batch, generator=None):
        return torch.randint(self.n_components, (batch,), generator=generator)

    def sample(self, shape, tau=1.0, generator=None, components=None):
        """Draw ``shape[0]`` latents; ``components`` fixes the per-sample mixture index."""
        _check_tau(tau)
        b = shape[0]
        if components is None:
            components = self.draw_components(b, generator)
        mu = self.means[components].expand(b, *shape[1:])
        if tau == 0:
            return mu.clone()
        sigma = torch.exp(self.log_scales[components])
        eps = torch.randn(shape, generator=generator, dtype=mu.dtype)
        return mu + tau * sigma * eps
