"""Non-invertible networks: conditioning extractors, discriminators, fixed features."""
import torch
import torch.nn as nn
import torch.nn.functional as F


def conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def lrelu():
    return nn.LeakyReLU(0.2)


class DenseBlock(nn.Module):
    def __init__(self, width, growth=16, res_scale=0.2):
        super().__init__()
        self.res_scale = res_scale
        self.convs = nn.ModuleList([conv3(width + i * growth, growth) for i in range(3)])
        self.fuse = conv3(width + 3 * growth, width)
        self.act = lrelu()

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(self.act(conv(torch.cat(feats, 1))))
        return x + self.res_scale * self.act(self.fuse(torch.cat(feats, 1)))


class RRDB(nn.Module):
    def __init__(self, width, growth=16, res_scale=0.2):
        super().__init__()
        self.res_scale = res_scale
        self.blocks = nn.Sequential(*[DenseBlock(width, growth, res_scale) for _ in range(3)])

    def forward(self, x):
        return x + self.res_scale * self.blocks(x)


class CondFeatureExtractor(nn.Module):
    """RRDB trunk without upsampling; keeps spatial size."""

    def __init__(self, in_channels=3, width=48, n_blocks=4, growth=16):
        super().__init__()
        self.out_channels = width
        self.head = conv3(in_channels, width)
        self.trunk = nn.Sequential(*[RRDB(width, growth) for _ in range(n_blocks)])
        self.trunk_conv = conv3(width, width)
        self.tail = nn.Sequential(conv3(width, width), lrelu())

    def forward(self, x):
        h = self.head(x)
        h = h + self.trunk_conv(self.trunk(h))
        return self.tail(h)


class DegradationModulation(nn.Module):
    """``(1 + scale) * feat + shift`` with scale/shift from 1x1 convs over degradation features."""

    def __init__(self, channels, deg_channels):
        super().__init__()
        self.scale = nn.Conv2d(deg_channels, channels, 1)
        self.shift = nn.Conv2d(deg_channels, channels, 1)
        for conv in (self.scale, self.shift):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, feat, deg):
        return (1 + self.scale(deg)) * feat + self.shift(deg)


class DMResBlock(nn.Module):
    def __init__(self, width, res_scale=0.1):
        super().__init__()
        self.res_scale = res_scale
        self.dm1 = DegradationModulation(width, width)
        self.conv1 = conv3(width, width)
        self.dm2 = DegradationModulation(width, width)
        self.conv2 = conv3(width, width)
        self.act = lrelu()

    def forward(self, feat, deg):
        h = self.act(self.conv1(self.dm1(feat, deg)))
        h = self.conv2(self.dm2(h, deg))
        return feat + self.res_scale * h


class LRContentExtractor(nn.Module):
    """Residual network with degradation-modulated blocks; output has the input's shape."""

    def __init__(self, width=48, n_estimator=4, n_blocks=8, in_channels=3):
        super().__init__()
        self.head = nn.Sequential(conv3(in_channels, width), lrelu())
        est = []
        for _ in range(n_estimator):
            est += [conv3(width, width), lrelu()]
        self.estimator = nn.Sequential(*est)
        self.blocks = nn.ModuleList([DMResBlock(width) for _ in range(n_blocks)])
        self.tail = nn.Sequential(conv3(width, width), lrelu(), nn.Conv2d(width, in_channels, 1))

    def forward(self, x):
        feat = self.head(x)
        deg = self.estimator(feat)
        h = feat
        for block in self.blocks:
            h = block(h, deg)
        return self.tail(feat + h)


class PatchDiscriminator(nn.Module):
    """Four conv layers, two of them stride 2; one score per patch."""

    def __init__(self, in_channels=3, width=32):
        super().__init__()
        self.net = nn.Sequential(
            conv3(in_channels, width, 2), lrelu(),
            conv3(width, 2 * width, 2), lrelu(),
            conv3(2 * width, 2 * width), lrelu(),
            conv3(2 * width, 1),
        )

    def forward(self, x):
        return self.net(x)


class FeatureProxy(nn.Module):
    """Frozen random conv stack standing in for a pretrained perceptual network.

    Five stride-2 levels with orthogonal weights drawn from ``seed``.  The weights
    are buffers, so they are never touched by an optimiser.
    """

    def __init__(self, seed=1234, widths=(16, 32, 64, 64, 64), in_channels=3):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.n_levels = len(widths)
        cin = in_channels
        for i, cout in enumerate(widths):
            w = torch.empty(cout, cin * 9, dtype=torch.float64)
            nn.init.orthogonal_(w, gain=2.0 ** 0.5, generator=g)
            self.register_buffer(f"w{i}", w.reshape(cout, cin, 3, 3).to(torch.get_default_dtype()))
            cin = cout

    def forward(self, x):
        h = 2 * x - 1
        for i in range(self.n_levels):
            h = F.leaky_relu(F.conv2d(h, getattr(self, f"w{i}"), stride=2, padding=1), 0.2)
        return h

    def pooled(self, x):
        return self.forward(x).mean(dim=(2, 3))
