import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sdflow import layers as L
from sdflow.errors import DegenerateLayerError, ShapeError
from sdflow.numerics import logdet_bruteforce

LN2_PRECLAMP = L.SCALE_CLAMP * math.atanh(math.log(2) / L.SCALE_CLAMP)


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


def _set_constant_output(net, scale_channels, scale_value):
    """Make a CouplingNet output a constant ``scale_value`` on its scale channels and 0 shift."""
    with torch.no_grad():
        net.out.weight.zero_()
        net.out.bias.zero_()
        net.out.bias[:scale_channels] = scale_value


# -- actnorm -------------------------------------------------------------------

def test_actnorm_identity(f64):
    layer = L.reset_to_identity(L.ActNorm(3))
    x = torch.randn(2, 3, 4, 4)
    y, ld = layer(x)
    assert torch.equal(y, x) and torch.all(ld == 0)


def test_actnorm_scale_two(f64):
    layer = L.reset_to_identity(L.ActNorm(3))
    with torch.no_grad():
        layer.scale.fill_(2.0)
    y, ld = layer(torch.ones(1, 3, 2, 2))
    assert float(ld.detach()) == pytest.approx(12 * math.log(2), abs=1e-12)
    assert float(ld.detach()) == pytest.approx(8.3178, abs=1e-4)
    assert torch.all(y == 2)


def test_actnorm_data_init_statistics(f64):
    x = 3 + 5 * torch.randn(16, 4, 8, 8)
    y, _ = L.ActNorm(4)(x)
    mean = y.mean(dim=(0, 2, 3))
    var = y.var(dim=(0, 2, 3), unbiased=False)
    assert mean.abs().max() < 1e-5 and (var - 1).abs().max() < 1e-4


def test_actnorm_zero_scale_raises(f64):
    layer = L.reset_to_identity(L.ActNorm(2))
    with torch.no_grad():
        layer.scale[0, 1] = 0
    with pytest.raises(DegenerateLayerError):
        layer(torch.randn(1, 2, 2, 2))


# -- invertible 1x1 --------------------------------------------------------------

def test_inv1x1_identity(f64):
    layer = L.InvConv1x1(3)
    layer.set_weight(torch.eye(3))
    x = torch.randn(1, 3, 2, 2)
    y, ld = layer(x)
    assert torch.allclose(y, x, atol=1e-15) and float(ld.detach()) == 0


def test_inv1x1_two_identity(f64):
    layer = L.InvConv1x1(3)
    layer.set_weight(2 * torch.eye(3))
    _, ld = layer(torch.randn(1, 3, 2, 2))
    assert float(ld.detach()) == pytest.approx(8.3178, abs=1e-4)


def test_inv1x1_random_matches_oracle(f64):
    torch.manual_seed(3)
    layer = L.InvConv1x1(3)
    x = torch.randn(1, 3, 2, 2)
    assert _rel(float(layer(x)[1].detach()), logdet_bruteforce(layer, x)) < 1e-4


def test_inv1x1_vanishing_diagonal(f64):
    layer = L.InvConv1x1(3)
    with torch.no_grad():
        layer.log_s[1] = -100.0
    with pytest.raises(DegenerateLayerError):
        layer(torch.randn(1, 3, 2, 2))
    with pytest.raises(DegenerateLayerError):
        layer.set_weight(torch.zeros(3, 3))


# -- couplings -------------------------------------------------------------------

def test_coupling_zero_init_identity(f64):
    layer = L.AffineCoupling(4, 8)
    x = torch.randn(2, 4, 3, 3)
    y, ld = layer(x)
    assert torch.equal(y, x) and torch.all(ld == 0)


def test_coupling_constant_ln2_doubles(f64):
    layer = L.AffineCoupling(4, 8)
    _set_constant_output(layer.net, 2, LN2_PRECLAMP)
    x = torch.randn(1, 4, 3, 3)
    y, ld = layer(x)
    assert torch.allclose(y[:, :2], x[:, :2]) and torch.allclose(y[:, 2:], 2 * x[:, 2:], atol=1e-12)
    assert float(ld.detach()) == pytest.approx(18 * math.log(2), abs=1e-10)


def test_coupling_split_is_ceil_half(f64):
    layer = L.AffineCoupling(5, 8)
    assert (layer.channels_a, layer.channels_b) == (3, 2)


def test_coupling_random_round_trip_and_oracle(f64):
    torch.manual_seed(0)
    layer = L.perturb_parameters(L.AffineCoupling(4, 8), 0.1, 0)
    x = torch.randn(1, 4, 4, 4)
    y, ld = layer(x)
    assert (layer.inverse(y) - x).abs().max() < 1e-6
    assert _rel(float(ld.detach()), logdet_bruteforce(layer, x)) < 1e-4


def test_cond_coupling_zero_init_identity(f64):
    layer = L.CondAffineCoupling(4, 2, 8)
    x = torch.randn(1, 4, 3, 3)
    y, ld = layer(x, torch.randn(1, 2, 3, 3))
    assert torch.equal(y, x) and torch.all(ld == 0)


def test_cond_coupling_ignoring_cond_equals_unconditional(f64):
    torch.manual_seed(1)
    plain = L.perturb_parameters(L.AffineCoupling(4, 8), 0.1, 1)
    cond = L.CondAffineCoupling(4, 2, 8)
    with torch.no_grad():
        for (name, p), q in zip(cond.net.named_parameters(), plain.net.parameters()):
            if name == "body.0.weight":
                p.zero_()
                p[:, :2] = q
            else:
                p.copy_(q)
    x = torch.randn(1, 4, 3, 3)
    y1, ld1 = plain(x)
    y2, ld2 = cond(x, torch.zeros(1, 2, 3, 3))
    assert torch.allclose(y1, y2, atol=1e-14) and torch.allclose(ld1, ld2, atol=1e-14)


def test_cond_coupling_random_round_trip_and_oracle(f64):
    torch.manual_seed(2)
    layer = L.perturb_parameters(L.CondAffineCoupling(4, 2, 8), 0.1, 2)
    x, c = torch.randn(1, 4, 4, 4), torch.randn(1, 2, 4, 4)
    y, ld = layer(x, c)
    assert (layer.inverse(y, c) - x).abs().max() < 1e-6
    assert _rel(float(ld.detach()), logdet_bruteforce(lambda v: layer(v, c), x)) < 1e-4


@pytest.mark.parametrize("factory", [lambda: L.CondAffineCoupling(4, 2, 8), lambda: L.AffineInjector(4, 2, 8)])
def test_conditional_spatial_mismatch(f64, factory):
    with pytest.raises(ShapeError):
        factory()(torch.randn(1, 4, 4, 4), torch.randn(1, 2, 2, 2))


def test_injector_zero_init_identity(f64):
    x = torch.randn(1, 4, 3, 3)
    y, ld = L.AffineInjector(4, 2, 8)(x, torch.randn(1, 2, 3, 3))
    assert torch.equal(y, x) and torch.all(ld == 0)


def test_injector_constant_ln3_triples(f64):
    layer = L.AffineInjector(4, 2, 8)
    _set_constant_output(layer.net, 4, L.SCALE_CLAMP * math.atanh(math.log(3) / L.SCALE_CLAMP))
    x = torch.randn(1, 4, 3, 3)
    y, ld = layer(x, torch.randn(1, 2, 3, 3))
    assert torch.allclose(y, 3 * x, atol=1e-12)
    assert float(ld.detach()) == pytest.approx(36 * math.log(3), abs=1e-10)


def test_injector_random_oracle(f64):
    torch.manual_seed(4)
    layer = L.perturb_parameters(L.AffineInjector(4, 2, 8), 0.1, 4)
    x, c = torch.randn(1, 4, 4, 4), torch.randn(1, 2, 4, 4)
    _, ld = layer(x, c)
    assert _rel(float(ld.detach()), logdet_bruteforce(lambda v: layer(v, c), x)) < 1e-4


# -- squeeze / split -------------------------------------------------------------

def test_squeeze_shape_and_round_trip():
    x = torch.randn(1, 3, 4, 4)
    z = L.squeeze(x)
    assert z.shape == (1, 12, 2, 2)
    assert torch.equal(L.unsqueeze(z), x)


def test_squeeze_index_formula():
    c = 3
    x = torch.arange(c * 16, dtype=torch.float64).reshape(1, c, 4, 4)
    z = L.squeeze(x)
    offsets = [(0, 0), (0, 1), (1, 0), (1, 1)]
    for k, (di, dj) in enumerate(offsets):
        for ch in range(c):
            for i in range(2):
                for j in range(2):
                    assert z[0, ch + k * c, i, j] == x[0, ch, 2 * i + di, 2 * j + dj]


def test_squeeze_odd_raises():
    with pytest.raises(ShapeError):
        L.squeeze(torch.zeros(1, 3, 5, 4))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_squeeze_round_trip_property(b, c, h, w):
    x = torch.randn(b, c, 2 * h, 2 * w)
    assert torch.equal(L.unsqueeze(L.squeeze(x)), x)
    assert L.squeeze(x).numel() == x.numel()


def test_split_shapes_and_concat():
    x = torch.randn(2, 48, 3, 3)
    a, b = L.split_channels(x, 3)
    assert a.shape == (2, 3, 3, 3) and b.shape == (2, 45, 3, 3)
    assert torch.equal(L.concat(a, b), x)
    u, v = torch.randn(1, 2, 2, 2), torch.randn(1, 5, 2, 2)
    p, q = L.split_channels(L.concat(u, v), 2)
    assert torch.equal(p, u) and torch.equal(q, v)


@pytest.mark.parametrize("n", [0, 48, -1])
def test_split_invalid(n):
    with pytest.raises(ShapeError):
        L.split_channels(torch.zeros(1, 48, 1, 1), n)


# -- steps -------------------------------------------------------------------------

def test_transition_step_identity_and_sum(f64):
    step = L.reset_to_identity(L.TransitionStep(4))
    x = torch.randn(1, 4, 2, 2)
    y, ld = step(x)
    assert torch.allclose(y, x, atol=1e-15) and float(ld.detach()) == 0
    L.perturb_parameters(step, 0.1, 5)
    _, total = step(x)
    h, parts = x, 0.0
    for layer in step.layers:
        h, ld = layer(h)
        parts += float(ld.detach())
    assert float(total.detach()) == pytest.approx(parts, abs=1e-12)
    assert _rel(float(total.detach()), logdet_bruteforce(step, x)) < 1e-4


def test_flow_step_identity_round_trip_oracle(f64):
    step = L.reset_to_identity(L.FlowStep(4, 8))
    x = torch.randn(1, 4, 4, 4)
    assert torch.allclose(step(x)[0], x, atol=1e-14)
    L.perturb_parameters(step, 0.1, 6)
    y, ld = step(x)
    assert (step.inverse(y) - x).abs().max() < 1e-6
    assert _rel(float(ld.detach()), logdet_bruteforce(step, x)) < 1e-4


def test_cond_flow_step_order_and_round_trip(f64):
    step = L.CondFlowStep(4, 2, 8)
    kinds = [layer.kind for layer in step.layers]
    assert kinds == ["actnorm", "inv1x1", "cond_affine_coupling", "affine_injector"]
    L.perturb_parameters(step, 0.1, 7)
    x, c = torch.randn(1, 4, 4, 4), torch.randn(1, 2, 4, 4)
    y, ld = step(x, c)
    assert (step.inverse(y, c) - x).abs().max() < 1e-6
    assert _rel(float(ld.detach()), logdet_bruteforce(lambda v: step(v, c), x)) < 1e-4


def test_volume_bookkeeping(f64):
    x = torch.randn(1, 3, 8, 8)
    block = L.perturb_parameters(L.downscale_block(3), 0.05, 0)
    y, _ = block(x)
    assert y.numel() == x.numel() and y.shape == (1, 12, 4, 4)
    assert torch.allclose(block.inverse(y), x, atol=1e-12)
