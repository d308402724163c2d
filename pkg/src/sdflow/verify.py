"""Invertibility, log-determinant and gradient suites on small 64-bit configurations.

Each check yields a :class:`Check` carrying the measured value and the tolerance
it was held to, so the report documents itself.
"""
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import layers as L
from .ds_flow import DegFlow, LRFlow
from .model import ModelConfig, SDFlow, per_dim
from .numerics import grad_check, logdet_bruteforce, precision
from .objectives import (Discriminators, LossWeights, backward_terms, content_loss, domain_loss_disc,
                         domain_loss_gen, make_proxy, weighted_backward)
from .priors import std_normal_logp
from .sr_flow import HFFlow, HRFlow

INV_TOL = 1e-5
LOGDET_TOL = 1e-4
GRAD_TOL = 1e-3
GRAD_FLOOR = 1e-8


@dataclass
class Check:
    suite: str
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def as_dict(self):
        return asdict(self)


# -- cases ---------------------------------------------------------------------
# (name, factory() -> layer, input shape, cond shape or None)

def layer_cases():
    return [
        ("actnorm", lambda: L.ActNorm(4), (1, 4, 4, 4), None),
        ("inv1x1", lambda: L.InvConv1x1(4), (1, 4, 4, 4), None),
        ("affine_coupling", lambda: L.AffineCoupling(4, 8), (1, 4, 4, 4), None),
        ("affine_coupling_odd", lambda: L.AffineCoupling(3, 8), (1, 3, 4, 4), None),
        ("cond_affine_coupling", lambda: L.CondAffineCoupling(4, 2, 8), (1, 4, 4, 4), (1, 2, 4, 4)),
        ("affine_injector", lambda: L.AffineInjector(4, 2, 8), (1, 4, 4, 4), (1, 2, 4, 4)),
        ("squeeze", L.Squeeze, (1, 1, 4, 4), None),
        ("unsqueeze", L.Unsqueeze, (1, 4, 2, 2), None),
        ("transition_step", lambda: L.TransitionStep(4), (1, 4, 4, 4), None),
        ("flow_step", lambda: L.FlowStep(4, 8), (1, 4, 4, 4), None),
        ("cond_flow_step", lambda: L.CondFlowStep(4, 2, 8), (1, 4, 4, 4), (1, 2, 4, 4)),
        ("downscale_block", lambda: L.downscale_block(1), (1, 1, 4, 4), None),
    ]


class _Wrap(torch.nn.Module):
    """Adapt a composed flow to the ``(x) -> (latents..., logdet)`` / inverse shape."""

    def __init__(self, fwd, inv, module, brute=None):
        super().__init__()
        self.module = module
        self._fwd, self._inv, self._brute = fwd, inv, brute

    def forward(self, x, cond=None):
        return self._fwd(self.module, x, cond)

    def inverse(self, out, cond=None):
        return self._inv(self.module, out, cond)

    def volume_map(self, x, cond=None):
        """The square map whose Jacobian the reported logdet describes."""
        return (self._brute or self._fwd)(self.module, x, cond)


def _invert(layer, out, c):
    return layer.inverse(out, c) if isinstance(layer, _Wrap) else layer.inverse(out[0], c)


def flow_cases():
    toy = ModelConfig.toy(2)
    return [
        ("hr_flow", lambda: _Wrap(lambda m, y, c: m(y), lambda m, o, c: m.inverse(o[0], o[1]),
                                  HRFlow(2, toy.flow_steps, toy.width)), (1, 3, 4, 4), None),
        ("hf_flow", lambda: _Wrap(lambda m, z, c: m(z, c), lambda m, o, c: m.inverse(o[0], c),
                                  HFFlow(9, toy.cond_flow_steps, toy.width, toy.hf_blocks)), (1, 9, 2, 2), (1, 3, 2, 2)),
        ("lr_flow", lambda: _Wrap(lambda m, x, c: m(x), lambda m, o, c: m.inverse(o[0], o[1]),
                                  LRFlow(toy.flow_steps, toy.width, toy.estimator_layers, toy.dm_blocks),
                                  brute=lambda m, x, c: m.inn(x)),
         (1, 3, 4, 4), None),
        ("deg_flow", lambda: _Wrap(lambda m, z, c: m(z, c), lambda m, o, c: m.inverse(o[0], c),
                                   DegFlow(toy.cond_flow_steps, toy.width, toy.deg_blocks, toy.n_components)),
         (1, 3, 2, 2), (1, 3, 2, 2)),
    ]


def _build(factory, seed):
    torch.manual_seed(seed)
    layer = factory()
    L.perturb_parameters(layer, 0.05, seed)
    return layer


def _inputs(shape, cond_shape, seed, batch=1):
    g = torch.Generator().manual_seed(10_000 + seed)
    x = torch.randn((batch,) + tuple(shape[1:]), generator=g)
    c = torch.randn((batch,) + tuple(cond_shape[1:]), generator=g) if cond_shape else None
    return x, c


# -- suites ----------------------------------------------------------------------

def invertibility_suite(seeds=100, cases=None, base=0):
    out = []
    with precision("float64"), torch.no_grad():
        for name, factory, shape, cshape in cases or layer_cases() + flow_cases():
            worst = 0.0
            for seed in range(base, base + seeds):
                layer = _build(factory, seed)
                x, c = _inputs(shape, cshape, seed, batch=2)
                xr = _invert(layer, layer(x, c), c)
                worst = max(worst, float((xr - x).abs().max()))
            out.append(Check("invertibility", name, worst, INV_TOL, worst < INV_TOL, f"max |inv(f(x)) - x| over {seeds} seeds"))
    return out


def _logdet_of(out):
    return float(out[-1][0])


def logdet_suite(cases=None, seeds=3, base=0):
    """Reported logdet vs the brute-force Jacobian, and composition = sum of parts."""
    out = []
    with precision("float64"):
        for name, factory, shape, cshape in cases or layer_cases() + flow_cases():
            worst, detail = 0.0, ""
            for seed in range(base, base + seeds):
                layer = _build(factory, seed)
                x, c = _inputs(shape, cshape, seed)
                with torch.no_grad():
                    reported = _logdet_of(layer(x, c))
                fn = layer.volume_map if isinstance(layer, _Wrap) else layer
                brute = logdet_bruteforce(lambda t: fn(t, c), x)
                err = abs(reported - brute) / max(1.0, abs(brute))
                if err >= worst:
                    worst, detail = err, f"reported {reported:.10g} brute-force {brute:.10g}"
            out.append(Check("logdet", name, worst, LOGDET_TOL, worst < LOGDET_TOL, detail))
        # composition of heterogeneous layers
        torch.manual_seed(0)
        parts = [L.ActNorm(4), L.InvConv1x1(4), L.CondAffineCoupling(4, 2, 8), L.AffineInjector(4, 2, 8)]
        seq = L.FlowSequence(parts)
        L.perturb_parameters(seq, 0.05, 0)
        x, c = _inputs((1, 4, 4, 4), (1, 2, 4, 4), 0)
        with torch.no_grad():
            _, total = seq(x, c)
            h, acc = x, 0.0
            for p in parts:
                h, ld = p(h, c)
                acc += float(ld[0])
        err = abs(float(total[0]) - acc) / max(1.0, abs(acc))
        out.append(Check("logdet", "composition_sum", err, 1e-12, err < 1e-12, "sequence logdet vs sum of parts"))
    return out


# -- gradient suite ---------------------------------------------------------------

def _toy_setup(seed=0):
    torch.manual_seed(seed)
    model = SDFlow(ModelConfig.toy(2))
    discs = Discriminators(4)
    L.perturb_parameters(model, 0.05, seed)
    L.perturb_parameters(discs, 0.05, seed + 1)
    g = torch.Generator().manual_seed(seed + 2)
    x = torch.rand(2, 3, 4, 4, generator=g)
    y = torch.rand(2, 3, 8, 8, generator=g)
    return model, discs, make_proxy(), x, y


def pick_coordinates(n, params, loss, rng, n_random=8, n_active=24, threshold=1e-5):
    """Random coordinates plus coordinates with a non-negligible gradient."""
    grads = torch.autograd.grad(loss(), params, allow_unused=True)
    g = torch.cat([(torch.zeros_like(p) if gr is None else gr).reshape(-1) for p, gr in zip(params, grads)])
    active = np.flatnonzero(g.abs().numpy() > threshold)
    pick = list(rng.choice(n, size=min(n_random, n), replace=False))
    if active.size:
        pick += list(rng.choice(active, size=min(n_active, active.size), replace=False))
    return sorted(set(int(i) for i in pick))


def _check_loss(name, loss, params, seed, oracle=None):
    params = [p for p in params if p.requires_grad]
    n = sum(p.numel() for p in params)
    idx = pick_coordinates(n, params, loss, np.random.default_rng(seed))
    rep = grad_check(loss, params, eps=1e-5, indices=idx, floor=GRAD_FLOOR, oracle=oracle)
    return Check("gradient", name, rep.max_rel_err, GRAD_TOL, rep.passed(GRAD_TOL),
                 f"{rep.checked} coords, worst index {rep.worst_param_index}: "
                 f"autograd {rep.analytic:.6g} vs finite-diff {rep.numeric:.6g}")


def gradient_suite(seed=0):
    out = []
    w = LossWeights()
    with precision("float64"):
        model, discs, proxy, x, y = _toy_setup(seed)
        mp = list(model.parameters())

        def nll_x():
            *_, z_dp, ld_lr, ld_deg = model.encode_lr(x)
            return per_dim(-model.deg.prior.log_prob(z_dp) - ld_lr - ld_deg, x).mean()

        def nll_y():
            _, _, z_hp, ld_hr, ld_hf = model.encode_hr(y)
            return per_dim(-std_normal_logp(z_hp) - ld_hr - ld_hf, y).mean()

        def latents():
            return model.hr(y).z_c, model.lr(x)

        def content():
            z_c_hr, lat = latents()
            return content_loss(model, z_c_hr, lat.z_c, x, y, proxy, w.alpha)

        def dom_gen():
            z_c_hr, lat = latents()
            return domain_loss_gen(discs.domain, z_c_hr, lat.z_c, lat.z_lr, w)

        frozen = model.lr(x).z_c.detach()

        def dom_gen_frozen():
            # stop-gradient made explicit: the beta2 reference is a constant
            z_c_hr, lat = latents()
            adv = ((1 - discs.domain(z_c_hr)) ** 2).mean() + (discs.domain(lat.z_c) ** 2).mean()
            reg = w.beta1 * ((z_c_hr ** 2).mean() + (lat.z_c ** 2).mean())
            return adv + reg + w.beta2 * ((lat.z_lr - frozen) ** 2).mean()

        def dom_disc():
            with torch.no_grad():
                z_c_hr, lat = latents()
            return domain_loss_disc(discs.domain, z_c_hr, lat.z_c, lat.z_lr, w)

        def backward(side):
            def f():
                z_c_hr, lat = latents()
                terms, _ = backward_terms(model, discs, proxy, lat.z_c, z_c_hr, x, y, w,
                                          torch.Generator().manual_seed(5))
                ds, sr = weighted_backward(terms, w)
                return ds if side == "ds" else sr
            return f

        out.append(_check_loss("nll_x", nll_x, mp, seed))
        out.append(_check_loss("nll_y", nll_y, mp, seed))
        out.append(_check_loss("content", content, mp, seed))
        out.append(_check_loss("domain_gen", dom_gen, mp, seed, oracle=dom_gen_frozen))
        out.append(_check_loss("domain_disc", dom_disc, list(discs.domain.parameters()), seed))
        out.append(_check_loss("backward_ds", backward("ds"), mp, seed))
        out.append(_check_loss("backward_sr", backward("sr"), mp, seed))
        out.append(stop_gradient_check(model, discs, x, y, w))
    return out


def stop_gradient_check(model, discs, x, y, weights):
    """The beta2 term must send no gradient into the content extractor.

    Gradients of the flows' domain loss with and without beta2 must agree exactly
    on the content extractor while differing on the LR INN.
    """
    content, inn = list(model.lr.content.parameters()), list(model.lr.inn.parameters())

    def grads(beta2):
        w = LossWeights(**{**weights.as_dict(), "beta2": beta2})
        lat = model.lr(x)
        loss = domain_loss_gen(discs.domain, model.hr(y).z_c, lat.z_c, lat.z_lr, w)
        return torch.autograd.grad(loss, content + inn)

    on, off = grads(weights.beta2), grads(0.0)
    k = len(content)
    diff_c = max(float((a - b).abs().max()) for a, b in zip(on[:k], off[:k]))
    diff_inn = max(float((a - b).abs().max()) for a, b in zip(on[k:], off[k:]))
    return Check("gradient", "domain_stop_gradient", diff_c, 0.0, diff_c == 0.0 and diff_inn > 0,
                 f"content-extractor gradient change {diff_c:.3g}; LR INN gradient change {diff_inn:.3g}")


SUITES = {
    "invertibility": lambda seed: invertibility_suite(base=seed),
    "logdet": lambda seed: logdet_suite(base=seed),
    "gradient": lambda seed: gradient_suite(seed),
}


def run_all(suites=("invertibility", "logdet", "gradient"), seed=0):
    checks, timings = [], {}
    for s in suites:
        t = time.perf_counter()
        checks += SUITES[s](seed)
        timings[s] = time.perf_counter() - t
    return checks, timings
