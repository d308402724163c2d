"""Tensor conventions and brute-force oracles.

Every image, feature map and latent is a dense ``(B, C, H, W)`` torch tensor.
Gradients come from torch autograd; the functions here are the independent
finite-difference checks that the rest of the package is tested against.
"""
import contextlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateLayerError, NonFiniteError, OracleError, ShapeError

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def set_dtype(name):
    if name not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {name!r}")
    torch.set_default_dtype(_DTYPES[name])


def get_dtype():
    return torch.get_default_dtype()


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the global default dtype."""
    old = torch.get_default_dtype()
    set_dtype(name)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def check_nchw(x, name="tensor"):
    if x.dim() != 4:
        raise ShapeError(f"{name} must be 4-D (B, C, H, W), got shape {tuple(x.shape)}")
    return x


def check_finite(x, name="tensor"):
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return x


def flatten(tensors):
    """Concatenate tensors into one detached 1-D vector."""
    if not tensors:
        return torch.zeros(0)
    return torch.cat([t.detach().reshape(-1) for t in tensors])


def unflatten(vec, shapes):
    out, i = [], 0
    for shape in shapes:
        n = math.prod(shape)
        out.append(vec[i:i + n].reshape(shape))
        i += n
    if i != vec.numel():
        raise ShapeError(f"vector of length {vec.numel()} does not match shapes totalling {i}")
    return out


def _step(x_i, eps):
    return eps * max(1.0, abs(x_i))


def finite_diff_grad(f, x, eps=1e-5, indices=None):
    """Central-difference gradient of scalar ``f`` at the 1-D array ``x``.

    The step for coordinate i is ``eps * max(1, |x_i|)``.  Only ``indices`` are
    evaluated when given; the other entries of the result are NaN.
    """
    x = np.array(x, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be positive")
    idx = range(x.size) if indices is None else indices
    grad = np.full(x.size, np.nan) if indices is not None else np.zeros(x.size)
    for i in idx:
        h = _step(x[i], eps)
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value while perturbing coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad


def _as_output_vector(out):
    if isinstance(out, tuple):
        # (y, logdet) from a flow layer, or a tuple of latents
        if len(out) == 2 and out[1].dim() == 1 and out[0].dim() == 4:
            out = out[0]
        else:
            return torch.cat([o.reshape(-1) for o in out if o.dim() == 4])
    return out.reshape(-1)


def logdet_bruteforce(fn, x, eps=1e-5):
    """log|det J| of ``fn`` at ``x`` with J assembled by central differences.

    ``fn`` is a flow layer (``fn(x) -> (y, logdet)``) or any callable returning a
    tensor or tuple of 4-D tensors.  ``fn`` is evaluated once at ``x`` first so
    that lazily initialised layers are initialised on the unperturbed input.
    """
    if x.shape[0] != 1:
        raise ShapeError("logdet_bruteforce needs batch size 1")
    x = x.detach().to(torch.float64)
    with torch.no_grad():
        base = _as_output_vector(fn(x))
        d = x.numel()
        if base.numel() != d:
            raise ShapeError(f"map is not volume preserving: {d} -> {base.numel()}")
        jac = torch.empty(d, d, dtype=torch.float64)
        flat = x.reshape(-1).clone()
        for i in range(d):
            h = _step(float(flat[i]), eps)
            xp = flat.clone()
            xp[i] += h
            xm = flat.clone()
            xm[i] -= h
            yp = _as_output_vector(fn(xp.reshape(x.shape))).to(torch.float64)
            ym = _as_output_vector(fn(xm.reshape(x.shape))).to(torch.float64)
            jac[:, i] = (yp - ym) / (2 * h)
    if not torch.isfinite(jac).all():
        raise OracleError("non-finite Jacobian entry")
    sign, logabs = torch.linalg.slogdet(jac)
    if sign == 0 or logabs < math.log(1e-300):
        raise DegenerateLayerError("Jacobian is singular (|det| < 1e-300)")
    return float(logabs)


@dataclass
class GradReport:
    max_rel_err: float
    worst_param_index: int
    analytic: float
    numeric: float
    checked: int = 0

    def passed(self, tol=1e-3):
        return self.max_rel_err < tol


def compare_gradients(analytic, numeric, indices=None, floor=1e-8):
    """Worst ``|a - n| / max(|a|, |n|, floor)`` over the compared coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    idx = np.arange(analytic.size) if indices is None else np.asarray(indices)
    ga, gn = analytic[idx], numeric[idx]
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor)
    rel = np.abs(ga - gn) / denom
    k = int(np.argmax(rel)) if rel.size else 0
    if not rel.size:
        return GradReport(0.0, -1, 0.0, 0.0, 0)
    return GradReport(float(rel[k]), int(idx[k]), float(ga[k]), float(gn[k]), int(rel.size))


def grad_check(loss, params, eps=1e-5, grad=None, indices=None, floor=1e-8, oracle=None):
    """Compare analytic gradients of ``loss`` against central differences.

    Two calling conventions:

    * ``params`` is a 1-D numpy array, ``loss(vec) -> float`` and ``grad(vec)``
      gives the hand-coded gradient.
    * ``params`` is a list of torch tensors with ``requires_grad``, ``loss()``
      takes no arguments and the analytic gradient comes from autograd.

    ``indices`` restricts the comparison to a subset of flattened coordinates.
    ``oracle`` (torch convention) is differenced instead of ``loss``; a loss with
    a stop-gradient is checked against the same expression with the stopped
    value frozen.
    """
    if grad is not None:
        x = np.asarray(params, dtype=np.float64)
        ga = np.asarray(grad(x), dtype=np.float64)
        gn = finite_diff_grad(loss, x, eps, indices)
        return compare_gradients(ga, gn, indices, floor)

    params = list(params)
    if any(p.dtype != torch.float64 for p in params):
        raise TypeError("grad_check on torch parameters needs float64 tensors")
    value = loss()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    ga = flatten([torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]).numpy()
    shapes = [p.shape for p in params]
    x0 = flatten(params).numpy().copy()

    def f(vec):
        with torch.no_grad():
            for p, v in zip(params, unflatten(torch.from_numpy(vec), shapes)):
                p.copy_(v)
            return float((oracle or loss)())

    try:
        gn = finite_diff_grad(f, x0, eps, indices)
    finally:
        with torch.no_grad():
            for p, v in zip(params, unflatten(torch.from_numpy(x0), shapes)):
                p.copy_(v)
    return compare_gradients(ga, gn, indices, floor)
