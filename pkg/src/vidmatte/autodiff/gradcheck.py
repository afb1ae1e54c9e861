"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import record_kinks


class NonFiniteError(FloatingPointError):
    """A function value or gradient was NaN or infinite."""


def _value(f):
    out = f()
    v = float(np.asarray(out.data).reshape(()))
    if not np.isfinite(v):
        raise NonFiniteError(f"function value is not finite: {v}")
    return v


def _stencil(f, flat, i, eps, kink_aware, refinements):
    orig = flat[i]
    for _ in range(refinements + 1):
        with record_kinks() as up:
            flat[i] = orig + eps
            fp = _value(f)
        with record_kinks() as down:
            flat[i] = orig - eps
            fm = _value(f)
        flat[i] = orig
        if not kink_aware or up == down:
            break
        eps = eps / 10.0
    # a change within rounding of f itself is indistinguishable from none
    if abs(fp - fm) <= 2.0 * np.spacing(max(abs(fp), abs(fm))):
        return 0.0
    return (fp - fm) / (2.0 * eps)


def gradcheck(f, params, eps=1e-3, max_coords=None, rng=None, kink_aware=False, refinements=3):
    """Compare analytic gradients of a scalar function against central differences.

    ``f`` takes no arguments and returns a scalar ``Tensor`` built from
    ``params``. Returns the worst relative error
    ``|a - n| / max(1e-8, |a| + |n|)`` over the probed coordinates; a
    stencil whose two values differ by at most two ulps counts as a zero
    difference. With
    ``max_coords`` set, at most that many coordinates per parameter are drawn
    from ``rng``; otherwise every coordinate is probed.

    With ``kink_aware`` set, a stencil whose two ends fall on different
    pieces of a piecewise op (ReLU side, clip range, bilinear cell) is
    shrunk tenfold, up to ``refinements`` times, so the difference quotient
    is taken where ``f`` is smooth.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.grad.fill(0.0)
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("function value is not finite")
    out.backward()
    rng = np.random.default_rng(0) if rng is None else rng

    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteError(f"analytic gradient of {getattr(p, 'name', p)} is not finite")
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            numeric = _stencil(f, flat, i, eps, kink_aware, refinements)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad.fill(0.0)
    return worst
