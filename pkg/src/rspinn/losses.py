"""Biased and debiased PINN losses built from smoothed estimates.

biased     one noise group; the square of a Monte Carlo residual.
unbiased1  two groups; product of two independent residual estimates, which
           removes the bias of squaring a noisy quantity.
unbiased2  2 * order groups; inside each residual factor the nonlinear term
           is a product of independently estimated pieces as well.

Every builder returns the loss and its exact parameter gradient for the
given noise (the noise is frozen, so the gradient equals the derivative of
the returned loss).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MlpModel, ParamGradient
from .pdes import AugmentedModel, UnsupportedModeError, normalize_mode
from .sampling import ConfigError
from .smoothing import smooth


class GroupCountError(ValueError):
    pass


@dataclass
class LossValue:
    loss: float
    param_grad: ParamGradient = None
    diagnostics: dict = field(default_factory=dict)
    per_point_loss: np.ndarray = field(default=None, repr=False)
    per_point_grad: np.ndarray = field(default=None, repr=False)

    def __add__(self, other):
        diag = {**self.diagnostics, **other.diagnostics}
        return LossValue(self.loss + other.loss, self.param_grad + other.param_grad, diag)

    def scaled(self, c):
        return LossValue(c * self.loss, self.param_grad * c, dict(self.diagnostics))


def _as_function(model, problem=None):
    if isinstance(model, MlpModel) and problem is not None:
        return problem.surrogate(model)
    return model


def _layer_dims(fn):
    inner = fn.model if isinstance(fn, AugmentedModel) else fn
    return inner.layer_dims


def _assemble(fn, evs, cots, n, loss_pts, per_point):
    """Pull the per-estimate cotangents back to a parameter gradient."""
    if per_point and hasattr(fn, "backward"):
        grads = 0.0
        for ev, cot in zip(evs, cots):
            if cot:
                grads = grads + ev.backward(per_point=True, **cot)
        return LossValue(float(np.mean(loss_pts)), per_point_loss=loss_pts, per_point_grad=np.asarray(grads))
    if not hasattr(fn, "backward"):
        return LossValue(float(np.mean(loss_pts)), None, per_point_loss=loss_pts)
    total = ParamGradient.zeros(_layer_dims(fn))
    for ev, cot in zip(evs, cots):
        if cot:
            total = total + ev.backward(**cot)
    return LossValue(float(np.mean(loss_pts)), total, per_point_loss=loss_pts)


def _scaled_parts(parts, w):
    return [{k: v * (w if np.ndim(v) == 1 else w[:, None]) for k, v in p.items()} for p in parts]


def _merge(into, parts, offset):
    for i, p in enumerate(parts):
        for k, v in p.items():
            into[offset + i][k] = into[offset + i].get(k, 0.0) + v


def _product_loss(fn, factor, evs, n_factor, per_point, scale):
    """Square (one group) or product of two independent factors, with gradients.

    ``scale`` multiplies the per-point weights; the batch mean is applied by
    the caller through ``scale`` as well.
    """
    cots = [dict() for _ in evs]
    if len(evs) == 1:
        r, parts = factor(evs)
        loss_pts = r * r
        _merge(cots, _scaled_parts(parts, 2.0 * r * scale), 0)
        diag = {"residual_mean": float(np.mean(r)), "residual_var": float(np.var(r))}
    else:
        ra, pa = factor(evs[:n_factor])
        rb, pb = factor(evs[n_factor:])
        loss_pts = ra * rb
        _merge(cots, _scaled_parts(pa, rb * scale), 0)
        _merge(cots, _scaled_parts(pb, ra * scale), n_factor)
        diag = {"residual_mean": float(np.mean(0.5 * (ra + rb))), "residual_var": float(np.var(ra))}
    out = _assemble(fn, evs, cots, len(loss_pts), loss_pts, per_point)
    out.diagnostics.update(diag)
    out.diagnostics["loss_point_var"] = float(np.var(loss_pts))
    return out


def _check_groups(groups, expected, mode):
    if len(groups) != expected:
        raise GroupCountError(f"mode {mode} needs {expected} independent noise groups, got {len(groups)}")
    keys = [getattr(getattr(g, "x", g), "stream_key", None) for g in groups]
    keys = [k for k in keys if k is not None]
    if len(set(keys)) != len(keys):
        raise GroupCountError("noise groups must come from distinct streams")


def boundary_loss(model, points, targets, mode, noise_groups, times=None, per_point=False):
    """Mean over points of (u_hat - g)^2 (biased) or (u_hat' - g)(u_hat - g) (unbiased1)."""
    mode = normalize_mode(mode)
    if mode == "unbiased2":
        raise UnsupportedModeError("boundary data enter linearly; use biased or unbiased1")
    expected = 1 if mode == "biased" else 2
    _check_groups(noise_groups, expected, mode)
    fn = model
    targets = np.asarray(targets, dtype=np.float64)
    evs = [smooth(fn, points, g, times, need=("value",)) for g in noise_groups]
    n = len(targets)

    def factor(es):
        (e,) = es
        return e.value - targets, [{"value": np.ones(n)}]

    scale = np.ones(n) if per_point else np.full(n, 1.0 / n)
    return _product_loss(fn, factor, evs, 1, per_point, scale)


def residual_loss(model, batch, problem, mode, noise_groups, antithetic=True, per_point=False):
    """Residual loss of ``problem`` at ``batch`` for the given mode and noise groups."""
    mode = normalize_mode(mode)
    expected = problem.groups_for(mode)
    _check_groups(noise_groups, expected, mode)
    fn = _as_function(model, problem)
    evs = [smooth(fn, batch.spatial, g, batch.time, antithetic, need=problem.needs) for g in noise_groups]
    n = len(batch)
    n_factor = 1 if mode != "unbiased2" else expected // 2

    def factor(es):
        return problem.residual_factor(es, batch.spatial, batch.time)

    scale = np.ones(n) if per_point else np.full(n, 1.0 / n)
    out = _product_loss(fn, factor, evs, n_factor, per_point, scale)
    out.diagnostics["mode"] = mode
    out.diagnostics["groups"] = expected
    return out


def _require(problem, kinds, what):
    if problem.kind not in kinds:
        raise ConfigError(f"{what} expects a {'/'.join(kinds)} problem, got {problem.kind}")


def residual_loss_linear(model, batch, pde, mode, noise_groups, **kw):
    _require(pde, ("FpIso", "FpAniso"), "residual_loss_linear")
    return residual_loss(model, batch, pde, mode, noise_groups, **kw)


def residual_loss_hjb(model, batch, pde, mode, noise_groups, **kw):
    _require(pde, ("HjbQuadratic", "HjbRosenbrock"), "residual_loss_hjb")
    return residual_loss(model, batch, pde, mode, noise_groups, **kw)


def residual_loss_burgers(model, batch, pde, mode, noise_groups, **kw):
    _require(pde, ("Burgers",), "residual_loss_burgers")
    return residual_loss(model, batch, pde, mode, noise_groups, **kw)


def residual_loss_allen_cahn(model, batch, pde, mode, noise_groups, **kw):
    _require(pde, ("AllenCahn",), "residual_loss_allen_cahn")
    return residual_loss(model, batch, pde, mode, noise_groups, **kw)


def residual_loss_sine_gordon(model, batch, pde, mode, noise_groups, **kw):
    _require(pde, ("SineGordon",), "residual_loss_sine_gordon")
    return residual_loss(model, batch, pde, mode, noise_groups, **kw)


def total_loss(model, problem, mode, residual_batch, residual_groups, boundary=None, lambda_r=1.0, lambda_b=None):
    """lambda_b * L_b + lambda_r * L_r.

    ``boundary`` is ``(points, targets, times, groups)`` or None. Problems with a
    hard-constraint augmentation default to lambda_b = 0 and need no boundary term.
    """
    if lambda_b is None:
        lambda_b = 0.0 if problem.augmentation is not None else 1.0
    if lambda_r < 0 or lambda_b < 0:
        raise ConfigError("loss weights must be non-negative")
    fn = _as_function(model, problem)
    res = residual_loss(fn, residual_batch, problem, mode, residual_groups)
    out = res.scaled(lambda_r)
    out.diagnostics["residual_loss"] = res.loss
    if lambda_b > 0:
        if boundary is None:
            raise ConfigError("lambda_b > 0 needs boundary points")
        points, targets, times, groups = boundary
        b = boundary_loss(fn, points, targets, "unbiased1" if normalize_mode(mode) != "biased" else "biased",
                          groups, times)
        out = out + b.scaled(lambda_b)
        out.diagnostics["boundary_loss"] = b.loss
    return out
