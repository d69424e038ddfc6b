"""Monte Carlo estimators for a Gaussian-smoothed function and its input derivatives.

The smoothed surrogate is u(x) = E f(x + delta), delta ~ N(0, sigma^2 I). All
derivatives are expectations of perturbed evaluations of f, so no input
backpropagation is needed. Every estimator is a fixed linear combination of
the perturbed evaluations; :class:`SmoothedEval` keeps those evaluations and
their weights so a parameter gradient can be pulled back through any
function of the estimates.

For time-dependent problems x and t are perturbed by independent noises. The
spatial stencil keeps the time shift fixed across the antithetic pair:
f(x + dx, t + dt), f(x - dx, t + dt), f(x, t + dt).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ShapeError
from .sampling import NoiseGroup, PerturbationGroup

NEEDS = frozenset({"value", "gradient", "laplacian", "hessian", "time"})


class NoiseContractError(ValueError):
    pass


@dataclass
class SmoothingConfig:
    sigma_x: float = 1e-2
    sigma_t: float = None
    K: int = 1024
    antithetic: bool = True

    def __post_init__(self):
        if self.sigma_t is None:
            self.sigma_t = self.sigma_x
        if not (self.sigma_x > 0 and self.sigma_t > 0):
            raise ValueError("sigma_x and sigma_t must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass
class SmoothedEval:
    """Estimates at n points from one noise group, plus what is needed to backprop."""

    value: np.ndarray = None
    gradient: np.ndarray = None
    laplacian: np.ndarray = None
    hessian: np.ndarray = None
    time_derivative: np.ndarray = None
    samples: dict = field(default_factory=dict, repr=False)
    _fn: object = field(default=None, repr=False)
    _inputs: np.ndarray = field(default=None, repr=False)
    _blocks: list = field(default=None, repr=False)
    _weights: dict = field(default=None, repr=False)
    _tape: list = field(default=None, repr=False)

    def sample_cotangents(self, value=None, gradient=None, laplacian=None, time=None):
        """Map cotangents on the estimates to cotangents on each perturbed evaluation."""
        w = self._weights
        out = {name: 0.0 for name, _ in self._blocks}
        if value is not None:
            out["plus"] = out["plus"] + value[:, None] * w["value"]
        if gradient is not None:
            g = np.einsum("nkd,nd->nk", w["gradient"], gradient)
            out["plus"] = out["plus"] + g
            if "minus" in out and w["antithetic"]:
                out["minus"] = out["minus"] - g
        if laplacian is not None:
            c = laplacian[:, None] * w["laplacian"]
            out["plus"] = out["plus"] + c
            if w["antithetic"]:
                out["minus"] = out["minus"] + c
                center = -2.0 * c
                if w["shared_center"]:
                    center = center.sum(axis=1, keepdims=True)
                out["center"] = out["center"] + center
        if time is not None:
            c = time[:, None] * w["time"]
            out["plus"] = out["plus"] + c
            if w["antithetic"]:
                out["tminus"] = out["tminus"] - c
        parts = []
        for name, shape in self._blocks:
            parts.append(np.broadcast_to(out[name], shape).ravel())
        return np.concatenate(parts)

    def backward(self, value=None, gradient=None, laplacian=None, time=None, per_point=False):
        """Parameter gradient of sum(c * estimate) over points and estimate kinds.

        ``per_point`` returns one gradient row per point ([n x n_params]).
        """
        if not hasattr(self._fn, "backward"):
            raise TypeError("the smoothed function exposes no parameter gradient")
        cot = self.sample_cotangents(value, gradient, laplacian, time)
        if not per_point:
            if self._tape is not None:
                return self._fn.backward(self._inputs, cot, tape=self._tape)
            return self._fn.backward(self._inputs, cot)
        order = self._point_major()
        return self._fn.backward(self._inputs[order], cot[order], segments=self._blocks[0][1][0])

    def _point_major(self):
        idx, pos = [], 0
        for _, (n, m) in self._blocks:
            idx.append(pos + np.arange(n * m).reshape(n, m))
            pos += n * m
        return np.concatenate(idx, axis=1).ravel()


def _as_group(noise, noise_t=None):
    if isinstance(noise, PerturbationGroup):
        return noise
    return PerturbationGroup(noise, noise_t)


def _per_point(samples, n):
    if samples.ndim == 2:
        return np.broadcast_to(samples, (n, *samples.shape))
    if samples.shape[0] != n:
        raise ShapeError(f"per-point noise has {samples.shape[0]} rows for {n} points")
    return samples


def smooth(fn, points, noise, times=None, antithetic=True, need=("value",)):
    """Evaluate the requested estimates at ``points`` with one noise group.

    ``fn`` maps an [N x d_in] input array to N values; for time-dependent
    problems its last input column is t. ``noise`` is a :class:`NoiseGroup`
    (spatial noise only) or a :class:`PerturbationGroup` carrying time noise.
    """
    need = set(need)
    if not need <= NEEDS:
        raise ValueError(f"unknown estimates {need - NEEDS}")
    group = _as_group(noise)
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("points must be [n x d]")
    n, d = x.shape
    if group.x.dim != d:
        raise ShapeError(f"noise dim {group.x.dim} != point dim {d}")
    timed = times is not None
    if "time" in need and not timed:
        raise ValueError("time derivative requested without times")
    if timed and group.t is None:
        raise NoiseContractError("time-dependent points need an independent time noise group")
    if timed and group.t.stream_key is not None and group.t.stream_key == group.x.stream_key:
        raise NoiseContractError("spatial and time noise must come from distinct streams")
    sx = group.x.sigma
    dx = _per_point(group.x.samples, n)
    K = dx.shape[1]
    if timed:
        t = np.asarray(times, dtype=np.float64).reshape(n)
        st = group.t.sigma
        dt = _per_point(group.t.samples, n).reshape(n, K)
        tp = t[:, None] + dt
    second = bool(need & {"laplacian", "hessian"})
    use_minus = antithetic and (second or "gradient" in need)
    use_center = antithetic and second
    use_tminus = antithetic and "time" in need
    shared_center = use_center and not timed

    def block(xs, ts):
        if timed:
            ts = np.broadcast_to(ts, xs.shape[:-1])
            return np.concatenate([xs, ts[..., None]], axis=-1).reshape(-1, d + 1)
        return xs.reshape(-1, d)

    xp = x[:, None, :] + dx
    blocks = [("plus", (n, K))]
    inputs = [block(xp, tp if timed else None)]
    if use_minus:
        blocks.append(("minus", (n, K)))
        inputs.append(block(x[:, None, :] - dx, tp if timed else None))
    if use_center:
        if shared_center:
            blocks.append(("center", (n, 1)))
            inputs.append(x)
        else:
            blocks.append(("center", (n, K)))
            inputs.append(block(np.broadcast_to(x[:, None, :], (n, K, d)), tp))
    if use_tminus:
        blocks.append(("tminus", (n, K)))
        inputs.append(block(xp, t[:, None] - dt))
    stacked = np.concatenate(inputs) if len(inputs) > 1 else inputs[0]
    tape = None
    if hasattr(fn, "forward_taped"):
        values, tape = fn.forward_taped(stacked)
    else:
        values = fn(stacked)
    f = {}
    pos = 0
    for name, shape in blocks:
        size = int(np.prod(shape))
        f[name] = values[pos:pos + size].reshape(shape)
        pos += size

    sq = np.einsum("nkd,nkd->nk", dx, dx)
    weights = {"antithetic": antithetic, "shared_center": shared_center}
    out = SmoothedEval(samples=f, _fn=fn, _inputs=stacked, _blocks=blocks, _weights=weights, _tape=tape)
    weights["value"] = np.full((1, K), 1.0 / K)
    if "value" in need:
        out.value = f["plus"].mean(axis=1)
    if antithetic:
        weights["gradient"] = dx / (2.0 * sx**2 * K)
        second_w = (sq - sx**2 * d) / (2.0 * sx**4 * K)
        if second:
            diff2 = f["plus"] + f["minus"] - 2.0 * f["center"]
        if "gradient" in need:
            out.gradient = np.einsum("nkd,nk->nd", weights["gradient"], f["plus"] - f["minus"])
        if use_tminus:
            weights["time"] = dt / (2.0 * st**2 * K)
            out.time_derivative = np.sum(weights["time"] * (f["plus"] - f["tminus"]), axis=1)
    else:
        weights["gradient"] = dx / (sx**2 * K)
        second_w = (sq - sx**2 * d) / (sx**4 * K)
        diff2 = f["plus"]
        if "gradient" in need:
            out.gradient = np.einsum("nkd,nk->nd", weights["gradient"], f["plus"])
        if "time" in need:
            weights["time"] = dt / (st**2 * K)
            out.time_derivative = np.sum(weights["time"] * f["plus"], axis=1)
    weights["laplacian"] = second_w
    if "laplacian" in need:
        out.laplacian = np.sum(second_w * diff2, axis=1)
    if "hessian" in need:
        scale = 2.0 * sx**4 * K if antithetic else sx**4 * K
        outer = np.einsum("nki,nkj,nk->nij", dx, dx, diff2)
        out.hessian = (outer - sx**2 * np.eye(d) * diff2.sum(axis=1)[:, None, None]) / scale
        out.hessian = 0.5 * (out.hessian + out.hessian.transpose(0, 2, 1))
    return out


def estimate_value(fn, points, noise, times=None):
    """u_hat(x) = (1/K) sum_i f(x + delta_i)."""
    return smooth(fn, points, noise, times, need=("value",)).value


def estimate_gradient(fn, points, noise, times=None, antithetic=True):
    return smooth(fn, points, noise, times, antithetic, need=("gradient",)).gradient


def estimate_laplacian(fn, points, noise, times=None, antithetic=True):
    return smooth(fn, points, noise, times, antithetic, need=("laplacian",)).laplacian


def estimate_hessian(fn, points, noise, times=None, antithetic=True):
    """Hessian estimate with the (delta delta^T - sigma^2 I) weight; symmetric per point."""
    return smooth(fn, points, noise, times, antithetic, need=("hessian",)).hessian


def estimate_time_derivative(fn, points, times, noise_x, noise_t, antithetic=True):
    """d/dt of the smoothed function; spatial noise shifts both time-stencil points equally."""
    if noise_t is noise_x or (noise_t.stream_key is not None and noise_t.stream_key == noise_x.stream_key):
        raise NoiseContractError("time and spatial noise share a stream")
    group = PerturbationGroup(noise_x, noise_t)
    return smooth(fn, points, group, times, antithetic, need=("time",)).time_derivative


def estimate_laplacian_coupled(fn, points, times, noise_x, noise_t):
    """Spatial Laplacian with the time shift flipped together with the spatial one.

    Stencil f(x + dx, t + dt) + f(x - dx, t - dt) - 2 f(x, t). Unbiased but noisier
    than :func:`estimate_laplacian`; kept for variance comparisons.
    """
    x = np.asarray(points, dtype=np.float64)
    n, d = x.shape
    dx = _per_point(noise_x.samples, n)
    K = dx.shape[1]
    dt = _per_point(noise_t.samples, n).reshape(n, K)
    t = np.asarray(times, dtype=np.float64).reshape(n)
    sx = noise_x.sigma

    def ev(xs, ts):
        return fn(np.concatenate([xs, ts[..., None]], axis=-1).reshape(-1, d + 1)).reshape(xs.shape[:-1])

    fp = ev(x[:, None, :] + dx, t[:, None] + dt)
    fm = ev(x[:, None, :] - dx, t[:, None] - dt)
    f0 = fn(np.column_stack([x, t]))
    sq = np.einsum("nkd,nkd->nk", dx, dx)
    w = (sq - sx**2 * d) / (2.0 * sx**4)
    return np.mean(w * (fp + fm - 2.0 * f0[:, None]), axis=1)


__all__ = [
    "NoiseGroup",
    "PerturbationGroup",
    "SmoothingConfig",
    "SmoothedEval",
    "NoiseContractError",
    "smooth",
    "estimate_value",
    "estimate_gradient",
    "estimate_laplacian",
    "estimate_hessian",
    "estimate_time_derivative",
    "estimate_laplacian_coupled",
]
