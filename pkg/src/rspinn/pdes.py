"""PDE problems: exact solutions, forcing terms, samplers and hard constraints.

Each problem supplies a *residual factor*: the residual evaluated from one or
more groups of smoothed estimates. With a single group every term shares the
same noise; with ``order`` groups each factor of the nonlinear term gets its
own, which is what makes the product an unbiased estimate of the residual.
The factor also returns its partial derivatives with respect to every
estimate, so the loss builders can pull back parameter gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import sampling
from .sampling import ConfigError, RngStream

NON_POLYNOMIAL = "non-polynomial"


class UnsupportedModeError(ValueError):
    pass


class NumericalDegeneracyError(FloatingPointError):
    pass


# ---------------------------------------------------------------- exact solutions


def exact_fp_isotropic(x, t, d=None):
    """||x - t||^2 + d t, broadcast over rows of x."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1] if d is None else d
    t = np.asarray(t, dtype=np.float64)
    return np.sum((x - t[..., None]) ** 2, axis=-1) + d * t


def exact_fp_anisotropic(x, t, mu, d=None):
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1] if d is None else d
    t = np.asarray(t, dtype=np.float64)
    return np.sum((x - t[..., None] * np.asarray(mu)) ** 2, axis=-1) + d * t


def exact_hjb_quadratic(x, t, d=None, T=1.0):
    """||x||^2 / (1 + 4(T - t)) + (d/2) log(1 + 4(T - t))."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1] if d is None else d
    a = 1.0 + 4.0 * (T - np.asarray(t, dtype=np.float64))
    return np.sum(x * x, axis=-1) / a + 0.5 * d * np.log(a)


@dataclass
class RosenbrockCost:
    """sum_i c1_i (x_{2i-1} - x_{2i})^2 + c2_i x_{2i}^2 over coordinate pairs."""

    c1: np.ndarray
    c2: np.ndarray

    @classmethod
    def draw(cls, rng, d):
        if d % 2:
            raise ConfigError("the Rosenbrock cost needs an even dimension")
        u = rng.uniform((2, d // 2))
        return cls(u[0], u[1])

    def __call__(self, x):
        odd, even = x[..., 0::2], x[..., 1::2]
        return np.sum(self.c1 * (odd - even) ** 2 + self.c2 * even**2, axis=-1)


def squared_norm(x):
    return np.sum(np.asarray(x) ** 2, axis=-1)


def reference_hjb_mc(x, t, cost, n_mc=100_000, rng=None, chunk=10_000, return_stderr=False):
    """-log E_y exp(-cost(x - sqrt(2(1 - t)) y)), y ~ N(0, I), by Monte Carlo.

    Uses log-sum-exp over all n_mc samples. ``x`` is [n x d], ``t`` is [n].
    With ``return_stderr`` also returns a delta-method standard error.
    """
    if n_mc < 1:
        raise ConfigError("n_mc must be >= 1")
    rng = RngStream(0, (-7, 0, 0)) if rng is None else rng
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    scale = np.sqrt(np.maximum(2.0 * (1.0 - t), 0.0))
    out = np.empty(n)
    err = np.empty(n)
    for i in range(n):
        logs = []
        for j, s in enumerate(range(0, n_mc, chunk)):
            m = min(chunk, n_mc - s)
            y = rng.child(point=i, group=j).normal((m, d))
            logs.append(-cost(x[i] - scale[i] * y))
        e = np.concatenate(logs)
        top = np.max(e)
        if not np.isfinite(top):
            raise NumericalDegeneracyError(f"all exponents degenerate at point {i}: max exponent {top}")
        lse = logsumexp(e) - math.log(n_mc)
        out[i] = -lse
        if return_stderr:
            w = np.exp(e - top)
            err[i] = np.std(w, ddof=1) / math.sqrt(n_mc) / np.mean(w) if n_mc > 1 else np.inf
    return (out, err) if return_stderr else out


def reference_hjb_rosenbrock(x, t, cost, n_mc=100_000, rng=None):
    return reference_hjb_mc(x, t, cost, n_mc, rng)


def exact_burgers(x, t, d=None, nu=0.5):
    """1 / (1 + exp((sum x - d t / 2) / (2 nu)))."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1] if d is None else d
    s = np.sum(x, axis=-1) - 0.5 * d * np.asarray(t, dtype=np.float64)
    return expit(-s / (2.0 * nu))


@dataclass
class AnisotropicSolution:
    """(1 - ||x||^2) sum_i c_i sin(x_i + cos(x_{i+1}) + x_{i+1} cos(x_i)) with closed-form derivatives."""

    coeffs: np.ndarray

    @classmethod
    def draw(cls, rng, d):
        return cls(rng.normal((d - 1,)))

    def _parts(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        a, b = x[:, :-1], x[:, 1:]
        arg = a + np.cos(b) + b * np.cos(a)
        da = 1.0 - b * np.sin(a)
        db = np.cos(a) - np.sin(b)
        daa = -b * np.cos(a)
        dbb = -np.cos(b)
        return x, arg, da, db, daa, dbb

    def value(self, x):
        x, arg, *_ = self._parts(x)
        return (1.0 - np.sum(x * x, axis=1)) * (np.sin(arg) @ self.coeffs)

    def derivatives(self, x):
        """Value, gradient [n x d] and Laplacian at rows of ``x``."""
        x, arg, da, db, daa, dbb = self._parts(x)
        c = self.coeffs
        s, co = np.sin(arg), np.cos(arg)
        S = s @ c
        grad_s = np.zeros_like(x)
        grad_s[:, :-1] += c * co * da
        grad_s[:, 1:] += c * co * db
        lap_s = np.sum(c * (-s * (da**2 + db**2) + co * (daa + dbb)), axis=1)
        p = 1.0 - np.sum(x * x, axis=1)
        value = p * S
        grad = -2.0 * x * S[:, None] + p[:, None] * grad_s
        lap = -2.0 * x.shape[1] * S - 4.0 * np.sum(x * grad_s, axis=1) + p * lap_s
        return value, grad, lap


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentationSpec:
    """Hard constraint f = scale(x, t) * net + shift(x, t).

    ``form`` is ``"time_factor"`` (scale = t, or T - t when ``terminal``) or
    ``"ball_factor"`` (scale = 1 - ||x||^2, no shift).
    """

    form: str
    base: object = None
    terminal: bool = False
    T: float = 1.0

    def __post_init__(self):
        if self.form not in ("time_factor", "ball_factor"):
            raise ConfigError(f"unknown augmentation form {self.form!r}")

    def scale(self, x, t):
        if self.form == "ball_factor":
            return 1.0 - np.sum(x * x, axis=-1)
        return (self.T - t) if self.terminal else t

    def shift(self, x, t):
        if self.base is None:
            return np.zeros(x.shape[:-1])
        return self.base(x)


def apply_augmentation(spec, network_value, x, t=None):
    x = np.asarray(x, dtype=np.float64)
    return spec.scale(x, t) * network_value + spec.shift(x, t)


class AugmentedModel:
    """The function that gets smoothed: network output passed through the hard constraint."""

    def __init__(self, model, augmentation=None, time_dependent=False):
        self.model = model
        self.augmentation = augmentation
        self.time_dependent = time_dependent

    def _split(self, inputs):
        if self.time_dependent:
            return inputs[:, :-1], inputs[:, -1]
        return inputs, None

    def __call__(self, inputs):
        raw = self.model(inputs)
        if self.augmentation is None:
            return raw
        x, t = self._split(inputs)
        return apply_augmentation(self.augmentation, raw, x, t)

    def forward_taped(self, inputs):
        raw, tape = self.model.forward_taped(inputs)
        if self.augmentation is None:
            return raw, tape
        x, t = self._split(inputs)
        return apply_augmentation(self.augmentation, raw, x, t), tape

    def backward(self, inputs, cotangents, segments=None, tape=None):
        if self.augmentation is not None:
            x, t = self._split(inputs)
            cotangents = cotangents * self.augmentation.scale(x, t)
        return self.model.backward(inputs, cotangents, segments, tape)


# ---------------------------------------------------------------- problems


def _acc(parts, i, key, val):
    parts[i][key] = parts[i].get(key, 0.0) + val


@dataclass
class PdeProblem:
    """Base problem. Subclasses define the residual factor and exact solution."""

    dim: int
    name: str = ""
    kind: str = ""
    time_dependent: bool = False
    order: object = 1
    needs: tuple = ()
    augmentation: AugmentationSpec = None
    params: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.dim + (1 if self.time_dependent else 0)

    @property
    def unbiased2_groups(self):
        if self.order == NON_POLYNOMIAL:
            return None
        if self.order == 1:
            return None
        return 2 * self.order

    def groups_for(self, mode):
        mode = normalize_mode(mode)
        if mode == "biased":
            return 1
        if mode == "unbiased1":
            return 2
        n = self.unbiased2_groups
        if n is None:
            if self.order == NON_POLYNOMIAL:
                raise UnsupportedModeError(
                    f"unsupported nonlinearity: the unbiased2 loss does not exist for {self.name} "
                    f"because of its non-polynomial sin(u) term; use biased or unbiased1"
                )
            raise UnsupportedModeError(
                f"{self.name} is linear, so unbiased1 is already fully unbiased; unbiased2 is not defined"
            )
        return n

    def surrogate(self, model):
        return AugmentedModel(model, self.augmentation, self.time_dependent)

    def sample(self, rng, n):
        raise NotImplementedError

    def exact(self, x, t=None):
        raise NotImplementedError

    def forcing(self, x, t=None):
        return np.zeros(np.shape(x)[0])

    def residual_factor(self, evs, x, t=None):
        """Residual from ``evs`` (1 group, or ``order`` groups) and its partials per group."""
        raise NotImplementedError

    def describe(self):
        out = {"name": self.name, "dim": self.dim}
        for k, v in self.params.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


class FokkerPlanck(PdeProblem):
    """u_t = 0.5 Lap u - sum_i mu_i du/dx_i with u(x, 0) = ||x||^2."""

    def __init__(self, dim, mu=None):
        iso = mu is None
        super().__init__(
            dim,
            name="fp_isotropic" if iso else "fp_anisotropic",
            kind="FpIso" if iso else "FpAniso",
            time_dependent=True,
            order=1,
            needs=("gradient", "laplacian", "time"),
            augmentation=AugmentationSpec("time_factor", base=squared_norm),
            params={} if iso else {"mu": np.asarray(mu, dtype=np.float64)},
        )
        self.mu = np.ones(dim) if iso else np.asarray(mu, dtype=np.float64)
        if self.mu.shape != (dim,):
            raise ConfigError(f"mu must have {dim} entries")
        self.isotropic = iso

    def sample(self, rng, n):
        if self.isotropic:
            return sampling.sample_fp_isotropic(rng, n, self.dim)
        return sampling.sample_fp_anisotropic(rng, n, self.dim, self.mu)

    def exact(self, x, t=None):
        return exact_fp_anisotropic(x, t, self.mu)

    def residual_factor(self, evs, x, t=None):
        (e,) = evs
        r = e.time_derivative - 0.5 * e.laplacian + e.gradient @ self.mu
        n = len(r)
        return r, [{"time": np.ones(n), "laplacian": np.full(n, -0.5), "gradient": np.broadcast_to(self.mu, (n, self.dim))}]


class Hjb(PdeProblem):
    """u_t + Lap u - ||grad u||^2 = 0 on [0, T], terminal data u(x, T) = cost(x)."""

    def __init__(self, dim, cost="quadratic", T=1.0, cost_params=None, n_mc=100_000):
        if cost == "quadratic":
            fn = squared_norm
            params = {"cost": "quadratic", "T": T}
        elif cost == "rosenbrock":
            if cost_params is None:
                raise ConfigError("rosenbrock cost needs c1/c2 coefficients")
            fn = cost_params if isinstance(cost_params, RosenbrockCost) else RosenbrockCost(*cost_params)
            params = {"cost": "rosenbrock", "T": T, "c1": fn.c1, "c2": fn.c2, "n_mc": n_mc}
            if T != 1.0:
                raise ConfigError("the Monte Carlo reference assumes T = 1")
        else:
            raise ConfigError(f"unknown HJB cost {cost!r}")
        super().__init__(
            dim,
            name=f"hjb_{cost}",
            kind="HjbQuadratic" if cost == "quadratic" else "HjbRosenbrock",
            time_dependent=True,
            order=2,
            needs=("gradient", "laplacian", "time"),
            augmentation=AugmentationSpec("time_factor", base=fn, terminal=True, T=T),
            params=params,
        )
        self.cost = fn
        self.T = T
        self.n_mc = n_mc

    def sample(self, rng, n):
        return sampling.sample_hjb(rng, n, self.dim, self.T)

    def exact(self, x, t=None):
        if self.params["cost"] == "quadratic":
            return exact_hjb_quadratic(x, t, T=self.T)
        return reference_hjb_mc(x, t, self.cost, self.n_mc)

    def residual_factor(self, evs, x, t=None):
        a, b = (evs[0], evs[0]) if len(evs) == 1 else evs
        r = a.time_derivative + a.laplacian - np.sum(a.gradient * b.gradient, axis=1)
        n = len(r)
        parts = [{} for _ in evs]
        _acc(parts, 0, "time", np.ones(n))
        _acc(parts, 0, "laplacian", np.ones(n))
        _acc(parts, 0, "gradient", -b.gradient)
        _acc(parts, len(evs) - 1, "gradient", -a.gradient)
        return r, parts


class Burgers(PdeProblem):
    """u_t + u sum_i du/dx_i - nu Lap u = 0 with the logistic initial profile."""

    def __init__(self, dim, nu=0.5):
        super().__init__(
            dim,
            name="burgers",
            kind="Burgers",
            time_dependent=True,
            order=2,
            needs=("value", "gradient", "laplacian", "time"),
            augmentation=AugmentationSpec("time_factor", base=lambda x: exact_burgers(x, 0.0, nu=nu)),
            params={"nu": nu},
        )
        self.nu = nu

    def sample(self, rng, n):
        return sampling.sample_fp_isotropic(rng, n, self.dim)

    def exact(self, x, t=None):
        return exact_burgers(x, t, nu=self.nu)

    def residual_factor(self, evs, x, t=None):
        a, b = (evs[0], evs[0]) if len(evs) == 1 else evs
        gsum = b.gradient.sum(axis=1)
        r = a.time_derivative + a.value * gsum - self.nu * a.laplacian
        n = len(r)
        parts = [{} for _ in evs]
        _acc(parts, 0, "time", np.ones(n))
        _acc(parts, 0, "laplacian", np.full(n, -self.nu))
        _acc(parts, 0, "value", gsum)
        _acc(parts, len(evs) - 1, "gradient", np.repeat(a.value[:, None], self.dim, axis=1))
        return r, parts


class _BallProblem(PdeProblem):
    def __init__(self, dim, solution, **kw):
        super().__init__(
            dim,
            time_dependent=False,
            augmentation=AugmentationSpec("ball_factor"),
            params={"coeffs": solution.coeffs},
            **kw,
        )
        self.solution = solution

    def sample(self, rng, n):
        return sampling.sample_unit_ball(rng, n, self.dim)

    def exact(self, x, t=None):
        return self.solution.value(x)

    def forcing(self, x, t=None):
        u, _, lap = self.solution.derivatives(x)
        return self.apply_operator(u, lap)


class AllenCahn(_BallProblem):
    """Lap u + u - u^3 = g in the unit ball, u = 0 on the sphere."""

    def __init__(self, dim, solution):
        super().__init__(dim, solution, name="allen_cahn", kind="AllenCahn", order=3, needs=("value", "laplacian"))

    @staticmethod
    def apply_operator(u, lap):
        return lap + u - u**3

    def residual_factor(self, evs, x, t=None):
        g = self.forcing(x)
        if len(evs) == 1:
            (a,) = evs
            u = a.value
            r = a.laplacian + u - u**3 - g
            return r, [{"laplacian": np.ones_like(r), "value": 1.0 - 3.0 * u**2}]
        a, b, c = evs
        r = a.laplacian + a.value - a.value * b.value * c.value - g
        parts = [
            {"laplacian": np.ones_like(r), "value": 1.0 - b.value * c.value},
            {"value": -a.value * c.value},
            {"value": -a.value * b.value},
        ]
        return r, parts


class SineGordon(_BallProblem):
    """Lap u + sin(u) = g in the unit ball, u = 0 on the sphere."""

    def __init__(self, dim, solution):
        super().__init__(
            dim, solution, name="sine_gordon", kind="SineGordon", order=NON_POLYNOMIAL, needs=("value", "laplacian")
        )

    @staticmethod
    def apply_operator(u, lap):
        return lap + np.sin(u)

    def residual_factor(self, evs, x, t=None):
        if len(evs) != 1:
            raise UnsupportedModeError("unsupported nonlinearity: sin(u) admits no multi-group factor")
        (a,) = evs
        r = a.laplacian + np.sin(a.value) - self.forcing(x)
        return r, [{"laplacian": np.ones_like(r), "value": np.cos(a.value)}]


MODES = ("biased", "unbiased1", "unbiased2")
_ALIASES = {"unbiased": "unbiased1", "b": "biased", "u1": "unbiased1", "u2": "unbiased2"}


def normalize_mode(mode):
    m = str(mode).strip().lower()
    m = _ALIASES.get(m, m)
    if m not in MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; choose from {', '.join(MODES)}")
    return m


PROBLEMS = ("fp_isotropic", "fp_anisotropic", "hjb_quadratic", "hjb_rosenbrock", "burgers", "allen_cahn", "sine_gordon")


def make_problem(name, dim, seed=2024, **kw):
    """Build a registered problem; random coefficients come from a dedicated ``seed``."""
    rng = RngStream(seed, (-5, 0, 0))
    if name == "fp_isotropic":
        return FokkerPlanck(dim)
    if name == "fp_anisotropic":
        mu = kw.get("mu")
        return FokkerPlanck(dim, sampling.draw_mu(rng, dim) if mu is None else mu)
    if name == "hjb_quadratic":
        return Hjb(dim, "quadratic", T=kw.get("T", 1.0))
    if name == "hjb_rosenbrock":
        cost = kw.get("cost_params") or RosenbrockCost.draw(rng, dim)
        return Hjb(dim, "rosenbrock", cost_params=cost, n_mc=kw.get("n_mc", 100_000))
    if name == "burgers":
        return Burgers(dim, kw.get("nu", 0.5))
    if name in ("allen_cahn", "sine_gordon"):
        coeffs = kw.get("coeffs")
        sol = AnisotropicSolution(np.asarray(coeffs)) if coeffs is not None else AnisotropicSolution.draw(rng, dim)
        return (AllenCahn if name == "allen_cahn" else SineGordon)(dim, sol)
    raise ConfigError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}")
