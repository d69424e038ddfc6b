"""Statistical and numerical checks behind the verification commands.

Each check returns plain result objects; the CLI and the acceptance tests
decide how to print them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import losses
from .nn import MlpModel
from .pdes import MODES, PROBLEMS, AugmentedModel, UnsupportedModeError, make_problem, normalize_mode
from .sampling import CollocationBatch, RngStream, draw_noise_groups, draw_perturbation_groups
from .smoothing import estimate_laplacian_coupled, smooth

_CHUNK = 100_000


def _problem(name, dim):
    """Registered problem with a cheap reference; the Rosenbrock cost gets an even dimension."""
    if name == "hjb_rosenbrock" and dim % 2:
        dim += 1
    return make_problem(name, dim, n_mc=1000)


class FrozenNoiseError(RuntimeError):
    """The loss changed between two evaluations at identical parameters."""


@dataclass
class Check:
    name: str
    estimate: float
    target: float
    stderr: float = 0.0
    n_se: float = 4.0
    passed: bool = None
    detail: str = ""

    def __post_init__(self):
        if self.passed is None:
            self.passed = bool(abs(self.estimate - self.target) <= self.n_se * self.stderr)

    @property
    def bias(self):
        return self.estimate - self.target

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        s = f"{tag}  {self.name}: estimate={self.estimate:.6g} target={self.target:.6g} bias={self.bias:.3g}"
        if self.stderr:
            s += f" se={self.stderr:.3g} ({self.n_se:g} se band)"
        return s + (f"  {self.detail}" if self.detail else "")


def mean_se(samples):
    samples = np.asarray(samples, dtype=np.float64)
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(samples.shape[0]))


def _sq_norm(z):
    return np.sum(z * z, axis=1)


# ------------------------------------------------------------ estimators


def estimator_checks(n_draws=100_000, sigma=0.1, seed=0):
    """Oracle suite for the smoothing estimators on ‖x‖² and an affine map in d = 2.

    Each draw uses a single perturbation (K = 1), so the spread across draws
    gives the standard error of the estimator mean.
    """
    rng = RngStream(seed, (-10, 0, 0))
    x = np.tile([1.0, 0.0], (n_draws, 1))
    (noise,) = draw_noise_groups(rng, 1, 1, 2, sigma, n_points=n_draws)
    ev = smooth(_sq_norm, x, noise, need=("value", "gradient", "laplacian", "hessian"))
    checks = []
    for i, target in enumerate((2.0, 0.0)):
        m, se = mean_se(ev.gradient[:, i])
        checks.append(Check(f"gradient[{i}] of |x|^2 at (1,0)", m, target, se))
    m, se = mean_se(ev.laplacian)
    checks.append(Check("laplacian of |x|^2", m, 4.0, se))
    for i in range(2):
        m, se = mean_se(ev.hessian[:, i, i])
        checks.append(Check(f"hessian[{i},{i}] of |x|^2", m, 2.0, se))
    m, se = mean_se(ev.hessian[:, 0, 1])
    checks.append(Check("hessian[0,1] of |x|^2", m, 0.0, se))
    x0 = np.zeros((n_draws, 2))
    m, se = mean_se(smooth(_sq_norm, x0, noise, need=("value",)).value)
    checks.append(Check("smoothed |x|^2 at 0 (d sigma^2)", m, 2 * sigma**2, se))

    w = np.array([0.7, -1.3])
    affine = lambda z: z @ w + 0.4  # noqa: E731
    ev = smooth(affine, x, noise, need=("gradient", "laplacian", "hessian"))
    lap = float(np.max(np.abs(ev.laplacian)))
    hess = float(np.max(np.abs(ev.hessian)))
    checks.append(Check("affine laplacian exact zero", lap, 0.0, passed=lap < 1e-9, detail="max |estimate|"))
    checks.append(Check("affine hessian exact zero", hess, 0.0, passed=hess < 1e-9, detail="max |estimate|"))
    for i in range(2):
        m, se = mean_se(ev.gradient[:, i])
        checks.append(Check(f"affine gradient[{i}]", m, w[i], se))
    checks.append(laplacian_variance_check(min(n_draws, 10_000), sigma, seed))
    return checks


def _time_test_function(z):
    x, t = z[:, :-1], z[:, -1]
    return _sq_norm(x) + t * t + t * np.sum(x, axis=1)


@dataclass
class VarianceComparison:
    var_corrected: float
    var_flawed: float
    ratio: float
    ratio_se: float
    mean_corrected: float
    mean_flawed: float
    target: float

    @property
    def separated(self):
        return self.ratio > 1.0 and self.ratio - 1.0 > 3.0 * self.ratio_se


def compare_laplacian_variance(n_draws=10_000, sigma=0.1, seed=0, K=1, d=2):
    """Corrected vs coupled time-shift Laplacian on f = |x|^2 + t^2 + t sum(x).

    Both estimators use the same (paired) noise draws; the true Laplacian is 2d.
    The ratio's standard error comes from the delta method on paired squares.
    """
    rng = RngStream(seed, (-11, 0, 0))
    x = np.tile(np.linspace(0.5, -0.5, d), (n_draws, 1))
    t = np.full(n_draws, 0.5)
    (group,) = draw_perturbation_groups(rng, 1, K, d, sigma, sigma, n_points=n_draws)
    good = smooth(_time_test_function, x, group, t, need=("laplacian",)).laplacian
    bad = estimate_laplacian_coupled(_time_test_function, x, t, group.x, group.t)
    a = (good - good.mean()) ** 2
    b = (bad - bad.mean()) ** 2
    va, vb = a.mean(), b.mean()
    ratio = vb / va
    c = np.cov(a, b)
    rel = c[1, 1] / vb**2 + c[0, 0] / va**2 - 2 * c[0, 1] / (va * vb)
    se = ratio * np.sqrt(max(rel, 0.0) / n_draws)
    return VarianceComparison(va, vb, ratio, se, good.mean(), bad.mean(), 2.0 * d)


def laplacian_variance_check(n_draws=10_000, sigma=0.1, seed=0):
    v = compare_laplacian_variance(n_draws, sigma, seed)
    return Check("coupled/corrected time-dependent laplacian variance ratio", v.ratio, 1.0, v.ratio_se, 3.0,
                 passed=v.separated, detail="pass requires ratio > 1 by 3 se")


# ------------------------------------------------------------ bias audits


def affine_model(input_dim, weights, bias):
    model = MlpModel((input_dim, 1), "tanh")
    model.weights[0][0, :] = weights
    model.biases[0][0] = bias
    return model


@dataclass
class BiasResult:
    name: str
    mode: str
    mean: float
    stderr: float
    exact: float
    predicted: float = None
    extra: dict = field(default_factory=dict)

    @property
    def gap(self):
        return self.mean - self.exact

    def matches(self, target, n_se=3.0):
        return abs(self.mean - target) <= n_se * self.stderr

    def line(self):
        s = (f"{self.name} {self.mode}: mean={self.mean:.8g} exact={self.exact:.8g} "
             f"gap={self.gap:.4g} se={self.stderr:.3g} gap/se={self.gap / self.stderr:.2f}")
        if self.predicted is not None:
            s += f" predicted={self.predicted:.8g}"
        return s


def _resample(draw_losses, resamples):
    vals = []
    for c, s in enumerate(range(0, resamples, _CHUNK)):
        vals.append(draw_losses(c, min(_CHUNK, resamples - s)))
    return mean_se(np.concatenate(vals))


def boundary_bias(mode, K=16, resamples=1_000_000, sigma=0.1, w=(1.0, 1.0), b=0.0, x=(1.0, 0.0), seed=0):
    """Resampling mean of the boundary loss for f = w.x + b and g = 0.

    The exact loss is (w.x + b)^2; the biased form is predicted to exceed it by
    sigma^2 |w|^2 / K.
    """
    mode = normalize_mode(mode)
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    model = affine_model(len(w), w, b)
    rng = RngStream(seed, (-12, 0, 0))
    n_groups = 1 if mode == "biased" else 2

    def draw(chunk, n):
        pts = np.tile(x, (n, 1))
        groups = draw_noise_groups(rng.child(point=chunk), n_groups, K, len(w), sigma, n_points=n)
        return losses.boundary_loss(model, pts, np.zeros(n), mode, groups).per_point_loss

    m, se = _resample(draw, resamples)
    exact = float(w @ x + b) ** 2
    predicted = exact + sigma**2 * float(w @ w) / K if mode == "biased" else exact
    return BiasResult("boundary", mode, m, se, exact, predicted)


def _exact_eval(value, gradient, time_derivative, n):
    return SimpleNamespace(
        value=np.full(n, value), gradient=np.tile(gradient, (n, 1)), laplacian=np.zeros(n),
        time_derivative=np.full(n, time_derivative), hessian=None,
    )


def _affine_setup(problem, seed):
    rng = RngStream(seed, (-13, 0, 0))
    params = 0.5 * rng.normal((problem.input_dim + 1,))
    model = affine_model(problem.input_dim, params[:-1], params[-1])
    fn = AugmentedModel(model, None, problem.time_dependent)
    batch = problem.sample(rng.child(epoch=-14), 1)
    return params, fn, batch


def residual_bias(pde, mode, K=4, resamples=100_000, sigma=0.1, dim=4, seed=0, noise_seed=None):
    """Resampling mean of the residual loss for an affine surrogate (no hard constraint).

    For affine f the smoothed function is f itself, so the exact loss is the
    squared residual of f's exact derivatives at the audit point.  ``seed``
    fixes the surrogate and point; ``noise_seed`` (default ``seed``) the draws,
    so several modes can be audited on one setup with independent noise.
    """
    mode = normalize_mode(mode)
    problem = _problem(pde, dim)
    n_groups = problem.groups_for(mode)
    params, fn, batch = _affine_setup(problem, seed)
    x0 = batch.spatial[0]
    t0 = None if batch.time is None else batch.time[0]
    d = problem.dim
    w, a = params[:d], (params[d] if problem.time_dependent else 0.0)
    inputs = batch.inputs()
    value = float(fn(inputs)[0])
    r_exact, _ = problem.residual_factor([_exact_eval(value, w, a, 1)], batch.spatial, batch.time)
    exact = float(r_exact[0] ** 2)
    rng = RngStream(seed if noise_seed is None else noise_seed, (-15, 0, 0))
    sigma_t = sigma if problem.time_dependent else None

    def draw(chunk, n):
        rep = CollocationBatch(np.tile(x0, (n, 1)), None if t0 is None else np.full(n, t0))
        groups = draw_perturbation_groups(rng.child(point=chunk), n_groups, K, d, sigma, sigma_t, n_points=n)
        return losses.residual_loss(fn, rep, problem, mode, groups).per_point_loss

    m, se = _resample(draw, resamples)
    predicted = None
    if problem.name.startswith("hjb") and mode == "unbiased1":
        # each factor's mean carries -tr Cov(grad estimate) = -(d+1)|w|^2 / K
        r = a - float(w @ w) * (1.0 + (d + 1) / K)
        predicted = r * r
    elif mode == "unbiased2" or problem.order == 1 and mode == "unbiased1":
        predicted = exact
    return BiasResult(pde, mode, m, se, exact, predicted, {"K": K, "sigma": sigma, "dim": d})


# ------------------------------------------------------------ gradient variance


@dataclass
class GradVariance:
    mode: str
    variance: float
    stderr: float
    k_group: int = None


def supported_groups(problem):
    """Group counts of the loss modes ``problem`` accepts."""
    out = []
    for mode in MODES:
        try:
            out.append(problem.groups_for(mode))
        except UnsupportedModeError:
            pass
    return out


def gradient_variance(pde, modes=("biased", "unbiased1", "unbiased2"), K=24, n_draws=10_000, dim=4,
                      n_points=2, sigma=0.1, width=8, seed=0, budget="total"):
    """Per-draw total variance E|g - E g|^2 of the parameter gradient at fixed points.

    One draw is one independent noise realisation for one collocation point, so
    draws are independent and the trace variance gets a plain standard error.
    Variances are summed over ``n_points`` test points.

    ``budget="total"`` spends K perturbations per point in every mode, split
    evenly over the mode's groups; ``budget="group"`` gives every group K.
    """
    problem = _problem(pde, dim)
    rng = RngStream(seed, (-16, 0, 0))
    model = MlpModel.glorot((problem.input_dim, width, width, 1), rng.child(epoch=-3))
    fn = problem.surrogate(model)
    test = problem.sample(rng.child(epoch=-1), n_points)
    sigma_t = sigma if problem.time_dependent else None
    out = []
    for mode in modes:
        try:
            n_groups = problem.groups_for(mode)
        except UnsupportedModeError:
            continue
        k_group = K // n_groups if budget == "total" else K
        if k_group < 1 or (budget == "total" and K % n_groups):
            raise ValueError(f"K={K} does not split evenly over {n_groups} groups")
        total, var_se2 = 0.0, 0.0
        for j in range(n_points):
            per = []
            for c, s in enumerate(range(0, n_draws, 5000)):
                n = min(5000, n_draws - s)
                rep = CollocationBatch(
                    np.tile(test.spatial[j], (n, 1)), None if test.time is None else np.full(n, test.time[j])
                )
                groups = draw_perturbation_groups(
                    rng.child(epoch=j, point=c, group=10), n_groups, k_group, problem.dim, sigma, sigma_t, n_points=n
                )
                per.append(losses.residual_loss(fn, rep, problem, mode, groups, per_point=True).per_point_grad)
            g = np.concatenate(per)
            sq = np.sum((g - g.mean(axis=0)) ** 2, axis=1)
            m, se = mean_se(sq)
            total += m
            var_se2 += se**2
        out.append(GradVariance(normalize_mode(mode), total, float(np.sqrt(var_se2)), k_group))
    return out


def variance_ordering(table, n_se=3.0):
    """'ordered', 'violated' or 'inconclusive' for Var(biased) <= Var(u1) <= Var(u2).

    A pair counts as resolved when the gap exceeds ``n_se`` combined standard errors.
    """
    status = "ordered"
    for lo, hi in zip(table, table[1:]):
        gap = hi.variance - lo.variance
        band = n_se * np.hypot(lo.stderr, hi.stderr)
        if gap < -band:
            return "violated"
        if gap <= band:
            status = "inconclusive"
    return status


# ------------------------------------------------------------ gradient check


@dataclass
class GradcheckResult:
    pde: str
    mode: str
    max_rel_error: float
    n_checked: int


def finite_difference(loss_fn, params, indices, h=1e-3):
    """Central differences of ``loss_fn(params)`` along ``indices``.

    Raises :class:`FrozenNoiseError` when two evaluations at the same
    parameters disagree, since FD probing is meaningless without frozen noise.
    """
    p = np.array(params, dtype=np.float64)
    base = loss_fn(p)
    if loss_fn(p.copy()) != base:
        raise FrozenNoiseError("loss is not deterministic at fixed parameters; freeze the noise before probing")
    out = []
    for i in indices:
        old = p[i]
        vals = []
        for step in (2 * h, h, -h, -2 * h):
            p[i] = old + step
            vals.append(loss_fn(p))
        p[i] = old
        # fourth-order central stencil: truncation O(h^4) lets h stay large enough to tame roundoff
        out.append((-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h))
    return np.array(out)


def relative_errors(fd, rev, floor=1e-8):
    fd, rev = np.asarray(fd), np.asarray(rev)
    scale = np.maximum(np.maximum(np.abs(fd), np.abs(rev)), floor)
    return np.abs(fd - rev) / scale


def gradcheck(problems=PROBLEMS, dim=4, width=8, n_points=5, K=4, sigma=0.1, n_coords=None, seed=0, h=1e-3):
    """Reverse-mode vs central-difference parameter gradients for every loss mode.

    ``n_coords=None`` probes every parameter.
    """
    rng = RngStream(seed, (-17, 0, 0))
    results = []
    for name in problems:
        problem = _problem(name, dim)
        model = MlpModel.glorot((problem.input_dim, width, width, 1), rng.child(epoch=-3))
        batch = problem.sample(rng.child(epoch=0), n_points)
        sigma_t = sigma if problem.time_dependent else None
        for mode in ("biased", "unbiased1", "unbiased2"):
            try:
                n_groups = problem.groups_for(mode)
            except UnsupportedModeError:
                continue
            groups = draw_perturbation_groups(rng.child(epoch=1, group=1), n_groups, K, problem.dim, sigma, sigma_t,
                                              n_points=n_points)
            rev = losses.residual_loss(model, batch, problem, mode, groups).param_grad.flat

            def loss_fn(p, mode=mode, groups=groups):
                return losses.residual_loss(model.with_params(p), batch, problem, mode, groups).loss

            if n_coords is None:
                idx = np.arange(model.n_params)
            else:
                idx = np.sort(rng.child(epoch=2).uniform((n_coords,)) * model.n_params).astype(int)
            fd = finite_difference(loss_fn, model.params, idx, h)
            err = float(np.max(relative_errors(fd, rev[idx])))
            results.append(GradcheckResult(name, mode, err, len(idx)))
    return results
