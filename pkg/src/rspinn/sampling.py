"""Counter-based random streams, Gaussian noise groups and collocation samplers."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

# Purpose tags mixed into the Philox key so uniform and normal draws taken from
# the same stream key never share raw bits.
_UNIFORM, _NORMAL = 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RngStream:
    """Random source that is a pure function of ``(seed, stream_key)``.

    Every call with the same arguments returns the same numbers: there is no
    hidden position, so draws do not depend on call order or thread count.
    """

    seed: int
    stream_key: tuple = (0, 0, 0)

    def child(self, epoch=None, point=None, group=None):
        e, p, g = self.stream_key
        return RngStream(
            self.seed,
            (e if epoch is None else epoch, p if point is None else point, g if group is None else group),
        )

    def _bits(self, purpose, count):
        h = hashlib.blake2b(digest_size=16, person=b"rspinn-philox")
        for v in (self.seed, *self.stream_key, purpose):
            h.update(int(v).to_bytes(16, "little", signed=True))
        key = np.frombuffer(h.digest(), dtype=np.uint64)
        return np.random.Philox(key=key).random_raw(count)

    def uniform(self, shape):
        """Uniform draws on the open interval (0, 1), 53-bit resolution."""
        count = int(np.prod(shape, dtype=np.int64))
        bits = self._bits(_UNIFORM, count)
        return (((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53).reshape(shape)

    def normal(self, shape):
        """Standard normal draws via Box-Muller on the Philox stream."""
        count = int(np.prod(shape, dtype=np.int64))
        half = (count + 1) // 2
        bits = self._bits(_NORMAL, 2 * half)
        u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u[:half]))
        theta = 2.0 * np.pi * u[half:]
        z = np.empty(2 * half)
        z[:half] = r * np.cos(theta)
        z[half:] = r * np.sin(theta)
        return z[:count].reshape(shape)


@dataclass
class NoiseGroup:
    """K i.i.d. N(0, sigma^2 I) perturbations, shared ([K, d]) or per point ([n, K, d])."""

    samples: np.ndarray
    sigma: float
    stream_key: tuple = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.samples.ndim not in (2, 3) or self.samples.shape[-2] < 1:
            raise ConfigError(f"noise samples must be [K x d] or [n x K x d], got {self.samples.shape}")

    @property
    def K(self):
        return self.samples.shape[-2]

    @property
    def dim(self):
        return self.samples.shape[-1]


@dataclass
class PerturbationGroup:
    """Spatial noise plus, for time-dependent problems, an independent time noise."""

    x: NoiseGroup
    t: NoiseGroup = None


def draw_noise_groups(rng, n_groups, K, dim, sigma, n_points=None):
    """Independent noise groups; group i uses stream key ``(epoch, point, base + i)``."""
    if n_groups not in (1, 2, 4, 6):
        raise ConfigError(f"n_groups must be one of 1, 2, 4, 6; got {n_groups}")
    if K < 1 or dim < 1:
        raise ConfigError("K and dim must be positive")
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    shape = (K, dim) if n_points is None else (n_points, K, dim)
    e, p, g0 = rng.stream_key
    groups = []
    for i in range(n_groups):
        stream = rng.child(group=g0 + i)
        groups.append(NoiseGroup(sigma * stream.normal(shape), float(sigma), stream.stream_key))
    return groups


def draw_perturbation_groups(rng, n_groups, K, dim, sigma_x, sigma_t=None, n_points=None):
    """Noise groups for a residual; time noise comes from disjoint stream keys."""
    xs = draw_noise_groups(rng, n_groups, K, dim, sigma_x, n_points)
    if sigma_t is None:
        return [PerturbationGroup(x) for x in xs]
    e, p, g0 = rng.stream_key
    ts = draw_noise_groups(rng.child(group=g0 + 1000), n_groups, K, 1, sigma_t, n_points)
    return [PerturbationGroup(x, t) for x, t in zip(xs, ts)]


@dataclass
class CollocationBatch:
    spatial: np.ndarray
    time: np.ndarray = None

    def __len__(self):
        return self.spatial.shape[0]

    @property
    def dim(self):
        return self.spatial.shape[1]

    def inputs(self):
        """Network inputs: x, with t appended as a last column when present."""
        if self.time is None:
            return self.spatial
        return np.column_stack([self.spatial, self.time])


def _check(n, d):
    if n < 0 or d < 1:
        raise ConfigError(f"need n >= 0 and d >= 1, got n={n}, d={d}")


def _times(rng, n, t):
    if t is None:
        return rng.uniform((n,))
    return np.full(n, float(t))


def sample_fp_isotropic(rng, n, d, t=None):
    """t ~ Unif(0, 1), x ~ N(t, (2 - t) I); ``t`` pins the time for testing."""
    _check(n, d)
    times = _times(rng, n, t)
    x = times[:, None] + np.sqrt(2.0 - times)[:, None] * rng.normal((n, d))
    return CollocationBatch(x, times)


def sample_fp_anisotropic(rng, n, d, mu, t=None):
    """t ~ Unif(0, 1), x ~ N(mu t, (2 - t) I)."""
    _check(n, d)
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (d,):
        raise ConfigError(f"mu must have shape ({d},)")
    times = _times(rng, n, t)
    x = times[:, None] * mu + np.sqrt(2.0 - times)[:, None] * rng.normal((n, d))
    return CollocationBatch(x, times)


def draw_mu(rng, d):
    """Drift vector with mu_i ~ N(1, 1)."""
    return 1.0 + rng.normal((d,))


def sample_hjb(rng, n, d, T=1.0):
    """t ~ Unif[0, T], x ~ N(0, I)."""
    _check(n, d)
    return CollocationBatch(rng.normal((n, d)), T * rng.uniform((n,)))


def sample_unit_ball(rng, n, d):
    """Uniform points in the closed unit ball: Gaussian direction, radius U^(1/d)."""
    _check(n, d)
    z = rng.normal((n, d))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    r = rng.uniform((n,)) ** (1.0 / d)
    return CollocationBatch(z / norms * r[:, None])
