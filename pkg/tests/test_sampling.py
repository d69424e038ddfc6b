import numpy as np
import pytest

from rspinn.sampling import (
    ConfigError,
    RngStream,
    draw_mu,
    draw_noise_groups,
    draw_perturbation_groups,
    sample_fp_anisotropic,
    sample_fp_isotropic,
    sample_hjb,
    sample_unit_ball,
)


def test_stream_is_pure_function_of_key():
    a = RngStream(5, (1, 2, 3)).normal((4, 3))
    b = RngStream(5, (1, 2, 3)).normal((4, 3))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RngStream(5, (1, 2, 4)).normal((4, 3)))
    assert not np.array_equal(a, RngStream(6, (1, 2, 3)).normal((4, 3)))


def test_uniform_open_interval_and_moments():
    u = RngStream(0).uniform((200_000,))
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.005


def test_normal_moments():
    z = RngStream(0).normal((200_001,))
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1) < 0.01


def test_group_counts_and_shapes(rng):
    for n in (1, 2, 4, 6):
        gs = draw_noise_groups(rng, n, 8, 3, 0.1)
        assert len(gs) == n
        assert all(g.samples.shape == (8, 3) for g in gs)
        assert len({g.stream_key for g in gs}) == n
    gs = draw_noise_groups(rng, 6, 4, 2, 0.1, n_points=5)
    assert gs[0].samples.shape == (5, 4, 2)
    with pytest.raises(ConfigError):
        draw_noise_groups(rng, 3, 4, 2, 0.1)
    with pytest.raises(ConfigError):
        draw_noise_groups(rng, 1, 4, 2, 0.0)


def test_group_mean_concentration(rng):
    # per-group sample mean per coordinate stays within 5 sigma / sqrt(K)
    sigma, K = 1e-2, 1024
    for e in range(20):
        (g,) = draw_noise_groups(rng.child(epoch=e), 1, K, 10, sigma)
        assert np.all(np.abs(g.samples.mean(axis=0)) <= 5 * sigma / np.sqrt(K))


def test_groups_are_uncorrelated(rng):
    K, d = 256, 8
    corr = []
    for e in range(50):
        a, b = draw_noise_groups(rng.child(epoch=e), 2, K, d, 1.0)
        corr.append(np.mean(a.samples * b.samples))
    assert abs(np.mean(corr)) < 4 / np.sqrt(K * d)


def test_time_noise_uses_disjoint_streams(rng):
    gs = draw_perturbation_groups(rng, 2, 4, 3, 0.1, 0.2)
    keys = {g.x.stream_key for g in gs} | {g.t.stream_key for g in gs}
    assert len(keys) == 4
    assert gs[0].t.sigma == 0.2 and gs[0].t.samples.shape == (4, 1)


def test_fp_isotropic_sampler(rng):
    b = sample_fp_isotropic(rng, 100_000, 3)
    assert abs(b.time.mean() - 0.5) < 0.005
    b0 = sample_fp_isotropic(rng, 100_000, 3, t=0.0)
    assert np.all(np.abs(b0.spatial.var(axis=0) - 2.0) < 0.05)
    assert len(sample_fp_isotropic(rng, 0, 3)) == 0
    assert b.inputs().shape == (100_000, 4)


def test_fp_anisotropic_sampler(rng):
    mu = np.array([2.0, -1.0, 0.5])
    b = sample_fp_anisotropic(rng, 50_000, 3, mu, t=1.0)
    se = np.sqrt(1.0 / 50_000)
    assert np.all(np.abs(b.spatial.mean(axis=0) - mu) < 3 * se)
    b0 = sample_fp_anisotropic(rng, 1000, 3, np.zeros(3), t=0.5)
    iso = sample_fp_isotropic(rng, 1000, 3, t=0.5)
    assert np.allclose(b0.spatial - 0.0, iso.spatial - 0.5)


def test_draw_mu_reproducible():
    a = draw_mu(RngStream(2024, (-5, 0, 0)), 10)
    assert np.array_equal(a, draw_mu(RngStream(2024, (-5, 0, 0)), 10))
    assert a.shape == (10,)


def test_hjb_sampler(rng):
    b = sample_hjb(rng, 100_000, 4)
    assert np.all(np.abs(b.spatial.var(axis=0) - 1) < 0.02)
    assert b.time.min() >= 0 and b.time.max() <= 1


def test_unit_ball_sampler(rng):
    b = sample_unit_ball(rng, 100_000, 10)
    r2 = np.sum(b.spatial**2, axis=1)
    assert r2.max() <= 1.0
    assert abs(r2.mean() - 10 / 12) < 0.005
    one = sample_unit_ball(rng, 100_000, 1)
    assert abs(one.spatial.mean()) < 0.01
    assert b.time is None


def test_bad_sizes(rng):
    with pytest.raises(ConfigError):
        sample_hjb(rng, -1, 3)
    with pytest.raises(ConfigError):
        sample_unit_ball(rng, 3, 0)
