import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from cpaem.em import (
    EmConfig,
    e_step,
    em_fit,
    expected_complete_ll,
    frozen_objective,
    m_step_bias,
    m_step_sigma_x,
    m_step_sigma_z,
    m_step_weight,
)
from cpaem.errors import InputError, StaleCacheError
from cpaem.geometry import enumerate_partition
from cpaem.network import NoiseModel, forward, linear_network, random_network

from conftest import rng


def cache_for(xs, net, noise, radius=None):
    part = enumerate_partition(net, bounding_radius=radius or 8.0 * math.sqrt(noise.sigma_z.max()))
    return e_step(xs, net, part, noise)


def linear_case(seed=0, n=50):
    g = rng(seed)
    a, b = g.normal(size=(3, 2)), g.normal(size=3)
    net = linear_network(a, b)
    noise = NoiseModel(np.diag([0.2, 0.3, 0.4]), np.array([[1.0, 0.3], [0.3, 0.8]]))
    xs = g.normal(size=(n, 3)) + b
    return net, noise, a, b, xs


def posterior(a, b, noise, x):
    cov = noise.sigma_x + a @ noise.sigma_z @ a.T
    gain = noise.sigma_z @ a.T @ np.linalg.inv(cov)
    return gain @ (x - b), noise.sigma_z - gain @ a @ noise.sigma_z


def test_expected_complete_ll_linear_closed_form():
    net, noise, a, b, xs = linear_case()
    cache = cache_for(xs, net, noise, radius=40.0)
    for i, x in enumerate(xs[:10]):
        m, v = posterior(a, b, noise, x)
        ref = (multivariate_normal(a @ m + b, noise.sigma_x).logpdf(x)
               - 0.5 * np.trace(noise.prec_x @ a @ v @ a.T)
               + multivariate_normal(np.zeros(2), noise.sigma_z).logpdf(m)
               - 0.5 * np.trace(noise.prec_z @ v))
        assert abs(expected_complete_ll(x, cache.summary(i), net, noise) - ref) < 1e-8


def test_doubling_sigma_x_shift():
    net, noise, a, b, xs = linear_case(1)
    cache = cache_for(xs, net, noise, radius=40.0)
    x, summ = xs[0], cache.summary(0)
    m, v = posterior(a, b, noise, x)
    r = x - a @ m - b
    quad = r @ noise.prec_x @ r + np.trace(noise.prec_x @ a @ v @ a.T)
    shift = -0.5 * 3 * math.log(2.0) + 0.25 * quad
    doubled = noise.replace(sigma_x=2 * noise.sigma_x)
    got = expected_complete_ll(x, summ, net, doubled) - expected_complete_ll(x, summ, net, noise)
    assert abs(got - shift) < 1e-10


def test_linear_bias_and_weight_updates():
    net, noise, a, b, xs = linear_case(2)
    cache = cache_for(xs, net, noise, radius=40.0)
    e1 = cache.batch.total_e1
    e2 = cache.batch.total_E2
    v_star = m_step_bias(1, cache, net, noise, ridge=0.0)
    assert np.max(np.abs(v_star - np.mean(xs - e1 @ a.T, axis=0))) < 1e-10
    w_star = m_step_weight(1, cache, net, noise, ridge=0.0)
    ref = (xs.T @ e1 - np.outer(b, e1.sum(axis=0))) @ np.linalg.inv(e2.sum(axis=0))
    assert np.max(np.abs(w_star - ref)) < 1e-10


def test_weight_fixed_point_at_exact_moments():
    g = rng(3)
    a, b = g.normal(size=(3, 2)), g.normal(size=3)
    noise = NoiseModel(np.diag([0.2, 0.3, 0.4]), np.eye(2))
    net = linear_network(a, b)
    raw = g.normal(size=(200, 3))
    raw -= raw.mean(axis=0)
    raw = raw @ np.linalg.inv(np.linalg.cholesky(raw.T @ raw / len(raw))).T
    xs = raw @ np.linalg.cholesky(noise.sigma_x + a @ a.T).T + b
    cache = cache_for(xs, net, noise, radius=40.0)
    assert np.max(np.abs(m_step_weight(1, cache, net, noise, ridge=0.0) - a)) < 1e-8
    assert np.max(np.abs(m_step_bias(1, cache, net, noise, ridge=0.0) - b)) < 1e-8


def test_sigma_x_recovers_truth():
    g = rng(4)
    a, b = g.normal(size=(2, 1)), g.normal(size=2)
    noise = NoiseModel(np.diag([0.3, 0.15]), np.eye(1))
    net = linear_network(a, b)
    z = g.normal(size=(10_000, 1))
    xs = z @ a.T + b + g.normal(size=(10_000, 2)) * np.sqrt([0.3, 0.15])
    cache = cache_for(xs, net, noise, radius=40.0)
    est = m_step_sigma_x(cache, net, "full")
    assert np.all(np.abs(np.diag(est) - [0.3, 0.15]) / [0.3, 0.15] < 0.1)
    iso = m_step_sigma_x(cache, net, "isotropic")
    assert np.allclose(iso, np.trace(est) / 2 * np.eye(2))
    assert np.allclose(m_step_sigma_x(cache, net, "diagonal"), np.diag(np.diag(est)))


def test_sigma_z_updates():
    noise = NoiseModel(0.5 * np.eye(2), np.array([[1.5, 0.2], [0.2, 0.7]]))
    flat = linear_network(np.zeros((2, 2)), [0.1, 0.2])
    xs = rng(5).normal(size=(30, 2))
    assert np.max(np.abs(m_step_sigma_z(cache_for(xs, flat, noise, 40.0)) - noise.sigma_z)) < 1e-10
    net, noise, a, b, xs = linear_case(5)
    cache = cache_for(xs, net, noise, radius=40.0)
    ref = np.zeros((2, 2))
    for x in xs:
        m, v = posterior(a, b, noise, x)
        ref += v + np.outer(m, m)
    assert np.max(np.abs(m_step_sigma_z(cache) - ref / len(xs))) < 1e-10


@pytest.mark.parametrize("trial", range(10))
def test_updates_ascend_frozen_objective(trial):
    g = rng(100 + trial)
    net = random_network([1, 3, 3, 2], rng=200 + trial)
    noise = NoiseModel(0.2 * np.eye(2), np.eye(1))
    xs = g.normal(size=(20, 2))
    cache = cache_for(xs, net, noise)
    base = frozen_objective(cache, net, noise)
    for ell in (1, 2, 3):
        nb = net.replace_layer(ell, bias=m_step_bias(ell, cache, net, noise))
        assert frozen_objective(cache, nb, noise) >= base - 1e-9
        nw = net.replace_layer(ell, weight=m_step_weight(ell, cache, net, noise))
        assert frozen_objective(cache, nw, noise) >= base - 1e-9
    sx = noise.replace(sigma_x=m_step_sigma_x(cache, net, "full"))
    assert frozen_objective(cache, net, sx) >= base - 1e-9
    sz = noise.replace(sigma_z=m_step_sigma_z(cache))
    assert frozen_objective(cache, net, sz) >= base - 1e-9


def test_stale_cache_detected():
    net = random_network([1, 3, 2], rng=1)
    noise = NoiseModel(0.2 * np.eye(2), np.eye(1))
    cache = cache_for(rng(1).normal(size=(5, 2)), net, noise)
    cache.value(net, noise)
    with pytest.raises(StaleCacheError):
        cache.value(net, noise.replace(sigma_x=0.3 * np.eye(2)))


def test_frozen_updates_constant_trace():
    net = random_network([1, 4, 2], rng=2)
    noise = NoiseModel(0.2 * np.eye(2), np.eye(1))
    xs = rng(2).normal(size=(15, 2))
    res = em_fit(xs, net, noise, EmConfig(max_iters=3, updates=(), nll_tolerance=-1.0))
    assert len(res.nll_trace) == 4
    assert len(set(res.nll_trace)) == 1


def test_em_on_own_samples_is_monotone():
    net = random_network([1, 4, 2], rng=3)
    noise = NoiseModel(0.05 * np.eye(2), np.eye(1))
    g = rng(3)
    xs = forward(net, g.normal(size=(60, 1))) + 0.05 ** 0.5 * g.normal(size=(60, 2))
    res = em_fit(xs, net, noise, EmConfig(max_iters=8))
    assert all(b <= a + 1e-8 for a, b in zip(res.nll_trace, res.nll_trace[1:]))


def test_em_all_updates_monotone():
    net = random_network([1, 5, 2], rng=4)
    noise = NoiseModel(0.1 * np.eye(2), np.eye(1))
    xs = rng(4).normal(size=(40, 2))
    res = em_fit(xs, net, noise, EmConfig(max_iters=6, updates=("biases", "weights", "sigma_x", "sigma_z"),
                                          sigma_x_form="full"))
    assert all(b <= a + 1e-8 for a, b in zip(res.nll_trace, res.nll_trace[1:]))
    assert res.nll_trace[-1] < res.nll_trace[0]
    assert len(res.card_trace) == len(res.nll_trace) == len(res.step_sizes)


def test_em_input_checks():
    net = random_network([1, 4, 2], rng=5)
    noise = NoiseModel(0.1 * np.eye(2), np.eye(1))
    with pytest.raises(InputError):
        em_fit(np.zeros((0, 2)), net, noise)
    with pytest.raises(InputError):
        em_fit(np.zeros((4, 3)), net, noise)
    with pytest.raises(InputError):
        EmConfig(updates=("everything",))
