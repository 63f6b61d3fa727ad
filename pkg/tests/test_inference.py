import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import multivariate_normal

from cpaem.errors import InputError
from cpaem.geometry import enumerate_partition
from cpaem.inference import ExactPosterior, dataset_nll, log_marginal, region_posterior_params
from cpaem.network import AffineMap, NoiseModel, forward, linear_network, random_network
from cpaem.oracle import mc_marginal

from conftest import knot_net, rng


def conjugate(a, b, sx, sz, x):
    cov = sx + a @ sz @ a.T
    gain = sz @ a.T @ np.linalg.inv(cov)
    return sz - gain @ a @ sz, gain @ (x - b), cov


def fake_region(a, b):
    return SimpleNamespace(affine=AffineMap(np.atleast_2d(a), np.atleast_1d(b)))


def test_region_params_scalar():
    s2, x = 0.3, 1.7
    mu, sig, _ = region_posterior_params([x], fake_region(1.0, 0.0), NoiseModel([[s2]], [[1.0]]))
    assert sig[0, 0] == pytest.approx(s2 / (1 + s2), abs=1e-15)
    assert mu[0] == pytest.approx(x / (1 + s2), abs=1e-15)
    mu, sig, _ = region_posterior_params([x], fake_region(0.0, 0.0), NoiseModel([[s2]], [[2.0]]))
    assert mu[0] == 0.0 and sig[0, 0] == pytest.approx(2.0, abs=1e-15)


def linear_setup(seed=0):
    g = rng(seed)
    a, b = g.normal(size=(3, 2)), g.normal(size=3)
    net = linear_network(a, b)
    noise = NoiseModel(np.diag([0.2, 0.3, 0.4]), np.array([[1.0, 0.3], [0.3, 0.8]]))
    return net, noise, a, b, g


def test_linear_marginal_and_posterior():
    net, noise, a, b, g = linear_setup()
    part = enumerate_partition(net, bounding_radius=40.0)
    post = ExactPosterior(net, part, noise)
    for x in g.normal(size=(5, 3)):
        sig, mu, cov = conjugate(a, b, noise.sigma_x, noise.sigma_z, x)
        assert abs(post.log_marginal(x[None])[0] - multivariate_normal(b, cov).logpdf(x)) < 1e-10
        summ = post.posterior_moments(x)
        assert len(summ.codes) == 1 and abs(summ.weights[0] - 1) < 1e-12
        assert np.max(np.abs(summ.mean - mu)) < 1e-10
        assert np.max(np.abs(summ.cov - sig)) < 1e-10
        z = g.normal(size=(4, 2))
        ref = multivariate_normal(mu, sig).logpdf(z)
        assert np.max(np.abs(post.posterior_logdensity(z, x) - ref)) < 1e-9
        assert np.max(np.abs(post.map_latent(x) - mu)) < 1e-10


def test_linear_map_scalar_form():
    a, s2, sz2, x = 1.5, 0.2, 2.0, 0.9
    net = linear_network([[a]], [0.0])
    noise = NoiseModel([[s2]], [[sz2]])
    post = ExactPosterior(net, enumerate_partition(net, bounding_radius=50.0), noise)
    assert post.map_latent([x])[0] == pytest.approx(x * a / (a * a + s2 / sz2), abs=1e-12)


def test_dataset_nll_examples():
    net, noise, a, b, _ = linear_setup(1)
    part = enumerate_partition(net, bounding_radius=40.0)
    cov = noise.sigma_x + a @ noise.sigma_z @ a.T
    assert dataset_nll(b[None], net, part, noise) == pytest.approx(0.5 * math.log(np.linalg.det(2 * math.pi * cov)), abs=1e-12)
    xs = rng(2).normal(size=(7, 3))
    single = dataset_nll(xs, net, part, noise)
    assert dataset_nll(np.vstack([xs, xs]), net, part, noise) == pytest.approx(2 * single, rel=1e-14)
    with pytest.raises(InputError):
        dataset_nll(np.zeros((0, 3)), net, part, noise)


@pytest.mark.filterwarnings("ignore:every region has zero mass")
def test_marginal_normalizes_in_one_d():
    net = random_network([1, 6, 1], rng=4)
    noise = NoiseModel([[0.05]], [[1.0]])
    post = ExactPosterior(net, enumerate_partition(net), noise)
    xs = np.linspace(-12, 12, 24001)
    p = np.exp(post.log_marginal(xs[:, None]))
    assert abs(integrate.simpson(p, x=xs) - 1.0) < 1e-4


def test_posterior_density_normalizes_and_is_continuous():
    net = random_network([1, 6, 2], rng=5)
    noise = NoiseModel(0.1 * np.eye(2), np.eye(1))
    part = enumerate_partition(net)
    post = ExactPosterior(net, part, noise)
    x = forward(net, [0.4])
    zs = np.linspace(-8, 8, 160001)
    dens = np.exp(post.posterior_logdensity(zs[:, None], x))
    assert abs(integrate.simpson(dens, x=zs) - 1.0) < 1e-4
    knots = sorted({float(v[0]) for r in part for v in r.vertices if abs(v[0]) < 7.9})
    for k in knots:
        left, right = np.exp(post.posterior_logdensity(np.array([[k - 1e-9], [k + 1e-9]]), x))
        assert abs(left - right) <= 1e-6 * max(left, right) + 1e-300
    assert post.posterior_logdensity([9.0], x) == -np.inf


def test_weights_sum_to_one():
    net = random_network([2, 5, 3, 2], rng=6)
    noise = NoiseModel(0.2 * np.eye(2), np.eye(2))
    post = ExactPosterior(net, enumerate_partition(net), noise)
    for x in rng(6).normal(size=(10, 2)):
        assert abs(post.posterior_moments(x).weights.sum() - 1) < 1e-10


def test_symmetric_net_zero_mean():
    net = knot_net("abs")
    noise = NoiseModel([[0.1]], [[1.0]])
    post = ExactPosterior(net, enumerate_partition(net), noise)
    for x in (0.3, 1.0, 2.5):
        assert abs(post.posterior_moments([x]).mean[0]) < 1e-8


def test_map_tie_goes_to_smallest_code():
    net = knot_net("abs")
    noise = NoiseModel([[0.01]], [[1.0]])
    post = ExactPosterior(net, enumerate_partition(net), noise)
    z = post.map_latent([2.0])
    assert z[0] < 0  # code (-1,+1) sorts before (+1,-1)
    assert abs(abs(z[0]) - 1.0) < 1e-2


def test_map_zero_noise():
    net = random_network([2, 6, 3], rng=7)
    z0 = np.array([0.4, -0.6])
    noise = NoiseModel(1e-6 * np.eye(3), np.eye(2))
    post = ExactPosterior(net, enumerate_partition(net), noise)
    assert np.max(np.abs(post.map_latent(forward(net, z0)) - z0)) < 1e-2


def test_marginal_vs_monte_carlo():
    net = random_network([1, 8, 2], rng=8)
    noise = NoiseModel(0.1 * np.eye(2), np.eye(1))
    post = ExactPosterior(net, enumerate_partition(net), noise)
    for i, x in enumerate(rng(8).normal(size=(3, 2)) * 0.5):
        est = mc_marginal(x, net, noise, n=200_000, seed=i)
        assert abs(math.exp(post.log_marginal(x[None])[0]) - est.value) < 3 * est.stderr


def test_functional_interface_matches_class():
    net = random_network([1, 4, 2], rng=9)
    noise = NoiseModel(0.1 * np.eye(2), np.eye(1))
    part = enumerate_partition(net)
    x = np.array([0.2, -0.1])
    assert log_marginal(x, net, part, noise) == ExactPosterior(net, part, noise).log_marginal(x[None])[0]


def test_bad_observation_shape():
    net = random_network([1, 4, 2], rng=9)
    noise = NoiseModel(0.1 * np.eye(2), np.eye(1))
    post = ExactPosterior(net, enumerate_partition(net), noise)
    with pytest.raises(InputError):
        post.log_marginal(np.zeros((2, 3)))
    with pytest.raises(InputError):
        post.log_marginal([[np.nan, 0.0]])
