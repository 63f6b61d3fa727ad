import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import erf
from scipy.stats import multivariate_normal, norm

from cpaem import gaussian
from cpaem.errors import InputError
from cpaem.geometry import PolytopeH, Simplex, build_region, cone_decomposition, enumerate_partition
from cpaem.network import random_network
from cpaem.oracle import quad_region_moments

from conftest import rng

PHI0 = 1.0 / math.sqrt(2 * math.pi)


def spd(g, s):
    a = g.normal(size=(s, s))
    return a @ a.T + 0.3 * np.eye(s)


def test_logpdf_examples():
    assert gaussian.logpdf(np.zeros(3), np.zeros(3), np.eye(3)) == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-14)
    assert gaussian.logpdf([1.0], [0.0], [[1.0]]) == pytest.approx(-1.4189385332046727, abs=1e-14)


def test_logpdf_vs_scipy():
    g = rng(1)
    for _ in range(10):
        c = spd(g, 3)
        m, x = g.normal(size=3), g.normal(size=3)
        assert abs(gaussian.logpdf(x, m, c) - multivariate_normal(m, c).logpdf(x)) < 1e-10


def test_rect_cdf_examples():
    assert gaussian.rect_cdf([0.0], [[1.0]]) == pytest.approx(0.5, abs=1e-15)
    assert gaussian.rect_cdf([0.0, 0.0], np.eye(2)) == pytest.approx(0.25, abs=1e-15)
    for rho in (-0.9, -0.3, 0.5, 0.99):
        c = np.array([[1.0, rho], [rho, 1.0]])
        assert gaussian.rect_cdf([0.0, 0.0], c) == pytest.approx(0.25 + math.asin(rho) / (2 * math.pi), abs=1e-14)
    assert gaussian.rect_cdf([-np.inf, 0.3], np.eye(2)) == pytest.approx(norm.sf(0.3), abs=1e-15)


def test_rect_cdf_vs_scipy():
    g = rng(2)
    for s in (2, 3):
        for _ in range(10):
            c = spd(g, s)
            a = g.normal(size=s)
            ref = multivariate_normal.cdf(-a, np.zeros(s), c, abseps=1e-9, releps=1e-9, maxpts=2 * 10**6)
            assert abs(gaussian.rect_cdf(a, c) - ref) < 1e-7


def test_rect_cdf_dimension_limit():
    with pytest.raises(InputError):
        gaussian.rect_cdf(np.zeros(4), np.eye(4))


def test_F_and_G_examples():
    assert gaussian.F_vector([0.0], [[1.0]]) == pytest.approx([PHI0], abs=1e-15)
    assert gaussian.F_vector([-np.inf], [[1.0]]) == pytest.approx([0.0])
    assert gaussian.F_vector([0.0, 0.0], np.eye(2)) == pytest.approx([0.5 * PHI0] * 2, abs=1e-15)
    assert np.all(gaussian.G_matrix([0.0], [[1.0]]) == 0.0)
    g = gaussian.G_matrix([0.0, 0.0], np.eye(2))
    assert g[0, 1] == pytest.approx(1 / (2 * math.pi), abs=1e-15)
    assert np.all(gaussian.G_matrix([-np.inf, -np.inf], np.eye(2)) == 0.0)


def test_orthant_moments_1d():
    p0, m1, m2 = gaussian.orthant_moments([0.0], [[1.0]])
    assert (p0, m1[0], m2[0, 0]) == pytest.approx((0.5, PHI0, 0.5), abs=1e-15)
    p0, m1, m2 = gaussian.orthant_moments([-np.inf], [[1.0]])
    assert (p0, m1[0], m2[0, 0]) == pytest.approx((1.0, 0.0, 1.0), abs=1e-15)


def _orthant_quadrature(a, c):
    dens = multivariate_normal(np.zeros(2), c).pdf
    lim = 12 * math.sqrt(c.max())

    def mom(f):
        return integrate.dblquad(lambda y, x: f(x, y) * dens([x, y]), a[0], lim, a[1], lim,
                                 epsabs=1e-12, epsrel=1e-12)[0]

    return (mom(lambda x, y: 1.0), np.array([mom(lambda x, y: x), mom(lambda x, y: y)]),
            np.array([[mom(lambda x, y: x * x), mom(lambda x, y: x * y)],
                      [mom(lambda x, y: x * y), mom(lambda x, y: y * y)]]))


@pytest.mark.parametrize("case", range(4))
def test_orthant_moments_2d_vs_quadrature(case):
    g = rng(10 + case)
    c = np.eye(2) if case == 0 else spd(g, 2)
    a = np.zeros(2) if case == 0 else g.normal(size=2) * 0.7
    ref = _orthant_quadrature(a, c)
    got = gaussian.orthant_moments(a, c)
    for r, v in zip(ref, got):
        assert np.max(np.abs(np.asarray(r) - v)) < 1e-8


def test_orthant_moments_3d_vs_monte_carlo():
    g = rng(3)
    c = spd(g, 3)
    a = np.array([-0.3, 0.2, -1.0])
    z = g.multivariate_normal(np.zeros(3), c, size=2_000_000)
    w = np.all(z >= a, axis=1)
    p0, m1, m2 = gaussian.orthant_moments(a, c)
    assert abs(p0 - w.mean()) < 4 * math.sqrt(p0 * (1 - p0) / len(z))
    zw = z * w[:, None]
    se1 = zw.std(axis=0) / math.sqrt(len(z))
    assert np.all(np.abs(m1 - zw.mean(axis=0)) < 4 * se1)


def test_interval_closed_form():
    pieces = cone_decomposition(Simplex(np.array([[-1.0], [1.0]])))
    m = gaussian.region_moments(pieces, np.zeros(1), np.eye(1))
    e0 = erf(1 / math.sqrt(2))
    assert abs(m.e0 - e0) < 1e-10
    assert abs(m.e1[0]) < 1e-10
    assert abs(m.e2[0, 0] - (e0 - 2 * norm.pdf(1.0))) < 1e-10


def test_full_box_mass():
    net = random_network([2, 3, 2], rng=1)
    part = enumerate_partition(net, bounding_radius=8.0)
    tot = [gaussian.region_moments_at(r, np.zeros(2), np.eye(2)) for r in part]
    e0 = sum(m.e0 for m in tot)
    e1 = sum(m.e1 for m in tot)
    e2 = sum(m.e2 for m in tot)
    assert 0 <= 1 - e0 < 1e-12
    assert np.max(np.abs(e1)) < 1e-12
    assert np.max(np.abs(e2 - np.eye(2))) < 1e-10


def test_random_regions_vs_quadrature():
    g = rng(7)
    net = random_network([2, 5, 2], rng=2)
    part = enumerate_partition(net, bounding_radius=4.0)
    for region in list(part)[:6]:
        c = spd(g, 2)
        mu = region.interior + 0.5 * g.normal(size=2)
        m = gaussian.region_moments_at(region, mu, c)
        q = quad_region_moments(region, mu, c, grid=1001, method="slab")
        assert abs(m.e0 - q.value[0]) < 1e-6
        assert np.max(np.abs(m.e1 - q.value[1])) < 1e-6
        assert np.max(np.abs(m.e2 - q.value[2])) < 1e-6


def test_kernel_path_matches_generic_pieces():
    g = rng(8)
    net = random_network([2, 5, 2], rng=4)
    part = enumerate_partition(net, bounding_radius=5.0)
    for region in part:
        c = spd(g, 2)
        mu = g.normal(size=2)
        fast = gaussian.region_moments_at(region, mu, c)
        slow = gaussian.region_moments(region.pieces(), mu, c).recentered(mu)
        assert abs(fast.e0 - slow.e0) < 1e-12
        assert np.max(np.abs(fast.e1 - slow.e1)) < 1e-12
        assert np.max(np.abs(fast.e2 - slow.e2)) < 1e-11


def test_three_d_region_mass_sums_to_one():
    net = random_network([3, 3, 2], rng=6)
    part = enumerate_partition(net, bounding_radius=8.0)
    c = np.diag([1.0, 0.7, 1.3])
    assert abs(sum(gaussian.region_moments_at(r, np.zeros(3), c).e0 for r in part) - 1.0) < 1e-9
