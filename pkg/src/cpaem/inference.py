"""Exact posterior inference for a piecewise-affine generator with Gaussian prior and noise.

On region ``w`` with map ``z -> A z + b`` the joint density factorizes as
``kappa_w(x) * N(z; mu_w(x), Sigma_w)`` where ``kappa_w`` is the linear-Gaussian
evidence of the region.  The marginal and every posterior moment are sums over
regions of ``kappa_w`` times truncated moments of ``N(mu_w, Sigma_w)`` over ``w``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import gaussian
from .errors import InputError
from .geometry import Partition, Region
from .network import GenerativeNetwork, NoiseModel, activation_signs, forward

LOG_2PI = gaussian.LOG_2PI


@dataclass(frozen=True)
class RegionPosterior:
    mu: np.ndarray
    sigma: np.ndarray
    log_kappa: float
    moments: gaussian.RegionMoments


@dataclass(frozen=True)
class PosteriorSummary:
    log_marginal: float
    codes: tuple
    weights: np.ndarray  # (R,) posterior region masses
    e1: np.ndarray  # (R, S)
    E2: np.ndarray  # (R, S, S)
    total_e1: np.ndarray
    total_E2: np.ndarray

    @property
    def per_region(self) -> dict:
        return {c: (float(w), m1, m2) for c, w, m1, m2 in zip(self.codes, self.weights, self.e1, self.E2)}

    @property
    def mean(self) -> np.ndarray:
        return self.total_e1

    @property
    def cov(self) -> np.ndarray:
        return self.total_E2 - np.outer(self.total_e1, self.total_e1)


def region_posterior_params(x, region: Region, noise: NoiseModel):
    """``(mu, sigma, log_kappa)`` of the region's linear-Gaussian posterior."""
    a, b = region.affine.slope, region.affine.offset
    x = np.asarray(x, dtype=float)
    prec = noise.prec_z + a.T @ noise.prec_x @ a
    sigma = np.linalg.inv(prec)
    sigma = 0.5 * (sigma + sigma.T)
    mu = sigma @ a.T @ noise.prec_x @ (x - b)
    log_kappa = gaussian.logpdf(x, b, noise.sigma_x + a @ noise.sigma_z @ a.T)
    return mu, sigma, float(log_kappa)


class _RegionConstants:
    __slots__ = ("a", "b", "sigma", "gain", "kappa_chol", "kappa_logdet")

    def __init__(self, region: Region, noise: NoiseModel):
        a, b = region.affine.slope, region.affine.offset
        prec = noise.prec_z + a.T @ noise.prec_x @ a
        sigma = np.linalg.inv(prec)
        self.sigma = 0.5 * (sigma + sigma.T)
        self.gain = self.sigma @ a.T @ noise.prec_x
        cov = noise.sigma_x + a @ noise.sigma_z @ a.T
        cov = 0.5 * (cov + cov.T)
        self.kappa_chol = np.linalg.cholesky(cov)
        self.kappa_logdet = 2.0 * float(np.sum(np.log(np.diag(self.kappa_chol))))
        self.a, self.b = a, b

    def log_kappa(self, xs: np.ndarray) -> np.ndarray:
        diff = (xs - self.b).T
        sol = np.linalg.solve(self.kappa_chol, diff)
        return -0.5 * (np.sum(sol * sol, axis=0) + diff.shape[0] * LOG_2PI + self.kappa_logdet)


@dataclass
class PosteriorBatch:
    """Posterior quantities for a batch of observations, region-major arrays."""

    xs: np.ndarray  # (N, D)
    log_kappa: np.ndarray  # (R, N)
    mus: np.ndarray  # (R, N, S)
    e0: np.ndarray  # (R, N) posterior region mass
    e1: np.ndarray  # (R, N, S)
    E2: np.ndarray  # (R, N, S, S)
    log_marginal: np.ndarray  # (N,)

    @property
    def total_e1(self) -> np.ndarray:
        return self.e1.sum(axis=0)

    @property
    def total_E2(self) -> np.ndarray:
        return self.E2.sum(axis=0)

    def summary(self, n: int, codes) -> PosteriorSummary:
        return PosteriorSummary(
            float(self.log_marginal[n]),
            tuple(codes),
            self.e0[:, n].copy(),
            self.e1[:, n].copy(),
            self.E2[:, n].copy(),
            self.e1[:, n].sum(axis=0),
            self.E2[:, n].sum(axis=0),
        )


class ExactPosterior:
    """Posterior machinery bound to a fixed (network, partition, noise) triple."""

    def __init__(self, net: GenerativeNetwork, partition: Partition, noise: NoiseModel):
        if noise.sigma_z.shape[0] != net.latent_dim or noise.sigma_x.shape[0] != net.output_dim:
            raise InputError("noise dimensions do not match the network")
        self.net = net
        self.partition = partition
        self.noise = noise
        self.consts = [_RegionConstants(r, noise) for r in partition.regions]

    @property
    def codes(self) -> list:
        return self.partition.codes()

    def _check_x(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if xs.shape[1] != self.net.output_dim:
            raise InputError(f"observations must have {self.net.output_dim} columns")
        if not np.all(np.isfinite(xs)):
            raise InputError("observations must be finite")
        return xs

    def batch(self, xs) -> PosteriorBatch:
        xs = self._check_x(xs)
        n, s = xs.shape[0], self.net.latent_dim
        r = len(self.consts)
        logk = np.empty((r, n))
        mus = np.empty((r, n, s))
        e0 = np.empty((r, n))
        e1 = np.empty((r, n, s))
        e2 = np.empty((r, n, s, s))
        for i, (region, c) in enumerate(zip(self.partition.regions, self.consts)):
            mu = (xs - c.b) @ c.gain.T
            m0, m1, m2 = gaussian.region_moment_arrays(region, mu, c.sigma)
            e0[i], e1[i], e2[i] = gaussian.recenter_arrays(m0, m1, m2, mu)
            logk[i] = c.log_kappa(xs)
            mus[i] = mu
        with np.errstate(divide="ignore"):
            terms = logk + np.log(e0)
        log_p = logsumexp(terms, axis=0)
        if np.any(~np.isfinite(log_p)):
            bad = np.flatnonzero(~np.isfinite(log_p))
            shown = ", ".join(map(str, bad[:5])) + (", ..." if len(bad) > 5 else "")
            warnings.warn(f"every region has zero mass for {len(bad)} observations ({shown}); "
                          "log p(x) is -inf there", RuntimeWarning)
        with np.errstate(invalid="ignore", over="ignore"):
            alpha = np.exp(logk - log_p)
        alpha = np.where(np.isfinite(alpha), alpha, 0.0)
        return PosteriorBatch(
            xs, logk, mus,
            alpha * e0,
            alpha[:, :, None] * e1,
            alpha[:, :, None, None] * e2,
            log_p,
        )

    def log_marginal(self, xs) -> np.ndarray:
        return self.batch(xs).log_marginal

    def posterior_moments(self, x) -> PosteriorSummary:
        return self.batch(np.atleast_2d(x)).summary(0, self.codes)

    def region_posterior(self, x, region_index: int) -> RegionPosterior:
        x = self._check_x(x)[0]
        region = self.partition.regions[region_index]
        c = self.consts[region_index]
        mu = c.gain @ (x - c.b)
        mom = gaussian.region_moments_batch(region, mu[None, :], c.sigma)[0].recentered(mu)
        return RegionPosterior(mu, c.sigma, float(c.log_kappa(x[None, :])[0]), mom)

    def posterior_logdensity(self, z, x) -> np.ndarray:
        """``log p(z | x)``; ``-inf`` outside the bounding box or any enumerated region."""
        x = self._check_x(x)[0]
        zs = np.atleast_2d(np.asarray(z, dtype=float))
        log_p = float(self.log_marginal(x[None, :])[0])
        out = np.full(zs.shape[0], -np.inf)
        inside = np.all(np.abs(zs) <= self.partition.bounding_radius, axis=1)
        if not np.any(inside):
            return out if np.ndim(z) > 1 else float(out[0])
        idx = self.partition.index_of_flat(activation_signs(self.net, zs[inside]))
        pos = np.flatnonzero(inside)
        for k, ri in zip(pos, idx):
            if ri < 0:
                continue
            c = self.consts[ri]
            mu = c.gain @ (x - c.b)
            out[k] = float(c.log_kappa(x[None, :])[0]) - log_p + gaussian.logpdf(zs[k], mu, c.sigma)
        return out if np.ndim(z) > 1 else float(out[0])

    def log_joint(self, z, x, region_index: int | None = None) -> float:
        """``log p(x, z)`` using the region's affine map when ``region_index`` is given."""
        z = np.asarray(z, dtype=float)
        if region_index is None:
            gz = forward(self.net, z)
        else:
            c = self.consts[region_index]
            gz = c.a @ z + c.b
        return float(
            gaussian.mvn_logpdf(x, gaussian.MvnParams(gz, self.noise.sigma_x))
            + gaussian.mvn_logpdf(z, gaussian.MvnParams(None, self.noise.sigma_z))
        )

    def map_latent(self, x) -> np.ndarray:
        """Maximizer of ``log p(x, z)`` over the clipped latent box.

        Each region's problem is a convex quadratic over a polytope; its
        solution is found by enumerating candidate active sets of size at most
        S.  Ties across regions go to the lexicographically smallest code.
        """
        x = self._check_x(x)[0]
        best_val, best_z = -np.inf, None
        for ri, (region, c) in enumerate(zip(self.partition.regions, self.consts)):
            mu = c.gain @ (x - c.b)
            z = _qp_over_polytope(mu, c.sigma, region.hrep.normals, region.hrep.offsets)
            val = self.log_joint(z, x, ri)
            if best_z is None or val > best_val + 1e-12 * max(1.0, abs(best_val)):
                best_val, best_z = val, z
        return best_z

    def dataset_nll(self, xs) -> float:
        return float(-np.sum(self.log_marginal(xs)))


def _qp_over_polytope(mu, sigma, normals, offsets, tol: float = 1e-9) -> np.ndarray:
    """``argmin (z-mu)^T sigma^{-1} (z-mu)`` over ``normals @ z <= offsets`` by active-set enumeration."""
    if np.all(normals @ mu <= offsets + tol):
        return mu
    s = mu.shape[0]
    prec = np.linalg.inv(sigma)
    best_val, best_z = np.inf, None
    for size in range(1, s + 1):
        for act in itertools.combinations(range(len(offsets)), size):
            n = normals[list(act)]
            gram = n @ sigma @ n.T
            if abs(np.linalg.det(gram)) < 1e-14:
                continue
            lam = np.linalg.solve(gram, n @ mu - offsets[list(act)])
            z = mu - sigma @ n.T @ lam
            if np.all(normals @ z <= offsets + tol):
                d = z - mu
                val = float(d @ prec @ d)
                if val < best_val:
                    best_val, best_z = val, z
    if best_z is None:
        raise InputError("no feasible point found for a region's quadratic program")
    return best_z


# -- functional interface -------------------------------------------------------

def log_marginal(x, net: GenerativeNetwork, partition: Partition, noise: NoiseModel) -> float:
    return float(ExactPosterior(net, partition, noise).log_marginal(np.atleast_2d(x))[0])


def posterior_moments(x, net, partition, noise) -> PosteriorSummary:
    return ExactPosterior(net, partition, noise).posterior_moments(x)


def posterior_logdensity(z, x, net, partition, noise):
    return ExactPosterior(net, partition, noise).posterior_logdensity(z, x)


def map_latent(x, net, partition, noise) -> np.ndarray:
    return ExactPosterior(net, partition, noise).map_latent(x)


def dataset_nll(data, net, partition, noise) -> float:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] == 0:
        raise InputError("dataset is empty")
    return ExactPosterior(net, partition, noise).dataset_nll(data)

