"""Brute-force estimators used to cross-check the analytical computations.

Monte-Carlo paths draw samples in fixed-size batches; batch ``i`` uses a Philox
stream keyed by ``(seed, i)``, so estimates do not depend on how many worker
threads process the batches.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InputError
from .geometry import Partition, Region
from .network import GenerativeNetwork, NoiseModel, activation_signs, forward

BATCH = 50_000


@dataclass
class OracleEstimate:
    value: object
    stderr: object
    n_samples: int = 0
    seed: int | None = None
    grid: tuple | None = None
    info: dict = field(default_factory=dict)


def batch_rng(seed: int, batch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(batch,))))


def _map_batches(fn, n: int, seed: int, workers: int = 1, batch: int = BATCH):
    sizes = [min(batch, n - i * batch) for i in range((n + batch - 1) // batch)]
    jobs = [(i, sz) for i, sz in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda j: fn(batch_rng(seed, j[0]), j[1]), jobs))
    return [fn(batch_rng(seed, i), sz) for i, sz in jobs]


def _prior_samples(rng, size, noise: NoiseModel):
    eps = rng.standard_normal((size, noise.sigma_z.shape[0]))
    return eps @ noise.chol_z.T


def _log_lik(x, gz, noise: NoiseModel):
    diff = (gz - x).T
    sol = np.linalg.solve(noise.chol_x, diff)
    return -0.5 * (np.sum(sol * sol, axis=0) + diff.shape[0] * math.log(2 * math.pi) + noise.logdet_x)


def mc_marginal(x, net: GenerativeNetwork, noise: NoiseModel, n: int = 10**6, seed: int = 0,
                workers: int = 1) -> OracleEstimate:
    """Prior-sampling estimate of ``p(x)``; ``value`` is the density, ``info['log_value']`` its log."""
    if n < 10**3:
        raise InputError("mc_marginal needs at least 1000 samples")
    x = np.asarray(x, dtype=float)

    def work(rng, size):
        z = _prior_samples(rng, size, noise)
        return _log_lik(x, forward(net, z), noise)

    logw = np.concatenate(_map_batches(work, n, seed, workers))
    top = logw.max()
    w = np.exp(logw - top)
    mean = w.mean()
    se = w.std(ddof=1) / math.sqrt(n)
    return OracleEstimate(
        mean * math.exp(top), se * math.exp(top), n, seed,
        info={"log_value": math.log(mean) + top, "log_stderr": se / mean},
    )


def is_posterior_expectation(x, net: GenerativeNetwork, noise: NoiseModel, fn, n: int = 10**6,
                             seed: int = 0, n_boot: int = 200, n_blocks: int = 1000,
                             workers: int = 1) -> OracleEstimate:
    """Self-normalized importance sampling of ``E[fn(z) | x]`` with the prior as proposal.

    ``fn`` maps an ``(m, S)`` sample array to an ``(m, k)`` array.  The standard
    error comes from a bootstrap over blocks of consecutive samples.
    """
    if n < 10**4:
        raise InputError("importance sampling needs at least 10^4 samples")
    x = np.asarray(x, dtype=float)

    def work(rng, size):
        z = _prior_samples(rng, size, noise)
        return _log_lik(x, forward(net, z), noise), np.asarray(fn(z), dtype=float).reshape(size, -1)

    parts = _map_batches(work, n, seed, workers)
    logw = np.concatenate([p[0] for p in parts])
    vals = np.concatenate([p[1] for p in parts])
    w = np.exp(logw - logw.max())
    blocks = np.array_split(np.arange(n), n_blocks)
    bw = np.array([w[b].sum() for b in blocks])
    bf = np.array([w[b] @ vals[b] for b in blocks])
    est = bf.sum(axis=0) / bw.sum()
    rng = batch_rng(seed, 2**31 - 1)
    boots = np.empty((n_boot, vals.shape[1]))
    for i in range(n_boot):
        pick = rng.integers(0, n_blocks, n_blocks)
        boots[i] = bf[pick].sum(axis=0) / bw[pick].sum()
    ess = float(w.sum() ** 2 / np.sum(w * w))
    info = {"ess": ess}
    if ess < 50:
        info["warning"] = "low effective sample size"
        warnings.warn(f"importance sampling ESS is only {ess:.1f}", RuntimeWarning)
    return OracleEstimate(est, boots.std(axis=0, ddof=1), n, seed, info=info)


def is_posterior_moments(x, net: GenerativeNetwork, noise: NoiseModel, n: int = 10**6,
                         seed: int = 0, partition: Partition | None = None, n_boot: int = 200,
                         workers: int = 1):
    """IS estimates ``(region shares, e1, E2)``; shares are keyed by the partition's region order."""
    s = net.latent_dim
    index = None
    if partition is not None:
        def index(z):
            return partition.index_of_flat(activation_signs(net, z))

    def fn(z):
        cols = [z, (z[:, :, None] * z[:, None, :]).reshape(len(z), -1)]
        if index is not None:
            idx = index(z)
            onehot = np.zeros((len(z), len(partition)))
            ok = idx >= 0
            onehot[np.flatnonzero(ok), idx[ok]] = 1.0
            cols.append(onehot)
        return np.hstack(cols)

    est = is_posterior_expectation(x, net, noise, fn, n, seed, n_boot, workers=workers)
    v, se = est.value, est.stderr
    e1 = OracleEstimate(v[:s], se[:s], n, seed, info=est.info)
    e2 = OracleEstimate(v[s : s + s * s].reshape(s, s), se[s : s + s * s].reshape(s, s), n, seed, info=est.info)
    shares = OracleEstimate(v[s + s * s :], se[s + s * s :], n, seed, info=est.info)
    return shares, e1, e2


def mc_region_mass(region: Region, sigma_z, n: int = 10**5, seed: int = 0) -> OracleEstimate:
    """Fraction of prior samples falling inside the region's polytope."""
    if n < 10**4:
        raise InputError("mc_region_mass needs at least 10^4 samples")
    chol = np.linalg.cholesky(np.atleast_2d(sigma_z))

    def work(rng, size):
        z = rng.standard_normal((size, chol.shape[0])) @ chol.T
        return int(np.count_nonzero(region.contains(z)))

    hits = sum(_map_batches(work, n, seed))
    p = hits / n
    return OracleEstimate(p, math.sqrt(max(p * (1 - p), 0.0) / n), n, seed)


def mc_partition_masses(net: GenerativeNetwork, partition: Partition, sigma_z, n: int = 10**5,
                        seed: int = 0) -> OracleEstimate:
    """Per-region prior mass by code lookup; samples outside the box or partition are counted apart."""
    chol = np.linalg.cholesky(np.atleast_2d(sigma_z))
    r = len(partition)

    def work(rng, size):
        z = rng.standard_normal((size, chol.shape[0])) @ chol.T
        inside = np.all(np.abs(z) <= partition.bounding_radius, axis=1)
        idx = partition.index_of_flat(activation_signs(net, z[inside]))
        counts = np.bincount(idx[idx >= 0], minlength=r)
        return counts, int(np.count_nonzero(idx < 0)), int(np.count_nonzero(~inside))

    parts = _map_batches(work, n, seed)
    counts = sum(p[0] for p in parts)
    p = counts / n
    return OracleEstimate(p, np.sqrt(p * (1 - p) / n), n, seed,
                          info={"unmatched": sum(p[1] for p in parts), "outside_box": sum(p[2] for p in parts)})


# -- quadrature -------------------------------------------------------------------------

def _gauss_weights(cov):
    prec = np.linalg.inv(cov)
    norm = 1.0 / math.sqrt(np.linalg.det(2 * math.pi * cov))
    return prec, norm


def _moments_from_points(pts, wts, mu, cov):
    prec, norm = _gauss_weights(cov)
    d = pts - mu
    dens = norm * np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, prec, d)) * wts
    e0 = dens.sum()
    e1 = dens @ pts
    e2 = np.einsum("n,ni,nj->ij", dens, pts, pts)
    return e0, e1, e2


def _midpoint(region: Region, mu, cov, grid: int):
    lo = region.vertices.min(axis=0)
    hi = region.vertices.max(axis=0)
    s = lo.shape[0]
    h = (hi - lo) / grid
    axes = [lo[i] + h[i] * (np.arange(grid) + 0.5) for i in range(s)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, s)
    inside = region.contains(mesh)
    pts = mesh[inside]
    return _moments_from_points(pts, np.full(len(pts), float(np.prod(h))), mu, cov)


def _gl_nodes(a, b, pieces: int, order: int = 10):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, pieces + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    half = 0.5 * (edges[1:] - edges[:-1])[:, None]
    return (mid + half * x).ravel(), (half * w).ravel()


def _slab_gauss(region: Region, mu, cov, pieces: int):
    """Composite Gauss-Legendre on the region split into slabs between vertex abscissae."""
    v = region.vertices
    s = v.shape[1]
    if s == 1:
        pts, wts = _gl_nodes(v.min(), v.max(), pieces)
        return _moments_from_points(pts[:, None], wts, mu, cov)
    xs = np.unique(np.round(v[:, 0], 12))
    n, c = region.hrep.normals, region.hrep.offsets
    all_pts, all_wts = [], []
    for x0, x1 in zip(xs[:-1], xs[1:]):
        gx, wx = _gl_nodes(x0, x1, pieces)
        for xi, wi in zip(gx, wx):
            # y-range of the vertical line through xi inside the polygon
            lo, hi = -np.inf, np.inf
            for (n1, n2), ci in zip(n, c):
                rhs = ci - n1 * xi
                if abs(n2) < 1e-15:
                    continue
                if n2 > 0:
                    hi = min(hi, rhs / n2)
                else:
                    lo = max(lo, rhs / n2)
            if not hi > lo:
                continue
            gy, wy = _gl_nodes(lo, hi, pieces)
            all_pts.append(np.column_stack([np.full_like(gy, xi), gy]))
            all_wts.append(wi * wy)
    return _moments_from_points(np.vstack(all_pts), np.concatenate(all_wts), mu, cov)


def quad_region_moments(region: Region, mu, cov, grid: int = 2001,
                        method: str = "midpoint") -> OracleEstimate:
    """Moments of ``N(mu, cov)`` over a region by tensor quadrature (S <= 2).

    ``midpoint`` masks a ``grid``-per-axis midpoint rule over the vertex bounding
    box; ``slab`` applies composite Gauss-Legendre on slabs whose edges pass
    through the vertices, so no cell straddles the boundary.  Both evaluate two
    resolutions and report their difference as the error estimate.
    """
    s = region.vertices.shape[1]
    if s > 2:
        raise InputError("quadrature oracle supports latent dimension 1 or 2")
    mu = np.asarray(mu, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if method == "midpoint":
        if grid < 501:
            raise InputError("midpoint quadrature needs at least 501 points per axis")
        fine = _midpoint(region, mu, cov, grid)
        coarse = _midpoint(region, mu, cov, (grid - 1) // 2 + 1)
    elif method == "slab":
        fine = _slab_gauss(region, mu, cov, max(grid // 50, 8))
        coarse = _slab_gauss(region, mu, cov, max(grid // 100, 4))
    else:
        raise InputError(f"unknown quadrature method {method!r}")
    value = tuple(fine)
    err = tuple(np.abs(np.asarray(f) - np.asarray(c)) for f, c in zip(fine, coarse))
    return OracleEstimate(value, err, grid=(grid, method))
