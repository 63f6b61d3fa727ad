"""Gaussian densities, orthant probabilities and truncated moments over polytopes.

Orthant quantities are for ``u ~ N(0, C)`` restricted to ``{u >= a}``:

* ``p0 = P(u >= a)``
* ``m1 = E[u 1{u >= a}] = C F``
* ``m2 = E[u u^T 1{u >= a}] = p0 C + C H C``

Region moments sum these over the signed pieces of a triangulated polytope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import kernels
from .errors import InputError, NumericalError
from .geometry import Region, SignedOrthantPiece

LOG_2PI = math.log(2.0 * math.pi)
MASS_FLOOR = 1e-14


class MvnParams:
    """Mean and SPD covariance with cached Cholesky factor, inverse and log-determinant."""

    def __init__(self, mean, cov):
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        k = self.cov.shape[0]
        self.mean = np.zeros(k) if mean is None else np.asarray(mean, dtype=float).reshape(k)
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise InputError("covariance is not positive definite") from exc
        linv = np.linalg.inv(self.chol)
        self.inv = linv.T @ linv
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def mvn_logpdf(x, params: MvnParams) -> float | np.ndarray:
    """Log density; ``x`` may be one point or an ``(n, k)`` batch."""
    x = np.asarray(x, dtype=float)
    diff = x - params.mean
    sol = np.linalg.solve(params.chol, diff.T if diff.ndim > 1 else diff)
    maha = np.sum(sol * sol, axis=0)
    out = -0.5 * (maha + params.dim * LOG_2PI + params.logdet)
    return float(out) if np.ndim(out) == 0 else out


def logpdf(x, mean, cov):
    return mvn_logpdf(x, MvnParams(mean, cov))


# -- orthant probabilities --------------------------------------------------------

def _std(a, cov):
    sd = np.sqrt(np.diag(cov))
    return a / sd, cov / np.outer(sd, sd)


def rect_cdf(lower, cov) -> float:
    """``P(Z >= lower)`` for ``Z ~ N(0, cov)``; ``-inf`` entries are marginalized out."""
    lower = np.asarray(lower, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if np.any(np.isposinf(lower)):
        return 0.0
    act = np.flatnonzero(np.isfinite(lower))
    a = lower[act]
    c = cov[np.ix_(act, act)]
    k = a.shape[0]
    if k == 0:
        return 1.0
    if np.any(np.diag(c) <= 0):
        raise NumericalError("singular marginal variance in orthant probability")
    h, r = _std(a, c)
    if k == 1:
        return float(kernels.norm_sf(h[0]))
    if k == 2:
        return float(kernels.bvn_upper(h[0], h[1], r[0, 1]))
    if k == 3:
        return _trivariate_upper(h, r)
    raise InputError(f"orthant probabilities are implemented for up to 3 dimensions, got {k}")


def _trivariate_upper(h, r) -> float:
    """Integrate the first coordinate out of a standardized trivariate orthant probability."""
    r12, r13, r23 = r[0, 1], r[0, 2], r[1, 2]
    s2 = math.sqrt(max(1.0 - r12 * r12, 0.0))
    s3 = math.sqrt(max(1.0 - r13 * r13, 0.0))
    if s2 == 0.0 or s3 == 0.0:
        raise NumericalError("degenerate trivariate correlation")
    rc = (r23 - r12 * r13) / (s2 * s3)
    rc = min(max(rc, -1.0), 1.0)

    def integrand(t):
        return kernels.norm_pdf(t) * float(
            kernels.bvn_upper((h[1] - r12 * t) / s2, (h[2] - r13 * t) / s3, rc)
        )

    lo = h[0]
    hi = max(lo, 0.0) + 40.0
    if lo > 38.0:
        return 0.0
    val, _ = integrate.quad(integrand, lo, hi, epsabs=1e-10, epsrel=1e-10, limit=200)
    return float(val)


def _conditional(a, cov, given):
    """Conditional mean shift and covariance of the other coordinates given ``u[given] = a[given]``."""
    k = a.shape[0]
    rest = [i for i in range(k) if i not in given]
    g = list(given)
    cgg = cov[np.ix_(g, g)]
    crg = cov[np.ix_(rest, g)]
    sol = np.linalg.solve(cgg, a[g])
    mean = crg @ sol
    ccov = cov[np.ix_(rest, rest)] - crg @ np.linalg.solve(cgg, crg.T)
    return rest, mean, ccov


def F_vector(a, cov) -> np.ndarray:
    """``F_k = phi(a_k; 0, C_kk) * P(u_{-k} >= a_{-k} | u_k = a_k)``; zero where ``a_k = -inf``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    out = np.zeros(a.shape[0])
    act = np.flatnonzero(np.isfinite(a))
    if act.size == 0:
        return out
    aa = a[act]
    cc = cov[np.ix_(act, act)]
    if np.any(np.diag(cc) <= 0):
        raise NumericalError("singular marginal variance")
    for i in range(act.size):
        dens = math.exp(-0.5 * aa[i] ** 2 / cc[i, i]) / math.sqrt(2.0 * math.pi * cc[i, i])
        if dens == 0.0:
            continue
        rest, mean, ccov = _conditional(aa, cc, [i])
        prob = rect_cdf(aa[rest] - mean, ccov) if rest else 1.0
        out[act[i]] = dens * prob
    return out


def G_matrix(a, cov) -> np.ndarray:
    """Off-diagonal ``G_kl = phi_2(a_k, a_l) * P(rest >= a_rest | u_k = a_k, u_l = a_l)``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    k = a.shape[0]
    out = np.zeros((k, k))
    act = np.flatnonzero(np.isfinite(a))
    if act.size < 2:
        return out
    aa = a[act]
    cc = cov[np.ix_(act, act)]
    for i in range(act.size):
        for j in range(i + 1, act.size):
            blk = cc[np.ix_([i, j], [i, j])]
            det = blk[0, 0] * blk[1, 1] - blk[0, 1] ** 2
            if det <= 0:
                raise NumericalError("singular bivariate marginal")
            v = aa[[i, j]]
            quad = float(v @ np.linalg.solve(blk, v))
            dens = math.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(det))
            if dens == 0.0:
                continue
            rest, mean, ccov = _conditional(aa, cc, [i, j])
            prob = rect_cdf(aa[rest] - mean, ccov) if rest else 1.0
            out[act[i], act[j]] = out[act[j], act[i]] = dens * prob
    return out


def H_matrix(a, cov, f=None, g=None) -> np.ndarray:
    """``H = G + diag((a * F - (C * G) 1) / diag C)`` on the finite coordinates."""
    a = np.asarray(a, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    f = F_vector(a, cov) if f is None else f
    g = G_matrix(a, cov) if g is None else g
    fin = np.isfinite(a)
    af = np.where(fin, a, 0.0) * f
    diag = np.where(fin, (af - (cov * g).sum(axis=1)) / np.diag(cov), 0.0)
    return g + np.diag(diag)


def orthant_moments(a, cov):
    """``(p0, m1, m2)`` of ``N(0, cov)`` over ``{u >= a}``; ``a`` may contain ``-inf``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    p0 = rect_cdf(a, cov)
    f = F_vector(a, cov)
    g = G_matrix(a, cov)
    h = H_matrix(a, cov, f, g)
    return p0, cov @ f, p0 * cov + cov @ h @ cov


# -- region moments -----------------------------------------------------------------

@dataclass(frozen=True)
class RegionMoments:
    e0: float
    e1: np.ndarray
    e2: np.ndarray

    def recentered(self, mu) -> "RegionMoments":
        """Moments of ``N(mu, .)`` over ``region`` from moments of ``N(0, .)`` over ``region - mu``."""
        mu = np.asarray(mu, dtype=float)
        e1 = self.e1 + self.e0 * mu
        e2 = self.e2 + np.outer(self.e1, mu) + np.outer(mu, self.e1) + self.e0 * np.outer(mu, mu)
        return RegionMoments(self.e0, e1, 0.5 * (e2 + e2.T))


def _finish(e0, t1, t2, cov):
    """Assemble moments from signed sums, applying the mass floor."""
    s = cov.shape[0]
    if e0 < MASS_FLOOR:
        return RegionMoments(0.0, np.zeros(s), np.zeros((s, s)))
    e1 = cov @ t1
    e2 = e0 * cov + cov @ t2 @ cov
    return RegionMoments(float(e0), e1, 0.5 * (e2 + e2.T))


def region_moments(pieces, shift, cov) -> RegionMoments:
    """Moments of ``N(0, cov)`` over ``region - shift`` from the region's signed pieces."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    s = cov.shape[0]
    shift = np.zeros(s) if shift is None else np.asarray(shift, dtype=float)
    e0, t1, t2 = 0.0, np.zeros(s), np.zeros((s, s))
    for piece in pieces:
        piece: SignedOrthantPiece
        act = piece.active
        if act.size == 0:
            e0 += piece.sign
            continue
        rows = piece.transform[act]
        lower = piece.lower[act] - rows @ shift
        c = rows @ cov @ rows.T
        p0 = rect_cdf(lower, c)
        f = F_vector(lower, c)
        h = H_matrix(lower, c, f)
        e0 += piece.sign * p0
        t1 += piece.sign * rows.T @ f
        t2 += piece.sign * rows.T @ h @ rows
    return _finish(e0, t1, t2, cov)


def _generic_signed_sums(region: Region, mus, cov):
    from .geometry import subset_signs

    s = cov.shape[0]
    m = mus.shape[0]
    e0 = np.zeros(m)
    t1 = np.zeros((m, s))
    t2 = np.zeros((m, s, s))
    for n, c in zip(region.facet_normals, region.facet_offsets):
        cfull = n @ cov @ n.T
        for sign, j in subset_signs(s):
            j = list(j)
            if not j:
                e0 += sign
                continue
            cc = cfull[np.ix_(j, j)]
            rows = -n[j]
            for i in range(m):
                lower = -c[j] + n[j] @ mus[i]
                p0 = rect_cdf(lower, cc)
                f = F_vector(lower, cc)
                h = H_matrix(lower, cc, f)
                e0[i] += sign * p0
                t1[i] += sign * rows.T @ f
                t2[i] += sign * rows.T @ h @ rows
    return e0, t1, t2


def region_moment_arrays(region: Region, mus, cov):
    """Centered moments of ``N(0, cov)`` over ``region - mu`` for every row ``mu`` of ``mus``.

    Returns arrays ``e0`` (M,), ``e1`` (M, S), ``e2`` (M, S, S); masses below
    the floor are reported as exact zeros.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    if region.facet_normals.shape[2] <= 2:
        e0, t1, t2 = kernels.piece_moments(region.facet_normals, region.facet_offsets, mus, cov)
    else:
        e0, t1, t2 = _generic_signed_sums(region, mus, cov)
    e1 = t1 @ cov
    e2 = e0[:, None, None] * cov + np.einsum("ij,mjk,kl->mil", cov, t2, cov)
    e2 = 0.5 * (e2 + np.swapaxes(e2, 1, 2))
    dead = e0 < MASS_FLOOR
    e0 = np.where(dead, 0.0, e0)
    e1[dead] = 0.0
    e2[dead] = 0.0
    return e0, e1, e2


def recenter_arrays(e0, e1, e2, mus):
    """Vectorized form of :meth:`RegionMoments.recentered`."""
    o1 = e1 + e0[:, None] * mus
    cross = e1[:, :, None] * mus[:, None, :]
    o2 = e2 + cross + np.swapaxes(cross, 1, 2) + e0[:, None, None] * mus[:, :, None] * mus[:, None, :]
    return e0, o1, 0.5 * (o2 + np.swapaxes(o2, 1, 2))


def region_moments_batch(region: Region, mus, cov) -> list:
    e0, e1, e2 = region_moment_arrays(region, mus, cov)
    return [RegionMoments(float(e0[i]), e1[i], e2[i]) for i in range(e0.shape[0])]


def region_moments_at(region: Region, mean, cov) -> RegionMoments:
    """Uncentered moments of ``N(mean, cov)`` over ``region``."""
    mean = np.asarray(mean, dtype=float)
    return region_moments_batch(region, mean[None, :], cov)[0].recentered(mean)
