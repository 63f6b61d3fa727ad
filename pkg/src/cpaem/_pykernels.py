"""Pure-Python (numpy) implementations of the hot numerical kernels.

These mirror the compiled versions in ``_ckernels.pyx`` and are used when the
extension is unavailable or ``CPAEM_PURE_PYTHON=1`` is set.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc

TWOPI = 2.0 * np.pi
INV_SQRT_2PI = 1.0 / np.sqrt(TWOPI)

# 20-point Gauss-Legendre rule on [-1, 1], stored as the 10 negative nodes
GL_X = np.array([
    -0.9931285991850949, -0.9639719272779138, -0.9122344282513259, -0.8391169718222188,
    -0.7463319064601508, -0.6360536807265150, -0.5108670019508271, -0.3737060887154196,
    -0.2277858511416451, -0.07652652113349733,
])
GL_W = np.array([
    0.01761400713915212, 0.04060142980038694, 0.06267204833410906, 0.08327674157670475,
    0.1019301198172404, 0.1181945319615184, 0.1316886384491766, 0.1420961093183821,
    0.1491729864726037, 0.1527533871307259,
])


def norm_sf(x):
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


def bvn_upper(h, k, r):
    """``P(X >= h, Y >= k)`` for standard bivariate normal with correlation ``r``.

    Drezner-Wesolowsky/Genz scheme with the 20-point Gauss-Legendre rule in every
    branch (vectorized over broadcast inputs).
    """
    h, k, r = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (h, k, r)))
    shape = h.shape
    h, k, r = h.ravel(), k.ravel(), r.ravel()
    out = np.empty_like(h)
    lo = np.abs(r) < 0.925
    if np.any(lo):
        hh, kk, rr = h[lo], k[lo], r[lo]
        hk = hh * kk
        hs = 0.5 * (hh * hh + kk * kk)
        asr = np.arcsin(rr)
        acc = np.zeros_like(hh)
        for x, w in zip(GL_X, GL_W):
            for node in (x, -x):
                sn = np.sin(asr * (node + 1.0) / 2.0)
                acc += w * np.exp((sn * hk - hs) / (1.0 - sn * sn))
        out[lo] = acc * asr / (2.0 * TWOPI) + norm_sf(hh) * norm_sf(kk)
    hi = ~lo
    if np.any(hi):
        out[hi] = _bvn_high_corr(h[hi], k[hi], r[hi])
    return out.reshape(shape)


def _bvn_high_corr(h, k, r):
    kk = np.where(r < 0, -k, k)
    hk = h * kk
    bvn = np.zeros_like(h)
    inner = np.abs(r) < 1.0
    if np.any(inner):
        hi_, ki_, hki, ri = h[inner], kk[inner], hk[inner], r[inner]
        as_ = (1.0 - ri) * (1.0 + ri)
        a = np.sqrt(as_)
        bs = (hi_ - ki_) ** 2
        c = (4.0 - hki) / 8.0
        d = (12.0 - hki) / 16.0
        val = a * np.exp(-(bs / as_ + hki) / 2.0) * (
            1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0
        )
        b = np.sqrt(bs)
        tail = np.exp(-hki / 2.0) * np.sqrt(TWOPI) * norm_sf(b / a) * b * (
            1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0
        )
        val = val - np.where(hki > -160.0, tail, 0.0)
        a2 = a / 2.0
        for x, w in zip(GL_X, GL_W):
            xs = (a2 * (x + 1.0)) ** 2
            rs = np.sqrt(1.0 - xs)
            val += a2 * w * (
                np.exp(-bs / (2.0 * xs) - hki / (1.0 + rs)) / rs
                - np.exp(-(bs / xs + hki) / 2.0) * (1.0 + c * xs * (1.0 + d * xs))
            )
            xs = as_ * (1.0 - x) ** 2 / 4.0
            rs = np.sqrt(1.0 - xs)
            val += a2 * w * np.exp(-(bs / xs + hki) / 2.0) * (
                np.exp(-hki * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs - (1.0 + c * xs * (1.0 + d * xs))
            )
        bvn[inner] = -val / TWOPI
    pos = r > 0
    bvn = np.where(pos, bvn + norm_sf(np.maximum(h, kk)), bvn)
    neg = r < 0
    bvn = np.where(neg, -bvn + np.maximum(0.0, norm_sf(h) - norm_sf(kk)), bvn)
    return bvn


def piece_moments(normals, offsets, mus, sigma):
    """Signed-piece sums for simplices in dimension 1 or 2.

    ``normals[t, j]``/``offsets[t, j]`` describe facet j of simplex t as
    ``n . z <= c`` with unit ``n``.  For every row ``mu`` of ``mus`` the region
    is shifted by ``-mu`` and integrated against ``N(0, sigma)``.

    Returns ``e0`` (M,), ``t1`` (M, S) and ``t2`` (M, S, S) with
    ``e1 = sigma @ t1`` and ``e2 = e0 * sigma + sigma @ t2 @ sigma``.
    """
    normals = np.asarray(normals, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    n_simp, nf, s = normals.shape
    m = mus.shape[0]
    e0 = np.zeros(m)
    t1 = np.zeros((m, s))
    t2 = np.zeros((m, s, s))
    if s not in (1, 2):
        raise ValueError("piece_moments handles dimensions 1 and 2 only")
    sign0 = 1.0 if s % 2 == 0 else -1.0
    sign1 = -sign0
    sign2 = sign0
    for t in range(n_simp):
        n = normals[t]
        cvec = offsets[t]
        cc = n @ sigma @ n.T
        a = mus @ n.T - cvec  # (M, S+1)
        e0 += sign0
        sd = np.sqrt(np.diag(cc))
        hstd = a / sd
        pdf = norm_pdf(hstd)
        sf = norm_sf(hstd)
        for j in range(nf):
            f = pdf[:, j] / sd[j]
            hcoef = a[:, j] * f / cc[j, j]
            e0 += sign1 * sf[:, j]
            t1 -= sign1 * f[:, None] * n[j]
            t2 += sign1 * hcoef[:, None, None] * np.outer(n[j], n[j])
        if s < 2:
            continue
        for i in range(nf):
            for j in range(i + 1, nf):
                rho = cc[i, j] / (sd[i] * sd[j])
                om = 1.0 - rho * rho
                sq = np.sqrt(om)
                hi, hj = hstd[:, i], hstd[:, j]
                p0 = bvn_upper(hi, hj, rho)
                fi = pdf[:, i] / sd[i] * norm_sf((hj - rho * hi) / sq)
                fj = pdf[:, j] / sd[j] * norm_sf((hi - rho * hj) / sq)
                g = np.exp(-0.5 * (hi * hi - 2.0 * rho * hi * hj + hj * hj) / om) / (
                    TWOPI * sd[i] * sd[j] * sq
                )
                hii = (a[:, i] * fi - cc[i, j] * g) / cc[i, i]
                hjj = (a[:, j] * fj - cc[i, j] * g) / cc[j, j]
                e0 += sign2 * p0
                t1 -= sign2 * (fi[:, None] * n[i] + fj[:, None] * n[j])
                cross = np.outer(n[i], n[j])
                t2 += sign2 * (
                    hii[:, None, None] * np.outer(n[i], n[i])
                    + hjj[:, None, None] * np.outer(n[j], n[j])
                    + g[:, None, None] * (cross + cross.T)
                )
    return e0, t1, t2
