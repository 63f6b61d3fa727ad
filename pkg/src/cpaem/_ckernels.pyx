# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: bivariate normal upper orthant and signed-piece moment sums."""

import numpy as np
cimport numpy as cnp
from libc.math cimport erfc, exp, sqrt, asin, sin, fabs, fmax

cnp.import_array()

cdef double TWOPI = 6.283185307179586
cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double SQRT_HALF = 0.7071067811865476

cdef double GL_X[3][10]
cdef double GL_W[3][10]
cdef int GL_N[3]

GL_N[:] = [3, 6, 10]
GL_X[0][:3] = [-0.9324695142031522, -0.6612093864662647, -0.2386191860831970]
GL_W[0][:3] = [0.1713244923791705, 0.3607615730481384, 0.4679139345726904]
GL_X[1][:6] = [-0.9815606342467191, -0.9041172563704750, -0.7699026741943050,
               -0.5873179542866171, -0.3678314989981802, -0.1252334085114692]
GL_W[1][:6] = [0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
               0.2031674267230659, 0.2334925365383547, 0.2491470458134029]
GL_X[2][:] = [-0.9931285991850949, -0.9639719272779138, -0.9122344282513259,
              -0.8391169718222188, -0.7463319064601508, -0.6360536807265150,
              -0.5108670019508271, -0.3737060887154196, -0.2277858511416451,
              -0.07652652113349733]
GL_W[2][:] = [0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
              0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
              0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
              0.1527533871307259]


cdef inline double _sf(double x) nogil:
    return 0.5 * erfc(x * SQRT_HALF)


cdef inline double _pdf(double x) nogil:
    return INV_SQRT_2PI * exp(-0.5 * x * x)


cdef double _bvnu(double h, double k, double r) nogil:
    cdef int ng, i, n
    cdef double hk, hs, asr, sn, bvn, x, w
    cdef double as_, a, bs, c, d, b, xs, rs
    if fabs(r) < 0.3:
        ng = 0
    elif fabs(r) < 0.75:
        ng = 1
    else:
        ng = 2
    n = GL_N[ng]
    hk = h * k
    bvn = 0.0
    if fabs(r) < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = asin(r)
        for i in range(n):
            x = GL_X[ng][i]
            w = GL_W[ng][i]
            sn = sin(asr * (x + 1.0) / 2.0)
            bvn += w * exp((sn * hk - hs) / (1.0 - sn * sn))
            sn = sin(asr * (1.0 - x) / 2.0)
            bvn += w * exp((sn * hk - hs) / (1.0 - sn * sn))
        return bvn * asr / (2.0 * TWOPI) + _sf(h) * _sf(k)
    if r < 0:
        k = -k
        hk = -hk
    if fabs(r) < 1.0:
        as_ = (1.0 - r) * (1.0 + r)
        a = sqrt(as_)
        bs = (h - k) * (h - k)
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        bvn = a * exp(-(bs / as_ + hk) / 2.0) * (
            1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0)
        if hk > -160.0:
            b = sqrt(bs)
            bvn -= exp(-hk / 2.0) * sqrt(TWOPI) * _sf(b / a) * b * (
                1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
        a = a / 2.0
        for i in range(n):
            x = GL_X[ng][i]
            w = GL_W[ng][i]
            xs = (a * (x + 1.0)) * (a * (x + 1.0))
            rs = sqrt(1.0 - xs)
            bvn += a * w * (exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs
                            - exp(-(bs / xs + hk) / 2.0) * (1.0 + c * xs * (1.0 + d * xs)))
            xs = as_ * (1.0 - x) * (1.0 - x) / 4.0
            rs = sqrt(1.0 - xs)
            bvn += a * w * exp(-(bs / xs + hk) / 2.0) * (
                exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs - (1.0 + c * xs * (1.0 + d * xs)))
        bvn = -bvn / TWOPI
    if r > 0:
        bvn += _sf(fmax(h, k))
    else:
        bvn = -bvn + fmax(0.0, _sf(h) - _sf(k))
    return bvn


def bvn_upper(h, k, r):
    """``P(X >= h, Y >= k)`` for a standard bivariate normal with correlation ``r``."""
    hb, kb, rb = np.broadcast_arrays(np.asarray(h, dtype=np.float64),
                                     np.asarray(k, dtype=np.float64),
                                     np.asarray(r, dtype=np.float64))
    shape = hb.shape
    cdef const double[::1] hv = np.ascontiguousarray(hb).ravel()
    cdef const double[::1] kv = np.ascontiguousarray(kb).ravel()
    cdef const double[::1] rv = np.ascontiguousarray(rb).ravel()
    cdef Py_ssize_t i, n = hv.shape[0]
    out = np.empty(n)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _bvnu(hv[i], kv[i], rv[i])
    return out.reshape(shape)


def piece_moments(normals, offsets, mus, sigma):
    """Signed-piece sums ``(e0, t1, t2)`` for simplices in dimension 1 or 2.

    Same contract as the numpy implementation in ``_pykernels``.
    """
    cdef const double[:, :, ::1] nv = np.ascontiguousarray(normals, dtype=np.float64)
    cdef const double[:, ::1] cv = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef const double[:, ::1] mv = np.ascontiguousarray(np.atleast_2d(mus), dtype=np.float64)
    cdef const double[:, ::1] sv = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef Py_ssize_t n_simp = nv.shape[0], nf = nv.shape[1], s = nv.shape[2]
    cdef Py_ssize_t m = mv.shape[0]
    if s != 1 and s != 2:
        raise ValueError("piece_moments handles dimensions 1 and 2 only")
    e0 = np.zeros(m)
    t1 = np.zeros((m, s))
    t2 = np.zeros((m, s, s))
    cdef double[::1] e0v = e0
    cdef double[:, ::1] t1v = t1
    cdef double[:, :, ::1] t2v = t2
    cdef double cc[3][3]
    cdef double sd[3]
    cdef double a[3]
    cdef double hstd[3]
    cdef double pdf[3]
    cdef Py_ssize_t t, i, j, p, q, mi
    cdef double sign0 = 1.0 if s % 2 == 0 else -1.0
    cdef double sign1 = -sign0, sign2 = sign0
    cdef double f, hc, rho, om, sq, p0, fi, fj, g, hii, hjj, acc

    with nogil:
        for t in range(n_simp):
            for i in range(nf):
                for j in range(nf):
                    acc = 0.0
                    for p in range(s):
                        for q in range(s):
                            acc = acc + nv[t, i, p] * sv[p, q] * nv[t, j, q]
                    cc[i][j] = acc
                sd[i] = sqrt(cc[i][i])
            for mi in range(m):
                for i in range(nf):
                    acc = -cv[t, i]
                    for p in range(s):
                        acc = acc + nv[t, i, p] * mv[mi, p]
                    a[i] = acc
                    hstd[i] = acc / sd[i]
                    pdf[i] = _pdf(hstd[i])
                e0v[mi] += sign0
                for j in range(nf):
                    f = pdf[j] / sd[j]
                    hc = a[j] * f / cc[j][j]
                    e0v[mi] += sign1 * _sf(hstd[j])
                    for p in range(s):
                        t1v[mi, p] -= sign1 * f * nv[t, j, p]
                        for q in range(s):
                            t2v[mi, p, q] += sign1 * hc * nv[t, j, p] * nv[t, j, q]
                if s < 2:
                    continue
                for i in range(nf):
                    for j in range(i + 1, nf):
                        rho = cc[i][j] / (sd[i] * sd[j])
                        om = 1.0 - rho * rho
                        sq = sqrt(om)
                        p0 = _bvnu(hstd[i], hstd[j], rho)
                        fi = pdf[i] / sd[i] * _sf((hstd[j] - rho * hstd[i]) / sq)
                        fj = pdf[j] / sd[j] * _sf((hstd[i] - rho * hstd[j]) / sq)
                        g = exp(-0.5 * (hstd[i] * hstd[i] - 2.0 * rho * hstd[i] * hstd[j]
                                        + hstd[j] * hstd[j]) / om) / (TWOPI * sd[i] * sd[j] * sq)
                        hii = (a[i] * fi - cc[i][j] * g) / cc[i][i]
                        hjj = (a[j] * fj - cc[i][j] * g) / cc[j][j]
                        e0v[mi] += sign2 * p0
                        for p in range(s):
                            t1v[mi, p] -= sign2 * (fi * nv[t, i, p] + fj * nv[t, j, p])
                            for q in range(s):
                                t2v[mi, p, q] += sign2 * (
                                    hii * nv[t, i, p] * nv[t, i, q]
                                    + hjj * nv[t, j, p] * nv[t, j, q]
                                    + g * (nv[t, i, p] * nv[t, j, q] + nv[t, j, p] * nv[t, i, q]))
    return e0, t1, t2
