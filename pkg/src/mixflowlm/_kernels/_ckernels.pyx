# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scalar-loop backend. Mirrors ``_pykernels`` algorithm for algorithm."""

import numpy as np
cimport numpy as cnp
from libc.math cimport erfc, log, log1p, exp, expm1, sqrt, fabs, INFINITY, M_PI

cnp.import_array()

NAME = "cython"

cdef double HALF_LOG_2PI = 0.5 * log(2.0 * M_PI)
cdef double SQRT1_2 = 0.7071067811865476
cdef double LOG_HALF = log(0.5)

cdef double[8] A = [3.387132872796366608, 133.14166789178437745,
                    1971.5909503065514427, 13731.693765509461125,
                    45921.953931549871457, 67265.770927008700853,
                    33430.575583588128105, 2509.0809287301226727]
cdef double[8] B = [1.0, 42.313330701600911252, 687.1870074920579083,
                    5394.1960214247511077, 21213.794301586595867,
                    39307.89580009271061, 28729.085735721942674,
                    5226.495278852545925]
cdef double[8] C = [1.42343711074968357734, 4.6303378461565452959,
                    5.7694972214606914055, 3.64784832476320460504,
                    1.27045825245236838258, 0.24178072517745061177,
                    0.0227238449892691845833, 7.7454501427834140764e-4]
cdef double[8] D = [1.0, 2.05319162663775882187, 1.6763848301838038494,
                    0.68976733498510000455, 0.14810397642748007459,
                    0.0151986665636164571966, 5.475938084995344946e-4,
                    1.05075007164441684324e-9]
cdef double[8] E = [6.6579046435011037772, 5.4637849111641143699,
                    1.7848265399172913358, 0.29656057182850489123,
                    0.026532189526576123093, 0.0012426609473880784386,
                    2.71155556874348757815e-5, 2.01033439929228813265e-7]
cdef double[8] F = [1.0, 0.59983220655588793769, 0.13692988092273580531,
                    0.0148753612908506148525, 7.868691311456132591e-4,
                    1.8463183175100546818e-5, 1.4215117583164458887e-7,
                    2.04426310338993978564e-15]

DEF ASYM_TERMS = 12
DEF NEWTON_STEPS = 2
DEF BRACKET_SIGMAS = 12.0
DEF MAX_DOUBLINGS = 60
DEF MAX_BISECT = 200
DEF MAX_NEWTON = 100


cdef inline double poly(double* c, double r) nogil:
    cdef double acc = c[7]
    cdef int j
    for j in range(6, -1, -1):
        acc = acc * r + c[j]
    return acc


cdef inline double c_log_ndtr(double x) nogil:
    cdef double x2, term, s
    cdef int n
    if x > 0.0:
        return log1p(-0.5 * erfc(x * SQRT1_2))
    if x >= -20.0:
        return log(0.5 * erfc(-x * SQRT1_2))
    x2 = x * x
    term = 1.0
    s = 1.0
    for n in range(1, ASYM_TERMS + 1):
        term = term * (-(2 * n - 1) / x2)
        s = s + term
    return -0.5 * x2 - log(-x) - HALF_LOG_2PI + log(s)


cdef inline double log_pdf(double x) nogil:
    return -0.5 * x * x - HALF_LOG_2PI


cdef double c_ndtri_lower(double logp) nogil:
    cdef double q = exp(logp) - 0.5
    cdef double r, x, lphi, L
    cdef int k, steps = NEWTON_STEPS
    if fabs(q) <= 0.425:
        r = 0.180625 - q * q
        x = q * poly(A, r) / poly(B, r)
    else:
        r = sqrt(-logp)
        if r > 27.0:
            L = r * r
            x = -sqrt(2.0 * L - log(4.0 * M_PI * L))
        elif r <= 5.0:
            r = r - 1.6
            x = -poly(C, r) / poly(D, r)
        else:
            r = r - 5.0
            x = -poly(E, r) / poly(F, r)
    if logp < -729.0:
        steps = steps + 4
    for k in range(steps):
        lphi = c_log_ndtr(x)
        x = x - (lphi - logp) * exp(lphi - log_pdf(x))
    return x


cdef inline double c_ndtri_pair(double lf, double l1) nogil:
    if lf <= l1:
        return c_ndtri_lower(lf)
    return -c_ndtri_lower(l1)


cdef inline double lse_buf(double* a, Py_ssize_t n) nogil:
    cdef double m = -INFINITY, acc = 0.0
    cdef Py_ssize_t k
    for k in range(n):
        if a[k] > m:
            m = a[k]
    if m == -INFINITY or m == INFINITY:
        m = 0.0
    for k in range(n):
        acc += exp(a[k] - m)
    return log(acc) + m


def log_ndtr(x):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i
    with nogil:
        for i in range(xf.shape[0]):
            out[i] = c_log_ndtr(xf[i])
    return out.reshape(np.shape(x))


def ndtri_log(logp):
    cdef cnp.ndarray[double, ndim=1] lf = np.ascontiguousarray(logp, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(lf)
    cdef Py_ssize_t i
    with nogil:
        for i in range(lf.shape[0]):
            if lf[i] <= LOG_HALF:
                out[i] = c_ndtri_lower(lf[i])
            else:
                out[i] = -c_ndtri_lower(log(-expm1(lf[i])))
    return out.reshape(np.shape(logp))


def ndtri_pair(log_f, log_1mf):
    cdef cnp.ndarray[double, ndim=1] a = np.ascontiguousarray(log_f, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] b = np.ascontiguousarray(log_1mf, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(a)
    cdef Py_ssize_t i
    with nogil:
        for i in range(a.shape[0]):
            out[i] = c_ndtri_pair(a[i], b[i])
    return out.reshape(np.shape(log_f))


cdef void carriers(double z, double* la, double* m, Py_ssize_t mstride,
                   double* s, double* log_s, Py_ssize_t V, double* buf1,
                   double* buf2, double* buf3, double* out) nogil:
    # out = [log F, log(1-F), log p]
    cdef Py_ssize_t k
    cdef double x
    for k in range(V):
        x = (z - m[k * mstride]) / s[k]
        buf1[k] = la[k] + c_log_ndtr(x)
        buf2[k] = la[k] + c_log_ndtr(-x)
        buf3[k] = la[k] + log_pdf(x) - log_s[k]
    out[0] = lse_buf(buf1, V)
    out[1] = lse_buf(buf2, V)
    out[2] = lse_buf(buf3, V)


cdef inline double resid(double z, bint lower, double lt, double* la,
                         double* m, Py_ssize_t mstride, double* s,
                         double* log_s, Py_ssize_t V, double* b1, double* b2,
                         double* b3, double* out) nogil:
    carriers(z, la, m, mstride, s, log_s, V, b1, b2, b3, out)
    if lower:
        return out[0] - lt
    return lt - out[1]


cdef int solve1(double target, double* la, double* m, Py_ssize_t mstride,
                double* s, double* log_s, Py_ssize_t V, double* b1,
                double* b2, double* b3, double* zout) nogil:
    cdef bint lower = target <= 0.0
    cdef double lt = c_log_ndtr(target) if lower else c_log_ndtr(-target)
    cdef double out[3]
    cdef double smax = s[0], smin = s[0], mmin = m[0], mmax = m[0]
    cdef double lo, hi, w, r, rlo, rhi, mid, z, zn, lref, tol_b
    cdef Py_ssize_t k
    cdef int it
    for k in range(1, V):
        if s[k] > smax:
            smax = s[k]
        if s[k] < smin:
            smin = s[k]
        if m[k * mstride] < mmin:
            mmin = m[k * mstride]
        if m[k * mstride] > mmax:
            mmax = m[k * mstride]
    lo = mmin - BRACKET_SIGMAS * smax
    hi = mmax + BRACKET_SIGMAS * smax
    for it in range(MAX_DOUBLINGS + 1):
        rlo = resid(lo, lower, lt, la, m, mstride, s, log_s, V, b1, b2, b3, out)
        rhi = resid(hi, lower, lt, la, m, mstride, s, log_s, V, b1, b2, b3, out)
        if rlo <= 0 and rhi >= 0:
            break
        if it == MAX_DOUBLINGS:
            zout[0] = 0.5 * (lo + hi)
            return 0
        w = hi - lo
        if rlo > 0:
            lo = lo - w
        if rhi < 0:
            hi = hi + w
    tol_b = 1e-3 * smin
    for it in range(MAX_BISECT):
        if hi - lo <= tol_b:
            break
        mid = 0.5 * (lo + hi)
        r = resid(mid, lower, lt, la, m, mstride, s, log_s, V, b1, b2, b3, out)
        if r <= 0:
            lo = mid
        else:
            hi = mid
    z = 0.5 * (lo + hi)
    for it in range(MAX_NEWTON):
        r = resid(z, lower, lt, la, m, mstride, s, log_s, V, b1, b2, b3, out)
        if r == 0:
            zout[0] = z
            return 1
        if r < 0:
            lo = z
        else:
            hi = z
        lref = out[0] if lower else out[1]
        zn = z - r * exp(lref - out[2])
        if not (zn > lo and zn < hi):
            zn = 0.5 * (lo + hi)
        if fabs(zn - z) <= 1e-14 * (1.0 + fabs(z)) or hi - lo <= 4e-16 * (1.0 + fabs(z)):
            zout[0] = zn
            return 1
        z = zn
    zout[0] = z
    return 0


def mixd_forward(z, logw, means, log_stds):
    cdef double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, ::1] lw = np.ascontiguousarray(logw, dtype=np.float64)
    cdef double[:, :, ::1] mv = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] lsv = np.ascontiguousarray(log_stds, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], d = zv.shape[1], V = lw.shape[1]
    u_arr = np.empty((n, d))
    lp_arr = np.zeros(n)
    cdef double[:, ::1] u = u_arr
    cdef double[::1] lp = lp_arr
    cdef double[::1] la = np.empty(V), s = np.empty(V)
    cdef double[::1] b1 = np.empty(V), b2 = np.empty(V), b3 = np.empty(V)
    cdef Py_ssize_t r, i, k
    cdef double norm, x, li
    with nogil:
        for r in range(n):
            norm = lse_buf(&lw[r, 0], V)
            for k in range(V):
                la[k] = lw[r, k] - norm
                s[k] = exp(lsv[r, k])
            for i in range(d):
                for k in range(V):
                    x = (zv[r, i] - mv[r, k, i]) / s[k]
                    b1[k] = la[k] + c_log_ndtr(x)
                    b2[k] = la[k] + c_log_ndtr(-x)
                    b3[k] = la[k] + (log_pdf(x) - lsv[r, k])
                u[r, i] = c_ndtri_pair(lse_buf(&b1[0], V), lse_buf(&b2[0], V))
                li = lse_buf(&b3[0], V)
                lp[r] += li
                for k in range(V):
                    la[k] = b3[k] - li
    return u_arr, lp_arr


def mixd_inverse(u, logw, means, log_stds):
    cdef double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, ::1] lw = np.ascontiguousarray(logw, dtype=np.float64)
    cdef double[:, :, ::1] mv = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] lsv = np.ascontiguousarray(log_stds, dtype=np.float64)
    cdef Py_ssize_t n = uv.shape[0], d = uv.shape[1], V = lw.shape[1]
    z_arr = np.empty((n, d))
    fail_arr = np.full(n, -1, dtype=np.int64)
    cdef double[:, ::1] zv = z_arr
    cdef long long[::1] fail = fail_arr
    cdef double[::1] la = np.empty(V), s = np.empty(V)
    cdef double[::1] b1 = np.empty(V), b2 = np.empty(V), b3 = np.empty(V)
    cdef Py_ssize_t r, i, k
    cdef double norm, x, li, zi
    cdef int ok
    with nogil:
        for r in range(n):
            norm = lse_buf(&lw[r, 0], V)
            for k in range(V):
                la[k] = lw[r, k] - norm
                s[k] = exp(lsv[r, k])
            for i in range(d):
                ok = solve1(uv[r, i], &la[0], &mv[r, 0, i], d, &s[0],
                            &lsv[r, 0], V, &b1[0], &b2[0], &b3[0], &zi)
                if not ok and fail[r] < 0:
                    fail[r] = i
                zv[r, i] = zi
                for k in range(V):
                    x = (zi - mv[r, k, i]) / s[k]
                    b3[k] = la[k] + (log_pdf(x) - lsv[r, k])
                li = lse_buf(&b3[0], V)
                for k in range(V):
                    la[k] = b3[k] - li
    return z_arr, fail_arr
