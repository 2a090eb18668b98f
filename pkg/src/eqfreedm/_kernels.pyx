# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: ring-road optimal-velocity integrator and local linear fits.

Signatures mirror :mod:`eqfreedm._kernels_py` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, floor, fabs, sqrt, pow, fmax, fmin, exp

cnp.import_array()

# Dormand-Prince 5(4) tableau
cdef double C2 = 1.0 / 5.0, C3 = 3.0 / 10.0, C4 = 4.0 / 5.0, C5 = 8.0 / 9.0
cdef double A21 = 1.0 / 5.0
cdef double A31 = 3.0 / 40.0, A32 = 9.0 / 40.0
cdef double A41 = 44.0 / 45.0, A42 = -56.0 / 15.0, A43 = 32.0 / 9.0
cdef double A51 = 19372.0 / 6561.0, A52 = -25360.0 / 2187.0
cdef double A53 = 64448.0 / 6561.0, A54 = -212.0 / 729.0
cdef double A61 = 9017.0 / 3168.0, A62 = -355.0 / 33.0, A63 = 46732.0 / 5247.0
cdef double A64 = 49.0 / 176.0, A65 = -5103.0 / 18656.0
cdef double B1 = 35.0 / 384.0, B3 = 500.0 / 1113.0, B4 = 125.0 / 192.0
cdef double B5 = -2187.0 / 6784.0, B6 = 11.0 / 84.0
cdef double E1 = 71.0 / 57600.0, E3 = -71.0 / 16695.0, E4 = 71.0 / 1920.0
cdef double E5 = -17253.0 / 339200.0, E6 = 22.0 / 525.0, E7 = -1.0 / 40.0


cdef inline void _ov_rhs(const double* z, double* dz, Py_ssize_t n, double L,
                         double inv_tau, double h, double v0) noexcept nogil:
    # z = (x_0..x_{n-1}, y_0..y_{n-1})
    cdef Py_ssize_t i
    cdef double d, th = tanh(h)
    for i in range(n):
        if i + 1 < n:
            d = z[i + 1] - z[i]
        else:
            d = z[0] - z[n - 1]
        d = d - L * floor(d / L)
        dz[i] = z[n + i]
        dz[n + i] = inv_tau * (v0 * (tanh(d - h) + th) - z[n + i])


def ov_rhs(double[::1] z, double L, double inv_tau, double h, double v0):
    cdef Py_ssize_t n = z.shape[0] // 2
    out = np.empty(2 * n)
    cdef double[::1] dz = out
    _ov_rhs(&z[0], &dz[0], n, L, inv_tau, h, v0)
    return out


def integrate_ov(double[::1] z0, double[::1] t_out, double L, double inv_tau,
                 double h, double v0, double rtol, double atol,
                 long max_steps=50_000_000):
    """Integrate the ring system from t=0 and sample at increasing ``t_out``.

    Returns ``(samples, nfev, t_reached, status)``; status 0 is success,
    1 step-size underflow, 2 step budget exhausted.
    """
    cdef Py_ssize_t dim = z0.shape[0], n = dim // 2, n_out = t_out.shape[0]
    cdef Py_ssize_t i, k_out = 0
    cdef cnp.ndarray[double, ndim=2] samples = np.empty((n_out, dim))
    cdef double[:, ::1] S = samples
    cdef double[:, ::1] K = np.empty((7, dim))
    cdef double[::1] z = np.array(z0, dtype=np.float64)
    cdef double[::1] zt = np.empty(dim)
    cdef double[::1] znew = np.empty(dim)
    cdef double t = 0.0, step, t_target, err, sc, e, fac, hmin
    cdef long nfev = 0, nsteps = 0
    cdef int status = 0, last_rejected = 0

    while k_out < n_out and t_out[k_out] <= 0.0:
        S[k_out, :] = z
        k_out += 1
    if k_out == n_out:
        return samples, nfev, t, status

    with nogil:
        _ov_rhs(&z[0], &K[0, 0], n, L, inv_tau, h, v0)
        nfev += 1
        step = fmin(0.05, t_out[k_out])
        while k_out < n_out:
            t_target = t_out[k_out]
            if nsteps >= max_steps:
                status = 2
                break
            hmin = 1e-14 * fmax(1.0, fabs(t))
            if step < hmin:
                status = 1
                break
            if t + step >= t_target or t + 1.01 * step > t_target:
                step = t_target - t
            nsteps += 1
            for i in range(dim):
                zt[i] = z[i] + step * A21 * K[0, i]
            _ov_rhs(&zt[0], &K[1, 0], n, L, inv_tau, h, v0)
            for i in range(dim):
                zt[i] = z[i] + step * (A31 * K[0, i] + A32 * K[1, i])
            _ov_rhs(&zt[0], &K[2, 0], n, L, inv_tau, h, v0)
            for i in range(dim):
                zt[i] = z[i] + step * (A41 * K[0, i] + A42 * K[1, i] + A43 * K[2, i])
            _ov_rhs(&zt[0], &K[3, 0], n, L, inv_tau, h, v0)
            for i in range(dim):
                zt[i] = z[i] + step * (A51 * K[0, i] + A52 * K[1, i]
                                       + A53 * K[2, i] + A54 * K[3, i])
            _ov_rhs(&zt[0], &K[4, 0], n, L, inv_tau, h, v0)
            for i in range(dim):
                zt[i] = z[i] + step * (A61 * K[0, i] + A62 * K[1, i] + A63 * K[2, i]
                                       + A64 * K[3, i] + A65 * K[4, i])
            _ov_rhs(&zt[0], &K[5, 0], n, L, inv_tau, h, v0)
            for i in range(dim):
                znew[i] = z[i] + step * (B1 * K[0, i] + B3 * K[2, i] + B4 * K[3, i]
                                         + B5 * K[4, i] + B6 * K[5, i])
            _ov_rhs(&znew[0], &K[6, 0], n, L, inv_tau, h, v0)
            nfev += 6
            err = 0.0
            for i in range(dim):
                sc = atol + rtol * fmax(fabs(z[i]), fabs(znew[i]))
                e = step * (E1 * K[0, i] + E3 * K[2, i] + E4 * K[3, i]
                            + E5 * K[4, i] + E6 * K[5, i] + E7 * K[6, i]) / sc
                err += e * e
            err = sqrt(err / dim)
            if err <= 1.0:
                t = t + step
                if t_target - t <= 1e-13 * fmax(1.0, fabs(t_target)):
                    t = t_target
                for i in range(dim):
                    z[i] = znew[i]
                    K[0, i] = K[6, i]
                if err == 0.0:
                    fac = 10.0
                else:
                    fac = fmin(10.0, fmax(0.2, 0.9 * pow(err, -0.2)))
                if last_rejected:
                    fac = fmin(1.0, fac)
                last_rejected = 0
                while k_out < n_out and t_out[k_out] <= t:
                    for i in range(dim):
                        S[k_out, i] = z[i]
                    k_out += 1
                step = step * fac
            else:
                fac = fmax(0.2, 0.9 * pow(err, -0.2))
                step = step * fac
                last_rejected = 1
    return samples[:k_out], nfev, t, status


def local_fit_residuals(double[:, ::1] Psi, double[::1] target, double eps):
    """Leave-one-out weighted affine fit of ``target`` on the columns of ``Psi``.

    Returns ``(residuals, n_singular)`` where ``residuals[m]`` is
    ``target[m]`` minus the fit built without row ``m``.
    """
    cdef Py_ssize_t M = Psi.shape[0], q = Psi.shape[1], p = q + 1
    cdef Py_ssize_t m, i, a, b, r, piv
    cdef double w, d2, diff, inv_e2 = 1.0 / (eps * eps), tmp, pred, big
    cdef double[:, ::1] A = np.empty((p, p))
    cdef double[::1] rhs = np.empty(p)
    cdef double[::1] z = np.empty(p)
    out = np.empty(M)
    cdef double[::1] res = out
    cdef long n_singular = 0
    cdef int singular
    with nogil:
        for m in range(M):
            for a in range(p):
                rhs[a] = 0.0
                for b in range(p):
                    A[a, b] = 0.0
            for i in range(M):
                if i == m:
                    continue
                d2 = 0.0
                for a in range(q):
                    diff = Psi[m, a] - Psi[i, a]
                    d2 = d2 + diff * diff
                w = exp(-d2 * inv_e2)
                z[0] = 1.0
                for a in range(q):
                    z[a + 1] = Psi[i, a]
                for a in range(p):
                    rhs[a] = rhs[a] + w * z[a] * target[i]
                    for b in range(a, p):
                        A[a, b] = A[a, b] + w * z[a] * z[b]
            for a in range(p):
                for b in range(a):
                    A[a, b] = A[b, a]
            # Gaussian elimination with partial pivoting
            singular = 0
            big = 0.0
            for a in range(p):
                big = fmax(big, fabs(A[a, a]))
            for a in range(p):
                piv = a
                for r in range(a + 1, p):
                    if fabs(A[r, a]) > fabs(A[piv, a]):
                        piv = r
                if fabs(A[piv, a]) <= 1e-13 * big or big == 0.0:
                    singular = 1
                    break
                if piv != a:
                    for b in range(p):
                        tmp = A[a, b]
                        A[a, b] = A[piv, b]
                        A[piv, b] = tmp
                    tmp = rhs[a]
                    rhs[a] = rhs[piv]
                    rhs[piv] = tmp
                for r in range(a + 1, p):
                    tmp = A[r, a] / A[a, a]
                    for b in range(a, p):
                        A[r, b] = A[r, b] - tmp * A[a, b]
                    rhs[r] = rhs[r] - tmp * rhs[a]
            if singular:
                n_singular += 1
                res[m] = target[m]
                continue
            for a in range(p - 1, -1, -1):
                tmp = rhs[a]
                for b in range(a + 1, p):
                    tmp = tmp - A[a, b] * z[b]
                z[a] = tmp / A[a, a]
            pred = z[0]
            for a in range(q):
                pred = pred + z[a + 1] * Psi[m, a]
            res[m] = target[m] - pred
    return out, n_singular
