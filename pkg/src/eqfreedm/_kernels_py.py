"""Pure-Python fallbacks for the compiled kernels in ``_kernels.pyx``.

The integrator follows the compiled one step for step (same tableau, same
controller), so both backends agree to round-off amplified by the step
controller. :func:`dopri5` is also used directly for systems that have no
compiled kernel, e.g. variational equations.
"""
import numpy as np

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200,
               22 / 525, -1 / 40])


def ov_rhs(z, L, inv_tau, h, v0):
    n = z.shape[0] // 2
    x, y = z[:n], z[n:]
    d = np.empty(n)
    d[:-1] = x[1:] - x[:-1]
    d[-1] = x[0] - x[-1]
    d -= L * np.floor(d / L)
    return np.concatenate([y, inv_tau * (v0 * (np.tanh(d - h) + np.tanh(h)) - y)])


def dopri5(fun, z0, t_out, rtol, atol, max_steps=50_000_000):
    """Adaptive Dormand-Prince 5(4) from t=0, landing exactly on ``t_out``.

    Returns ``(samples, nfev, t_reached, status)`` with the same status codes
    as the compiled integrator.
    """
    t_out = np.asarray(t_out, dtype=float)
    z = np.array(z0, dtype=float)
    dim = z.shape[0]
    samples = np.empty((len(t_out), dim))
    k_out = 0
    t = 0.0
    nfev = 0
    while k_out < len(t_out) and t_out[k_out] <= 0.0:
        samples[k_out] = z
        k_out += 1
    if k_out == len(t_out):
        return samples, nfev, t, 0

    K = np.empty((7, dim))
    K[0] = fun(z)
    nfev += 1
    step = min(0.05, t_out[k_out])
    nsteps = 0
    last_rejected = False
    status = 0
    while k_out < len(t_out):
        t_target = t_out[k_out]
        if nsteps >= max_steps:
            status = 2
            break
        if step < 1e-14 * max(1.0, abs(t)):
            status = 1
            break
        if t + step >= t_target or t + 1.01 * step > t_target:
            step = t_target - t
        nsteps += 1
        for s in range(1, 6):
            zt = z + step * (np.asarray(_A[s]) @ K[:s])
            K[s] = fun(zt)
        znew = z + step * (_B @ K[:6])
        K[6] = fun(znew)
        nfev += 6
        scale = atol + rtol * np.maximum(np.abs(z), np.abs(znew))
        err = np.sqrt(np.mean((step * (_E @ K) / scale) ** 2))
        if err <= 1.0:
            t = t + step
            if t_target - t <= 1e-13 * max(1.0, abs(t_target)):
                t = t_target
            z = znew
            K[0] = K[6]
            fac = 10.0 if err == 0.0 else min(10.0, max(0.2, 0.9 * err ** -0.2))
            if last_rejected:
                fac = min(1.0, fac)
            last_rejected = False
            while k_out < len(t_out) and t_out[k_out] <= t:
                samples[k_out] = z
                k_out += 1
            step *= fac
        else:
            step *= max(0.2, 0.9 * err ** -0.2)
            last_rejected = True
    return samples[:k_out], nfev, t, status


def integrate_ov(z0, t_out, L, inv_tau, h, v0, rtol, atol, max_steps=50_000_000):
    return dopri5(lambda z: ov_rhs(z, L, inv_tau, h, v0), z0, t_out, rtol, atol,
                  max_steps)


def local_fit_residuals(Psi, target, eps, chunk=256):
    M, q = Psi.shape
    Z = np.hstack([np.ones((M, 1)), Psi])
    out = np.empty(M)
    n_singular = 0
    for lo in range(0, M, chunk):
        hi = min(M, lo + chunk)
        d2 = ((Psi[lo:hi, None, :] - Psi[None, :, :]) ** 2).sum(axis=-1)
        W = np.exp(-d2 / eps**2)
        W[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        A = np.einsum("mi,ip,iq->mpq", W, Z, Z)
        b = np.einsum("mi,ip,i->mp", W, Z, target)
        for k in range(hi - lo):
            m = lo + k
            big = np.abs(np.diag(A[k])).max()
            try:
                coef = np.linalg.solve(A[k], b[k])
                sv = np.linalg.svd(A[k], compute_uv=False)
                if big == 0.0 or sv[-1] <= 1e-13 * sv[0]:
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                n_singular += 1
                out[m] = target[m]
                continue
            out[m] = target[m] - Z[m] @ coef
    return out, n_singular
