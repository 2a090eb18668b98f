"""Traveling waves of the ring system by Fourier collocation and continuation.

Headway profiles ``u(xi)`` are N-periodic and stored on ``n_grid``
equispaced collocation points of ``[0, N)``. Newton runs on the grid values
(an invertible real change of basis away from the real Fourier
coefficients), with derivatives and the unit delay ``u(xi + 1)`` applied in
Fourier space.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model
from ._kernels_py import dopri5
from .continuation import (Branch, BranchPoint, ContinuationSettings,
                           continue_branch, join_branches, newton)
from .model import ModelParams


@dataclass(frozen=True)
class TravelingWave:
    u_hat: np.ndarray  # numpy rfft of the grid values
    c: float
    d: float
    v0: float

    @property
    def n_grid(self) -> int:
        return 2 * (len(self.u_hat) - 1)

    @property
    def values(self) -> np.ndarray:
        return np.fft.irfft(self.u_hat, n=self.n_grid)

    @classmethod
    def from_values(cls, u, c, d, v0) -> TravelingWave:
        return cls(np.fft.rfft(np.asarray(u, dtype=float)), float(c), float(d), float(v0))

    def samples(self, n_cars: int) -> np.ndarray:
        """Headways u(0), u(1), ..., u(N-1)."""
        return self.values[:: self.n_grid // n_cars].copy()


@dataclass
class FloquetReport:
    """Floquet data of a wave.

    ``gap`` is the distance to zero of the fast spectrum: the exponents left
    after removing the two symmetry-neutral ones (time and space translation)
    and, when it is real, the slow amplitude exponent ``slow_exponent`` that
    crosses zero at folds.
    """

    exponents: np.ndarray
    multipliers: np.ndarray
    zero_multiplicity: int
    gap: float
    slow_exponent: float
    period: float
    zero_tol: float


class SpectralGrid:
    """Differentiation and unit-shift operators on an N-periodic grid."""

    def __init__(self, n_cars: int, n_grid: int):
        if n_grid % (2 * n_cars):
            raise ValueError(f"n_grid={n_grid} must be an even multiple of N={n_cars}")
        self.n_cars = n_cars
        self.n_grid = n_grid
        self.step = n_cars / n_grid
        self.xi = np.arange(n_grid) * self.step
        k = np.arange(n_grid // 2 + 1)
        kappa = 2 * np.pi * k / n_cars
        self._d1 = 1j * kappa
        self._d1[-1] = 0.0  # Nyquist mode has no odd derivative
        self._d2 = -kappa**2
        self._kappa = kappa
        self._shift = self._shift_factor(1.0)
        eye = np.eye(n_grid)
        self.D1 = self._apply(self._d1, eye)
        self.D2 = self._apply(self._d2, eye)
        self.S = self._apply(self._shift, eye)

    def _apply(self, factor, u):
        return np.fft.irfft(factor[:, None] * np.fft.rfft(u, axis=0), n=self.n_grid, axis=0) \
            if u.ndim == 2 else np.fft.irfft(factor * np.fft.rfft(u), n=self.n_grid)

    def d1(self, u):
        return self._apply(self._d1, u)

    def d2(self, u):
        return self._apply(self._d2, u)

    def _shift_factor(self, s):
        f = np.exp(1j * self._kappa * s)
        f[-1] = f[-1].real  # Nyquist mode of a real signal; exactly 1 for integer s
        return f

    def shift(self, u, s=1):
        """u(xi + s) by band-limited interpolation (any real ``s``)."""
        return self._apply(self._shift if s == 1 else self._shift_factor(s), u)

    def integer_index(self):
        return np.arange(self.n_cars) * (self.n_grid // self.n_cars)


def default_n_grid(n_cars: int) -> int:
    return 8 * n_cars


def _aliasing_check(Vu):
    spec = np.abs(np.fft.rfft(Vu)) ** 2
    top = spec[2 * len(spec) // 3:].sum()
    if top > 1e-10 * spec.sum():
        warnings.warn(f"aliasing: top third of the spectrum of V(u) holds "
                      f"{top / spec.sum():.2e} of its energy", RuntimeWarning, stacklevel=3)


class TWProblem:
    """Residual and Jacobian of the traveling-wave system in ``X = (u, c, d, v0)``."""

    def __init__(self, params: ModelParams, n_grid: int, anchor: np.ndarray):
        self.params = params
        self.grid = SpectralGrid(params.n_cars, n_grid)
        self.anchor = np.asarray(anchor, dtype=float)
        self.tau = 1.0 / params.inv_tau
        self.check_aliasing = True

    def split(self, X):
        n = self.grid.n_grid
        return X[:n], X[n], X[n + 1], X[n + 2]

    def residual(self, X) -> np.ndarray:
        u, c, d, v0 = self.split(X)
        g = self.grid
        p = self.params.with_v0(v0)
        Vu = model.optimal_velocity(u, p)
        if self.check_aliasing:
            _aliasing_check(Vu)
        r1 = c * c * self.tau * g.d2(u) - c * g.d1(u) - g.shift(Vu) + Vu + d
        r2 = self.params.road_length - u[g.integer_index()].sum()
        r3 = g.step * np.dot(g.d1(u), self.anchor - u)
        return np.concatenate([r1, [r2, r3]])

    def jacobian(self, X) -> np.ndarray:
        u, c, d, v0 = self.split(X)
        g = self.grid
        n = g.n_grid
        p = self.params.with_v0(v0)
        Vu = model.optimal_velocity(u, p)
        dVu = model.optimal_velocity_slope(u, p)
        J = np.zeros((n + 2, n + 3))
        # u(xi + 1) enters only through S, so d/du V(S u) = diag(V'(S u)) S
        Su = g.S @ u
        J[:n, :n] = (c * c * self.tau * g.D2 - c * g.D1
                     - model.optimal_velocity_slope(Su, p)[:, None] * g.S
                     + np.diag(dVu))
        J[:n, n] = 2 * c * self.tau * g.d2(u) - g.d1(u)
        J[:n, n + 1] = 1.0
        J[:n, n + 2] = (Vu - g.shift(Vu)) / v0
        J[n, g.integer_index()] = -1.0
        J[n + 1, :n] = g.step * (g.D1.T @ (self.anchor - u) - g.d1(u))
        return J


def ftw_residual(wave: TravelingWave, anchor, params: ModelParams):
    """Return (grid residual of the delay equation, mass defect, phase condition)."""
    prob = TWProblem(params, wave.n_grid, anchor)
    r = prob.residual(np.concatenate([wave.values, [wave.c, wave.d, wave.v0]]))
    return r[:-2], float(r[-2]), float(r[-1])


def trig_interpolate(samples, n_grid):
    """Band-limited interpolation of N equispaced samples onto ``n_grid`` points."""
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    coef = np.fft.rfft(samples)
    if n % 2 == 0:
        coef[-1] *= 0.5  # split the sample-grid Nyquist mode symmetrically
    full = np.zeros(n_grid // 2 + 1, dtype=complex)
    full[: len(coef)] = coef
    return np.fft.irfft(full, n=n_grid) * (n_grid / n)


def wave_from_simulation(params: ModelParams, amplitude=3.0, t_settle=3000.0,
                         n_grid=None, dt=1.0) -> TravelingWave:
    """Initial wave: simulate to a settled jam, read off headways and speed."""
    n_grid = n_grid or default_n_grid(params.n_cars)
    N, L = params.n_cars, params.road_length
    n = np.arange(1, N + 1)
    x0 = L * (n - 1) / N + amplitude * np.sin(2 * np.pi * n / N)
    y0 = np.full(N, model.optimal_velocity(L / N, params))
    s1, s2 = model.trajectory(model.MicroState(np.mod(x0, L), y0),
                              [t_settle, t_settle + dt], params)
    u1, u2 = model.headways(s1, params), model.headways(s2, params)
    # u_i(t) = u(i - c t): first Fourier mode rotates at -2 pi c / N
    w = np.exp(-2j * np.pi * np.arange(N) / N)
    dphase = np.angle((u2 @ w) / (u1 @ w))
    c = -N * dphase / (2 * np.pi * dt)
    u = trig_interpolate(u1, n_grid)
    return TravelingWave.from_values(u, c, 0.0, params.v0)


def solve_wave(wave: TravelingWave, params: ModelParams, v0=None, anchor=None,
               tol=1e-10, max_iter=30) -> TravelingWave:
    """Newton-polish ``wave`` at fixed ``v0`` (default: the wave's own)."""
    v0 = wave.v0 if v0 is None else v0
    anchor = wave.values if anchor is None else anchor
    prob = TWProblem(params, wave.n_grid, anchor)
    prob.check_aliasing = False
    X0 = np.concatenate([wave.values, [wave.c, wave.d, v0]])
    row = np.zeros_like(X0)
    row[-1] = 1.0
    X, _, _ = newton(prob.residual, prob.jacobian, X0, tol, max_iter,
                     extra_row=row, extra_rhs=v0)
    n = wave.n_grid
    return TravelingWave.from_values(X[:n], X[n], X[n + 1], X[n + 2])


def wave_sigma(wave: TravelingWave, n_cars: int) -> float:
    return float(model.sigma(wave.samples(n_cars)))


def continue_tw(start: TravelingWave, params: ModelParams,
                settings: ContinuationSettings | None = None,
                direction: float = -1.0, stability: bool = True,
                sigma_min: float = 0.02) -> Branch:
    """Continue traveling waves in v0 from ``start``.

    The phase anchor moves to each accepted profile. Points carry the wave in
    ``extra["wave"]``, the wave speed in ``extra["c"]`` and, when
    ``stability`` is set, the Floquet report in ``extra["floquet"]``. The
    run stops when the wave flattens below ``sigma_min``.
    """
    settings = settings or ContinuationSettings(step_size=0.01, newton_tol=1e-10,
                                                max_steps=400, v0_bounds=(0.5, 2.0))
    n_grid = start.n_grid
    N = params.n_cars
    prob = TWProblem(params, n_grid, start.values)
    prob.check_aliasing = False
    weights = np.concatenate([np.full(n_grid, 1.0 / n_grid), [1.0, 1.0, 1.0]])

    def wave_of(X):
        return TravelingWave.from_values(X[:n_grid], X[n_grid], X[n_grid + 1], X[n_grid + 2])

    def make_point(X, res):
        w = wave_of(X)
        pt = BranchPoint(unknowns=X[:-1].copy(), v0=float(X[-1]),
                         sigma=wave_sigma(w, N), newton_residual=res,
                         extra={"wave": w, "c": w.c})
        if stability:
            rep = floquet_spectrum(w, params)
            pt.extra["floquet"] = rep
            pt.stable = is_stable(rep)
        return pt

    def on_accept(X):
        prob.anchor = X[:n_grid].copy()

    history = []

    def stop(pt):
        history.append(pt.sigma)
        if pt.sigma < sigma_min:
            return "wave amplitude vanished"
        if len(history) >= 3 and history[-2] < 0.05 and history[-2] < history[-3] \
                and history[-1] > history[-2]:
            return "passed through the flat wave"
        return ""

    X0 = np.concatenate([start.values, [start.c, start.d, start.v0]])
    return continue_branch(prob.residual, prob.jacobian, X0, settings, weights=weights,
                           direction=direction, make_point=make_point, stop=stop,
                           on_accept=on_accept)


def micro_branch(params: ModelParams, settings: ContinuationSettings | None = None,
                 v0_start=1.0, n_grid=None, stability=True,
                 v0_bounds=(0.9, 1.1)) -> Branch:
    """Full traveling-wave branch through ``v0_start``: both directions, joined.

    Ordered from the flat end (toward the Hopf point) through the fold to the
    upper end of ``v0_bounds``.
    """
    settings = settings or ContinuationSettings(step_size=0.01, newton_tol=1e-10,
                                                max_steps=400, v0_bounds=v0_bounds)
    p = params.with_v0(v0_start)
    w0 = solve_wave(wave_from_simulation(p, n_grid=n_grid), p)
    down = continue_tw(w0, params, settings, direction=-1.0, stability=stability)
    up = continue_tw(w0, params, settings, direction=+1.0, stability=stability)
    return join_branches(down, up)


def microstate_from_wave(wave: TravelingWave, params: ModelParams) -> model.MicroState:
    """Microstate on the wave: positions from cumulative headways.

    The wave is a relative equilibrium, x_n(t) = x*(n - c t) + gamma t; the
    drift gamma cancels in the headway equation and averaging the velocity
    equation over one period fixes y = <V(u)> - c p'(xi), where
    x*(xi) = (L/N) xi + p(xi).
    """
    N, L = params.n_cars, params.road_length
    g = SpectralGrid(N, wave.n_grid)
    u_hat = wave.u_hat
    k = np.arange(len(u_hat))
    kappa = 2 * np.pi * k / N
    denom = np.exp(1j * kappa) - 1.0
    p_hat = np.zeros_like(u_hat)
    ok = (k % N) != 0
    p_hat[ok] = u_hat[ok] / denom[ok]
    # x*(xi) = (L/N) xi + p(xi) + const; p solves p(xi+1) - p(xi) = u - L/N
    p = np.fft.irfft(p_hat, n=wave.n_grid)
    dp = g.d1(p)
    idx = g.integer_index()
    x = np.arange(N) * (L / N) + p[idx] - p[0]
    mean_v = float(np.mean(model.optimal_velocity(wave.values, params.with_v0(wave.v0))))
    y = mean_v - wave.c * dp[idx]
    return model.MicroState(np.mod(x, L), y)


def _variational_rhs(params: ModelParams):
    N, L = params.n_cars, params.road_length
    a = params.inv_tau
    idx = np.arange(N)

    def rhs(z):
        x, y = z[:N], z[N:2 * N]
        Phi = z[2 * N:].reshape(2 * N, 2 * N)
        d = np.mod(np.roll(x, -1) - x, L)
        Vd = model.optimal_velocity(d, params)
        s = a * model.optimal_velocity_slope(d, params)
        dPhi = np.empty_like(Phi)
        dPhi[:N] = Phi[N:]
        # dy_n' = a V'(d_n)(dx_{n+1} - dx_n) - a dy_n
        dPhi[N:] = (s[:, None] * (Phi[(idx + 1) % N] - Phi[:N]) - a * Phi[N:])
        return np.concatenate([y, a * (Vd - y), dPhi.ravel()])

    return rhs


def monodromy(state: model.MicroState, period: float, params: ModelParams,
              rtol=1e-11, atol=1e-11):
    """Flow derivative D Phi_period at ``state`` and the end state."""
    N = params.n_cars
    L = params.road_length
    x = model._unwrap(state.positions, L)
    z0 = np.concatenate([x, state.velocities, np.eye(2 * N).ravel()])
    samples, _, t_reached, status = dopri5(_variational_rhs(params), z0, [period], rtol, atol)
    if status != 0:
        raise model.IntegrationError("variational integration failed", t_reached)
    z = samples[0]
    end = model.MicroState(np.mod(z[:N], L), z[N:2 * N])
    return z[2 * N:].reshape(2 * N, 2 * N), end


def floquet_spectrum(wave: TravelingWave, params: ModelParams, zero_tol=1e-5,
                     c=None) -> FloquetReport:
    """Floquet exponents of the wave as a relative periodic orbit.

    The one-car relabeling period is 1/|c|; the monodromy is the index shift
    composed after the flow derivative over that period.
    """
    c = wave.c if c is None else c
    if abs(c) < 1e-12:
        raise ValueError("wave speed is zero: no finite relabeling period")
    params = params.with_v0(wave.v0)
    period = 1.0 / abs(c)
    state = microstate_from_wave(wave, params)
    DPhi, _ = monodromy(state, period, params)
    N = params.n_cars
    # c < 0: Phi_T(P)_n = P_{n+1}, undone by rolling rows forward
    shift = 1 if c < 0 else -1
    perm = np.roll(np.arange(N), shift)
    rows = np.concatenate([perm, N + perm])
    M = DPhi[rows]
    mult = np.linalg.eigvals(M)
    expo = np.log(mult.astype(complex)) / period
    order = np.argsort(-expo.real)
    expo, mult = expo[order], mult[order]
    by_size = np.argsort(np.abs(expo))
    rest = by_size[2:]
    slow = float("nan")
    if rest.size and abs(expo[rest[0]].imag) < 1e-9:
        slow = float(expo[rest[0]].real)
        rest = rest[1:]
    gap = float(np.abs(expo[rest]).min()) if rest.size else float("nan")
    zeros = int(np.sum(np.abs(expo) <= zero_tol))
    return FloquetReport(expo, mult, zeros, gap, slow, period, zero_tol)


def is_stable(report: FloquetReport, tol=1e-7) -> bool:
    """Stable when every exponent off the two neutral ones has Re < 0."""
    nonneutral = np.argsort(np.abs(report.exponents))[2:]
    return bool(np.all(report.exponents[nonneutral].real < tol))
