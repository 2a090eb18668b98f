"""Optimal-velocity car-following model on a ring road.

Cars are numbered 1..N in prose and 0..N-1 in arrays. A state holds the
positions ``x`` (reduced mod L) and velocities ``y``; car ``n`` follows car
``n+1`` and car ``N`` follows car ``1`` across the seam of the ring.
"""
from __future__ import annotations

import dataclasses
import threading
from dataclasses import dataclass

import numpy as np

from ._backend import kernels

RTOL = 1e-10
ATOL = 1e-10


class IntegrationError(RuntimeError):
    """The adaptive integrator could not reach the requested time."""

    def __init__(self, message, t_reached):
        super().__init__(f"{message} (reached t={t_reached:.17g})")
        self.t_reached = t_reached


@dataclass(frozen=True)
class ModelParams:
    n_cars: int = 30
    road_length: float = 60.0
    inv_tau: float = 1.7
    safety_distance: float = 2.4
    v0: float = 1.0

    def __post_init__(self):
        if int(self.n_cars) != self.n_cars or self.n_cars < 2:
            raise ValueError(f"n_cars must be an integer >= 2, got {self.n_cars}")
        for name in ("road_length", "inv_tau", "safety_distance", "v0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def with_v0(self, v0: float) -> ModelParams:
        return dataclasses.replace(self, v0=float(v0))

    @property
    def mean_headway(self) -> float:
        return self.road_length / self.n_cars


@dataclass(frozen=True)
class MicroState:
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=float)
        y = np.asarray(self.velocities, dtype=float)
        if x.ndim != 1 or x.shape != y.shape:
            raise ValueError("positions and velocities must be 1-D arrays of equal length")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", y)

    @property
    def n_cars(self) -> int:
        return self.positions.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.positions, self.velocities])

    @classmethod
    def from_vector(cls, z, road_length: float) -> MicroState:
        n = len(z) // 2
        return cls(np.mod(z[:n], road_length), z[n:].copy())


def optimal_velocity(d, params: ModelParams):
    """V(d) = v0 (tanh(d - h) + tanh(h)); strictly increasing, V(0) = 0."""
    h = params.safety_distance
    return params.v0 * (np.tanh(np.asarray(d, dtype=float) - h) + np.tanh(h))


def optimal_velocity_slope(d, params: ModelParams):
    h = params.safety_distance
    return params.v0 / np.cosh(np.asarray(d, dtype=float) - h) ** 2


def _check(state: MicroState, params: ModelParams):
    if state.n_cars != params.n_cars:
        raise ValueError(
            f"state has {state.n_cars} cars but params.n_cars={params.n_cars}")


def headways(state: MicroState, params: ModelParams) -> np.ndarray:
    """Cyclic gaps x[n+1] - x[n] reduced into [0, L); they sum to L."""
    x = state.positions
    d = np.roll(x, -1) - x
    return np.mod(d, params.road_length)


def vector_field(state: MicroState, params: ModelParams) -> MicroState:
    """Time derivative (dx/dt, dy/dt) of the first-order ring system."""
    _check(state, params)
    dy = params.inv_tau * (optimal_velocity(headways(state, params), params)
                           - state.velocities)
    return MicroState(state.velocities.copy(), dy)


def sigma(profile) -> float:
    """Sample standard deviation (divisor N-1) of the headways about L/N."""
    u = np.asarray(profile, dtype=float)
    n = u.shape[-1]
    if n < 2:
        raise ValueError("need at least two headways")
    mean = u.sum(axis=-1, keepdims=True) / n
    return np.sqrt(((u - mean) ** 2).sum(axis=-1) / (n - 1))


def align(profile, anchor_index: int = 10) -> np.ndarray:
    """Rotate ``profile`` cyclically so its maximum sits at ``anchor_index``.

    ``anchor_index`` is 1-based; ties go to the smallest original index.
    """
    u = np.asarray(profile, dtype=float)
    return np.roll(u, (anchor_index - 1) - int(np.argmax(u)))


def relabel(state: MicroState, shift: int) -> MicroState:
    """Car n takes the place of car n + shift (the Z_N symmetry)."""
    return MicroState(np.roll(state.positions, -shift), np.roll(state.velocities, -shift))


def free_flow_state(params: ModelParams) -> MicroState:
    n = params.n_cars
    x = np.arange(n) * params.mean_headway
    y = np.full(n, optimal_velocity(params.mean_headway, params))
    return MicroState(x, y)


def state_from_headways(profile, params: ModelParams) -> MicroState:
    """Car 1 at the origin, cars placed by cumulative headways, y = V(headway)."""
    u = np.asarray(profile, dtype=float)
    if u.shape != (params.n_cars,):
        raise ValueError(f"profile must have length {params.n_cars}")
    x = np.concatenate([[0.0], np.cumsum(u[:-1])])
    return MicroState(np.mod(x, params.road_length), optimal_velocity(u, params))


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def increment(self):
        with self._lock:
            self.value += 1


integrations = _Counter()


def _unwrap(x, L):
    # consecutive positions made increasing so the integrator sees no jumps
    d = np.mod(np.diff(x), L)
    return x[0] + np.concatenate([[0.0], np.cumsum(d)])


def trajectory(state: MicroState, times, params: ModelParams, rtol=RTOL, atol=ATOL):
    """Sample one trajectory at the nondecreasing ``times`` (one integration).

    Returns the list of states, positions reduced mod L.
    """
    _check(state, params)
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be nonnegative and nondecreasing")
    L = params.road_length
    z0 = np.concatenate([_unwrap(state.positions, L), state.velocities])
    integrations.increment()
    samples, _, t_reached, status = kernels.integrate_ov(
        z0, times, L, params.inv_tau, params.safety_distance, params.v0,
        rtol, atol)
    if status != 0:
        reason = "step size underflow" if status == 1 else "step budget exhausted"
        raise IntegrationError(reason, t_reached)
    return [MicroState.from_vector(s, L) for s in samples]


def evolve(state: MicroState, t: float, params: ModelParams, rtol=RTOL, atol=ATOL) -> MicroState:
    """Time-t map of the ring system."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return MicroState(state.positions.copy(), state.velocities.copy())
    return trajectory(state, [t], params, rtol, atol)[0]
