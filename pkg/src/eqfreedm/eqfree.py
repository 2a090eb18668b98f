"""Coarse (equation-free) analysis in diffusion-map coordinates.

The macro vector field is never written down: it is estimated by lifting a
macrostate to headways, healing for ``t_skip``, and differencing two
restrictions ``delta`` apart along one micro trajectory. Fixed points of
this field (one coordinate, aligned data) and periodic orbits through a
Poincare ray (two coordinates, unaligned data) are continued in ``v0``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import dataset, model
from .continuation import (Branch, BranchPoint, ContinuationSettings, NewtonFailure,
                           continue_branch, join_branches, newton)
from .model import ModelParams
from .operators import OperatorPair, OutOfSupportError

log = logging.getLogger(__name__)


@dataclass
class CoarseStepperConfig:
    ops: OperatorPair
    params: ModelParams = field(default_factory=ModelParams)
    t_skip: float = 300.0
    delta: float = 240.0
    window: float | None = None  # restriction averaging window; None: auto
    window_step: float = 0.05

    def __post_init__(self):
        if not (self.t_skip > 0 and self.delta > 0):
            raise ValueError("t_skip and delta must be positive")
        if self.window is None:
            # aligned restrictions jump whenever the jam passes a car
            self.window = 20.0 if self.ops.data.aligned else 0.0
        if not 0 <= self.window < 2 * self.t_skip:
            raise ValueError("window must lie in [0, 2 t_skip)")
        if self.params.n_cars != self.ops.data.params.n_cars:
            raise ValueError("params.n_cars does not match the dataset")


@dataclass
class ContinuationConfig:
    step_size: float = 0.01
    newton_tol: float = 1e-8
    newton_max_iter: int = 12
    fd_step: float = 1e-4
    fd_step_period: float = 1e-3
    max_steps: int = 200
    nu: int = 7
    section_direction: tuple[float, float] = (1.0, 0.0)
    v0_bounds: tuple[float, float] = (0.96, 1.1)
    sigma_min: float = 0.02
    min_step_fraction: float = 1 / 16
    chord: bool = True
    backtrack: int = 3

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.nu) != self.nu or self.nu < 1:
            raise ValueError("nu must be a positive integer")
        d = np.asarray(self.section_direction, dtype=float)
        if d.shape != (2,) or abs(np.linalg.norm(d) - 1) > 1e-12:
            raise ValueError("section_direction must be a unit vector in R^2")
        self.section_direction = (float(d[0]), float(d[1]))

    def settings(self) -> ContinuationSettings:
        return ContinuationSettings(self.step_size, self.newton_tol, self.newton_max_iter,
                                    self.max_steps, self.min_step_fraction, self.v0_bounds,
                                    self.chord, self.backtrack)


@dataclass(frozen=True)
class CoarseEvaluation:
    value: np.ndarray
    lifted: np.ndarray  # lifted headway profile
    restricted: np.ndarray  # restrictions at the requested times, one row each
    healed: np.ndarray  # headways at the first requested time


def window_weights(config: CoarseStepperConfig):
    """Sample offsets and Hann weights of the restriction average."""
    if config.window == 0:
        return np.zeros(1), np.ones(1)
    half = int(round(config.window / (2 * config.window_step)))
    offsets = config.window_step * np.arange(-half, half + 1)
    w = np.hanning(len(offsets) + 2)[1:-1]
    return offsets, w / w.sum()


def realize(config: CoarseStepperConfig, phi, v0, times) -> CoarseEvaluation:
    """Lift ``phi``, run one micro trajectory and restrict around ``times``.

    With a nonzero window each restriction is a Hann-weighted average over
    ``[t - window/2, t + window/2]``, taken from the same trajectory.
    """
    ops = config.ops
    lifted = ops.lift(np.atleast_1d(np.asarray(phi, dtype=float))).microstate
    p = config.params.with_v0(v0)
    offsets, weights = window_weights(config)
    base = np.asarray(times, dtype=float)
    sample = (base[:, None] + offsets[None, :]).ravel()
    order = np.argsort(sample, kind="stable")
    states = model.trajectory(model.state_from_headways(lifted, p), sample[order], p)
    prof = np.empty((len(sample), p.n_cars))
    prof[order] = [model.headways(s, p) for s in states]
    R = np.array([ops.restrict(u) for u in prof]).reshape(len(base), len(offsets), -1)
    centre = len(offsets) // 2
    return CoarseEvaluation(np.empty(0), lifted, np.einsum("k,tkd->td", weights, R),
                            prof[centre])


def coarse_evaluate(config: CoarseStepperConfig, phi, v0) -> CoarseEvaluation:
    ev = realize(config, phi, v0, [config.t_skip, config.t_skip + config.delta])
    F = (ev.restricted[1] - ev.restricted[0]) / config.delta
    return dataclasses.replace(ev, value=F)


def coarse_rhs(config: CoarseStepperConfig, phi, v0) -> np.ndarray:
    """Finite-difference estimate of the macro vector field at ``(phi, v0)``."""
    return coarse_evaluate(config, phi, v0).value


def _fd_jacobian(G, X, steps):
    cols = []
    for i, h in enumerate(steps):
        e = np.zeros_like(X)
        e[i] = h
        cols.append((G(X + e) - G(X - e)) / (2 * h))
    return np.column_stack(cols)


class _Cached:
    """Memoized residual; lift, integration and domain failures become Newton failures."""

    def __init__(self, fn):
        self.fn = fn
        self.cache: dict[bytes, object] = {}

    def full(self, X):
        key = np.asarray(X, dtype=float).tobytes()
        if key not in self.cache:
            if len(self.cache) > 256:
                self.cache.clear()
            try:
                self.cache[key] = self.fn(np.asarray(X, dtype=float))
            except (OutOfSupportError, model.IntegrationError, ValueError) as exc:
                raise NewtonFailure(str(exc)) from exc
        return self.cache[key]

    def __call__(self, X):
        return self.full(X).value


def _within_support(ops: OperatorPair, phi) -> bool:
    emb = ops.embedding
    return bool(np.all(phi >= emb.min(axis=0)) and np.all(phi <= emb.max(axis=0)))


# fixed points (one macro coordinate)

def fixed_point_problem(config: CoarseStepperConfig, cont: ContinuationConfig):
    if config.ops.dim != 1:
        raise ValueError("fixed-point continuation needs a one-dimensional embedding")
    G = _Cached(lambda X: coarse_evaluate(config, X[:1], X[1]))
    steps = [cont.fd_step, cont.fd_step]

    def jac(X):
        return _fd_jacobian(G, np.asarray(X, float), steps)

    return G, jac


def seed_state(params: ModelParams, v0=1.05, amplitude=3.0, t_settle=3000.0):
    """Headways after a long simulation from a perturbed free flow."""
    p = params.with_v0(v0)
    end = model.evolve(dataset.initial_state(p, amplitude), t_settle, p)
    return model.headways(end, p)


def seed_fixed_point(config: CoarseStepperConfig, cont: ContinuationConfig, v0=1.05,
                     t_settle=3000.0):
    """Restriction of a settled jam, Newton-polished at fixed ``v0``."""
    G, jac = fixed_point_problem(config, cont)
    phi = config.ops.restrict(seed_state(config.params, v0, t_settle=t_settle))
    X0 = np.array([phi[0], v0])
    X, res, _ = newton(G, jac, X0, cont.newton_tol, cont.newton_max_iter,
                       extra_row=np.array([0.0, 1.0]), extra_rhs=v0,
                       chord=cont.chord, backtrack=cont.backtrack)
    return X


def continue_fixed_points(config: CoarseStepperConfig, start, cont: ContinuationConfig,
                          direction=-1.0) -> Branch:
    """Pseudo-arclength continuation of ``F(phi, v0) = 0`` from ``start = (phi, v0)``."""
    G, jac = fixed_point_problem(config, cont)
    h = cont.fd_step

    def make_point(X, res):
        ev = G.full(X)
        dF = (G(X + [h, 0]) - G(X - [h, 0]))[0] / (2 * h)
        return BranchPoint(unknowns=X[:1].copy(), v0=float(X[1]),
                           sigma=float(model.sigma(ev.healed)), stable=bool(dF < 0),
                           newton_residual=res, extra={"dF_dphi": float(dF)})

    def stop(point):
        if not _within_support(config.ops, point.unknowns):
            return "left the data support"
        if point.sigma < cont.sigma_min:
            return "reached free flow"
        return None

    return continue_branch(G, jac, np.asarray(start, float), cont.settings(),
                           direction=direction, make_point=make_point, stop=stop)


def fixed_point_branch(config: CoarseStepperConfig, cont: ContinuationConfig,
                       v0_start=1.05) -> Branch:
    """Both directions from a seeded jam, ordered by arclength."""
    X0 = seed_fixed_point(config, cont, v0_start)
    down = continue_fixed_points(config, X0, cont, direction=-1.0)
    up = continue_fixed_points(config, X0, cont, direction=+1.0)
    return join_branches(down, up)


# periodic orbits (two macro coordinates)

def poincare_return_residual(config: CoarseStepperConfig, r, T, v0,
                             cont: ContinuationConfig) -> np.ndarray:
    """R(Phi_tskip(L(r e))) - R(Phi_{tskip + nu T}(L(r e))) for the section ray ``e``."""
    return _poincare(config, cont, r, T, v0).value


def _poincare(config, cont, r, T, v0):
    if not T > 0:
        raise ValueError("period must be positive")
    phi = r * np.asarray(cont.section_direction)
    ev = realize(config, phi, v0, [config.t_skip, config.t_skip + cont.nu * T])
    return dataclasses.replace(ev, value=ev.restricted[0] - ev.restricted[1])


def section_crossing(times, R, direction, near):
    """Time and ray coordinate of the section crossing closest to ``near``."""
    e = np.asarray(direction, dtype=float)
    side = R @ np.array([-e[1], e[0]])
    along = R @ e
    idx = np.flatnonzero((np.sign(side[:-1]) != np.sign(side[1:])) & (along[:-1] > 0))
    if idx.size == 0:
        raise NewtonFailure("trajectory does not cross the section")
    i = idx[np.argmin(np.abs(times[idx] - near))]
    w = side[i] / (side[i] - side[i + 1])
    return (times[i] + w * (times[i + 1] - times[i]),
            along[i] + w * (along[i + 1] - along[i]))


def return_slope(config: CoarseStepperConfig, cont: ContinuationConfig, r, T, v0,
                 sample_step=0.1) -> float:
    """Derivative of the nu-th section return in r, by central differences.

    Crossings are located near ``t_skip`` and ``t_skip + nu T`` on the
    trajectories lifted from ``(r +- fd_step) e``.
    """
    e = np.asarray(cont.section_direction)
    ops = config.ops
    p = config.params.with_v0(v0)
    offs = np.arange(-0.6 * T, 0.6 * T, sample_step)
    t1, t2 = config.t_skip, config.t_skip + cont.nu * T
    times = np.concatenate([t1 + offs, t2 + offs])
    first, last = [], []
    for rr in (r + cont.fd_step, r - cont.fd_step):
        lifted = ops.lift(rr * e).microstate
        states = model.trajectory(model.state_from_headways(lifted, p), times, p)
        R = np.array([ops.restrict(model.headways(s, p)) for s in states])
        n = len(offs)
        first.append(section_crossing(times[:n], R[:n], e, t1)[1])
        last.append(section_crossing(times[n:], R[n:], e, t2)[1])
    return (last[0] - last[1]) / (first[0] - first[1])


def periodic_orbit_problem(config: CoarseStepperConfig, cont: ContinuationConfig):
    if config.ops.dim != 2:
        raise ValueError("periodic-orbit continuation needs a two-dimensional embedding")
    G = _Cached(lambda X: _poincare(config, cont, X[0], X[1], X[2]))
    steps = [cont.fd_step, cont.fd_step_period, cont.fd_step]

    def jac(X):
        return _fd_jacobian(G, np.asarray(X, float), steps)

    return G, jac


def seed_periodic_orbit(config: CoarseStepperConfig, cont: ContinuationConfig, v0=1.05,
                        t_settle=3000.0):
    """(r, T, v0) from a settled jam: section crossings of its restricted trajectory."""
    p = config.params.with_v0(v0)
    state = model.evolve(dataset.initial_state(p, 3.0), t_settle, p)
    times = np.arange(0.0, 120.0, 0.25)
    e = np.asarray(cont.section_direction)
    normal = np.array([-e[1], e[0]])
    R = np.array([config.ops.restrict(model.headways(s, p))
                  for s in model.trajectory(state, times, p)])
    side = R @ normal
    along = R @ e
    cross = np.flatnonzero((np.sign(side[:-1]) != np.sign(side[1:])) & (along[:-1] > 0))
    if len(cross) < 2:
        raise RuntimeError("seed trajectory does not cross the section twice")
    tc, rc = [], []
    for i in cross[:2]:
        w = side[i] / (side[i] - side[i + 1])
        tc.append(times[i] + w * (times[i + 1] - times[i]))
        rc.append(along[i] + w * (along[i + 1] - along[i]))
    G, jac = periodic_orbit_problem(config, cont)
    X0 = np.array([rc[0], tc[1] - tc[0], v0])
    X, _, _ = newton(G, jac, X0, cont.newton_tol, cont.newton_max_iter,
                     extra_row=np.array([0.0, 0.0, 1.0]), extra_rhs=v0,
                     chord=cont.chord, backtrack=cont.backtrack)
    return X


def continue_periodic_orbits(config: CoarseStepperConfig, start, cont: ContinuationConfig,
                             direction=-1.0) -> Branch:
    """Continuation of ``(r, T, v0)`` solving the Poincare return condition."""
    G, jac = periodic_orbit_problem(config, cont)
    e = np.asarray(cont.section_direction)

    def make_point(X, res):
        ev = G.full(X)
        slope = return_slope(config, cont, *X)
        return BranchPoint(unknowns=X[:2].copy(), v0=float(X[2]),
                           sigma=float(model.sigma(ev.healed)), stable=bool(abs(slope) < 1),
                           newton_residual=res, extra={"period": float(X[1]),
                                                       "return_slope": float(slope)})

    def stop(point):
        r = point.unknowns[0]
        if not _within_support(config.ops, r * e):
            return "left the data support"
        if point.sigma < cont.sigma_min:
            return "reached free flow"
        return None

    return continue_branch(G, jac, np.asarray(start, float), cont.settings(),
                           direction=direction, make_point=make_point, stop=stop)


def periodic_orbit_branch(config: CoarseStepperConfig, cont: ContinuationConfig,
                          v0_start=1.05) -> Branch:
    X0 = seed_periodic_orbit(config, cont, v0_start)
    down = continue_periodic_orbits(config, X0, cont, direction=-1.0)
    up = continue_periodic_orbits(config, X0, cont, direction=+1.0)
    return join_branches(down, up)


# output

def write_branch_csv(branch: Branch, path, unknown_names, periodic=False) -> None:
    """Columns: index, v0, unknowns, sigma, T (periodic only), stable, residual, fold.

    For periodic orbits the period is written once, in the ``T`` column.
    """
    n_plain = len(unknown_names) - 1 if periodic else len(unknown_names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "v0", *unknown_names[:n_plain], "sigma"]
                   + (["T"] if periodic else []) + ["stable", "residual", "fold"])
        for i, p in enumerate(branch.points):
            row = [i, f"{p.v0:.17g}", *(f"{x:.17g}" for x in p.unknowns[:n_plain]),
                   f"{p.sigma:.17g}"]
            if periodic:
                row.append(f"{p.extra['period']:.17g}")
            row += [int(bool(p.stable)), f"{p.newton_residual:.17g}", int(p.fold)]
            w.writerow(row)


def branch_summary(branch: Branch) -> dict:
    return {
        "n_points": len(branch),
        "stop_reason": branch.stop_reason,
        "folds": [{"index": f.index, "v0": f.v0, "sigma": f.sigma} for f in branch.folds],
    }


def write_manifest(path, payload: dict) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)
        return str(o)

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, default=default)
