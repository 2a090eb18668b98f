"""Pseudo-arclength continuation with a secant predictor and Newton corrector.

Unknown vectors are laid out as ``X = (unknowns..., v0)``: the continuation
parameter is always the last entry. The residual ``G`` maps ``R^(n+1)`` to
``R^n`` and ``jac`` returns its ``n x (n+1)`` Jacobian.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


class NewtonFailure(RuntimeError):
    pass


@dataclass
class BranchPoint:
    unknowns: np.ndarray
    v0: float
    sigma: float = float("nan")
    stable: bool | None = None
    newton_residual: float = 0.0
    fold: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class Fold:
    index: int
    v0: float
    sigma: float


@dataclass
class Branch:
    points: list[BranchPoint] = field(default_factory=list)
    folds: list[Fold] = field(default_factory=list)
    stop_reason: str = ""

    def __len__(self):
        return len(self.points)

    @property
    def v0(self) -> np.ndarray:
        return np.array([p.v0 for p in self.points])

    @property
    def sigma(self) -> np.ndarray:
        return np.array([p.sigma for p in self.points])

    @property
    def stable(self) -> np.ndarray:
        return np.array([bool(p.stable) for p in self.points])

    @property
    def unknowns(self) -> np.ndarray:
        return np.array([p.unknowns for p in self.points])


@dataclass
class ContinuationSettings:
    step_size: float = 0.01
    newton_tol: float = 1e-8
    newton_max_iter: int = 12
    max_steps: int = 200
    min_step_fraction: float = 1 / 16
    v0_bounds: tuple[float, float] = (-np.inf, np.inf)
    chord: bool = False
    backtrack: int = 0


def newton(G, jac, X0, tol, max_iter, extra_row=None, extra_rhs=None,
           chord=False, backtrack=0):
    """Newton's method on ``G`` bordered by an optional linear row.

    ``extra_row``/``extra_rhs`` add the constraint ``extra_row @ X = extra_rhs``.
    With ``chord`` the Jacobian from the first iterate is reused; ``backtrack``
    allows that many step halvings while ``||G||`` fails to decrease, which
    keeps the iteration stable when ``G`` carries evaluation noise.
    Returns ``(X, ||G(X)||_inf, iterations)``.
    """
    X = np.array(X0, dtype=float)
    r = np.atleast_1d(G(X))
    res = float(np.max(np.abs(r)))
    A = None
    for it in range(max_iter + 1):
        cons = float(extra_row @ X - extra_rhs) if extra_row is not None else 0.0
        log.debug("newton %d: |G|=%.3g", it, res)
        if not np.isfinite(res):
            raise NewtonFailure("residual is not finite")
        if res <= tol and abs(cons) <= max(tol, 1e-12 * np.abs(X).max()):
            return X, res, it
        if it == max_iter:
            break
        if A is None or not chord:
            J = np.atleast_2d(jac(X))
            A = np.vstack([J, extra_row]) if extra_row is not None else J
        b = np.concatenate([r, [cons]]) if extra_row is not None else r
        try:
            dX = np.linalg.solve(A, -b)
        except np.linalg.LinAlgError as exc:
            raise NewtonFailure("singular Newton matrix") from exc
        for _ in range(backtrack + 1):
            X_new = X + dX
            r_new = np.atleast_1d(G(X_new))
            res_new = float(np.max(np.abs(r_new)))
            if res_new < res or not backtrack:
                break
            dX = dX / 2
        else:
            raise NewtonFailure(f"no decrease of |G|={res:.3g} along the Newton direction")
        X, r, res = X_new, r_new, res_new
    raise NewtonFailure(f"no convergence in {max_iter} iterations (|G|={res:.3g})")


def tangent(J, weights, previous=None, direction=None):
    """Unit tangent (in the weighted norm) to the solution curve of ``J``.

    The sign follows ``previous`` when given, else the sign of the parameter
    component follows ``direction`` (+1/-1).
    """
    n = J.shape[0]
    _, _, vt = np.linalg.svd(J)
    t = vt[n]
    t = t / np.sqrt(np.sum(weights * t * t))
    if previous is not None:
        if np.sum(weights * t * previous) < 0:
            t = -t
    elif direction is not None and np.sign(t[-1]) != np.sign(direction):
        t = -t
    return t


def continue_branch(
    G: Callable,
    jac: Callable,
    X0: np.ndarray,
    settings: ContinuationSettings,
    weights: np.ndarray | None = None,
    direction: float = 1.0,
    make_point: Callable | None = None,
    stop: Callable | None = None,
    on_accept: Callable | None = None,
    X_prev: np.ndarray | None = None,
) -> Branch:
    """Trace the curve ``G(X) = 0`` from the converged point ``X0``.

    ``make_point(X, residual)`` builds a :class:`BranchPoint`; ``stop(point)``
    ends the run when it returns a reason string; ``on_accept(X)`` is called
    after each accepted point (used to move phase anchors). ``X_prev`` seeds
    the secant; otherwise the first predictor uses the Jacobian null vector
    oriented by ``direction``.
    """
    X0 = np.asarray(X0, dtype=float)
    if weights is None:
        weights = np.ones_like(X0)
    if make_point is None:
        def make_point(X, res):
            return BranchPoint(unknowns=X[:-1].copy(), v0=float(X[-1]), newton_residual=res)

    r0 = float(np.max(np.abs(np.atleast_1d(G(X0)))))
    if r0 > settings.newton_tol:
        # polish at fixed v0
        X0, r0, _ = newton(G, jac, X0, settings.newton_tol, settings.newton_max_iter,
                           extra_row=np.eye(len(X0))[-1], extra_rhs=X0[-1],
                           chord=settings.chord, backtrack=settings.backtrack)
    branch = Branch()
    branch.points.append(make_point(X0, r0))
    if on_accept is not None:
        on_accept(X0)

    if X_prev is not None:
        d = X0 - X_prev
        T = d / np.sqrt(np.sum(weights * d * d))
    else:
        T = tangent(np.atleast_2d(jac(X0)), weights, direction=direction)

    X = X0
    s = settings.step_size
    s_min = settings.step_size * settings.min_step_fraction
    lo, hi = settings.v0_bounds
    pending = None  # fold awaiting confirmation by the next secant
    while len(branch.points) <= settings.max_steps:
        X_pred = X + s * T
        row = weights * T
        try:
            X_new, res, _ = newton(G, jac, X_pred, settings.newton_tol,
                                   settings.newton_max_iter, extra_row=row,
                                   extra_rhs=row @ X_pred, chord=settings.chord,
                                   backtrack=settings.backtrack)
        except NewtonFailure as exc:
            log.debug("corrector failed at s=%g: %s", s, exc)
            if s / 2 >= s_min * (1 - 1e-12):
                s /= 2
                log.debug("corrector failed (%s); halving step to %g", exc, s)
                continue
            branch.stop_reason = f"newton failure at minimum step: {exc}"
            break
        d = X_new - X
        dist = np.sqrt(np.sum(weights * d * d))
        if dist > 1.6 * s or dist < 0.4 * s:
            # corrector jumped along or across the curve
            log.debug("corrector step %.3g outside the window for s=%g", dist, s)
            if s / 2 >= s_min * (1 - 1e-12):
                s /= 2
                continue
            branch.stop_reason = "corrector left the arclength window at minimum step"
            break
        T_new = d / dist
        point = make_point(X_new, res)
        if T[-1] * T_new[-1] < 0:
            if pending is not None:
                # the parameter direction flipped straight back: noise, not a fold
                branch.points[pending[0]].fold = False
                pending = None
            else:
                branch.points[-1].fold = True
                pending = (len(branch.points) - 1, _locate_fold(branch, X, point))
        elif pending is not None:
            branch.folds.append(pending[1])
            pending = None
        branch.points.append(point)
        if on_accept is not None:
            on_accept(X_new)
        X, T = X_new, T_new
        s = min(settings.step_size, 2 * s)
        if not (lo <= X[-1] <= hi):
            branch.stop_reason = "left parameter window"
            break
        if stop is not None:
            reason = stop(point)
            if reason:
                branch.stop_reason = reason
                break
    else:
        branch.stop_reason = "max_steps reached"
    if pending is not None:
        branch.folds.append(pending[1])
    return branch


def join_branches(down: Branch, up: Branch) -> Branch:
    """One branch from two runs leaving the same start point in opposite directions.

    ``down`` is reversed so the result is ordered by arclength.
    """
    n = len(down.points)
    points = down.points[::-1] + up.points[1:]
    folds = [Fold(n - 1 - f.index, f.v0, f.sigma) for f in down.folds]
    folds += [Fold(n - 1 + f.index, f.v0, f.sigma) for f in up.folds]
    return Branch(points, folds, f"{down.stop_reason} | {up.stop_reason}")


def _locate_fold(branch: Branch, X_mid, point_after) -> Fold:
    """Parabolic fit of (v0, sigma) against arclength through three points."""
    pts = branch.points[-2:] + [point_after] if len(branch.points) >= 2 else None
    k = len(branch.points) - 1
    if pts is None or len(pts) < 3:
        p = branch.points[-1]
        return Fold(k, p.v0, p.sigma)
    xs = [np.concatenate([q.unknowns, [q.v0]]) for q in pts]
    s = np.array([0.0, np.linalg.norm(xs[1] - xs[0]),
                  np.linalg.norm(xs[1] - xs[0]) + np.linalg.norm(xs[2] - xs[1])])
    v = np.array([q.v0 for q in pts])
    sg = np.array([q.sigma for q in pts])
    cv = np.polyfit(s, v, 2)
    if cv[0] == 0:
        return Fold(k, float(v[1]), float(sg[1]))
    s_star = float(np.clip(-cv[1] / (2 * cv[0]), s[0], s[2]))
    v_star = float(np.polyval(cv, s_star))
    if np.all(np.isfinite(sg)):
        sg_star = float(np.polyval(np.polyfit(s, sg, 2), s_star))
    else:
        sg_star = float("nan")
    return Fold(k, v_star, sg_star)
