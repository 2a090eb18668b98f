"""Restriction (Nystrom extension) and lifting (convex interpolation) operators.

Restriction maps a headway profile to diffusion-map coordinates; lifting
maps coordinates back to a convex combination of the ``K`` dataset rows
whose embeddings lie nearest the target. When the dataset is aligned,
profiles are aligned before restriction so that restriction is invariant
under relabelling the cars.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import dmap as dm_mod
from . import model
from .dataset import Dataset, default_threads
from .dmap import DiffusionMap

log = logging.getLogger(__name__)

UNDERFLOW = 1e-300


class OutOfSupportError(ValueError):
    """Every kernel weight underflows: the profile is far from all data."""


@dataclass(frozen=True)
class LiftSettings:
    tol: float = 1e-10  # on the objective ||target - R(lift)||
    max_evaluations: int = 2000  # per restart
    warn_threshold: float = 1e-6
    vertex_logit: float = -30.0  # softmax logit of the off-vertex weights
    expand_k: int = 2  # doublings of K tried when the target is outside the hull


@dataclass(frozen=True)
class LiftResult:
    microstate: np.ndarray  # lifted headway profile
    coefficients: np.ndarray
    neighbor_indices: np.ndarray
    residual: float
    degraded: bool = False
    evaluations: int = 0


@dataclass
class OperatorPair:
    dmap: DiffusionMap
    data: Dataset
    lift_k: int | None = None
    opt_settings: LiftSettings = field(default_factory=LiftSettings)

    def __post_init__(self):
        if self.lift_k is None:
            self.lift_k = 3 if self.dmap.dim == 1 else 8
        if self.lift_k < self.dmap.dim + 1:
            raise ValueError(f"lift_k={self.lift_k} must be at least D+1={self.dmap.dim + 1}")
        if self.lift_k > len(self.data):
            raise ValueError("lift_k exceeds the number of dataset rows")
        fp = dm_mod.fingerprint(self.data.profiles, self.data.aligned)
        if fp != self.dmap.dataset_fingerprint:
            raise ValueError("diffusion map was not built on this dataset")
        self._X = np.ascontiguousarray(self.data.profiles)
        self._scaled = self.dmap.eigenvectors / self.dmap.eigenvalues

    @property
    def dim(self) -> int:
        return self.dmap.dim

    @property
    def embedding(self) -> np.ndarray:
        return self.dmap.eigenvectors

    def prepare(self, profile) -> np.ndarray:
        u = np.asarray(profile, dtype=float)
        if u.shape != (self._X.shape[1],):
            raise ValueError(f"profile must have length {self._X.shape[1]}")
        return model.align(u, self.data.anchor_index) if self.data.aligned else u

    def restrict(self, profile) -> np.ndarray:
        return restrict(self, profile)

    def lift(self, target) -> LiftResult:
        return lift(self, target)


def _nystrom(X, scaled, epsilon, u):
    d2 = np.sum((X - u) ** 2, axis=1)
    w = np.exp(-d2 / epsilon**2)
    total = w.sum()
    if not total >= UNDERFLOW:
        raise OutOfSupportError(
            f"profile lies outside the data support (kernel sum {total:.3g})")
    return (w / total) @ scaled


def restrict(ops: OperatorPair, profile) -> np.ndarray:
    """Diffusion-map coordinates of ``profile`` by Nystrom extension."""
    return _nystrom(ops._X, ops._scaled, ops.dmap.epsilon, ops.prepare(profile))


def nearest_embedded(ops: OperatorPair, target, k: int) -> np.ndarray:
    """Row indices of the ``k`` embeddings nearest ``target`` (ties by index)."""
    dist = np.linalg.norm(ops.embedding - np.asarray(target, dtype=float), axis=1)
    return np.argsort(dist, kind="stable")[:k]


def _softmax(z):
    full = np.concatenate([[0.0], z])
    e = np.exp(full - full.max())
    return e / e.sum()


def _logits(b):
    b = np.maximum(np.asarray(b, dtype=float), 1e-300)
    return np.log(b[1:] / b[0])


class _Reached(Exception):
    pass


def lift(ops: OperatorPair, target) -> LiftResult:
    """Convex combination of ``K`` nearby rows whose restriction matches ``target``.

    A degraded result (target outside what the ``K`` nearest rows can
    reach) is retried with ``2K``, ``4K``, ... rows up to
    ``opt_settings.expand_k`` times; the best result is returned.
    """
    target = np.asarray(target, dtype=float).reshape(-1)
    if target.shape != (ops.dim,) or not np.all(np.isfinite(target)):
        raise ValueError(f"target must be a finite vector of length {ops.dim}")
    K = ops.lift_k
    result = _lift(ops, target, K)
    for _ in range(ops.opt_settings.expand_k if K > 1 else 0):
        if not result.degraded or K >= len(ops._X):
            break
        K = min(2 * K, len(ops._X))
        retry = _lift(ops, target, K)
        if retry.residual < result.residual:
            result = retry
    return result


def _lift(ops: OperatorPair, target, K) -> LiftResult:
    st = ops.opt_settings
    idx = nearest_embedded(ops, target, K)
    rows = ops._X[idx]
    eps = ops.dmap.epsilon

    def objective_b(b):
        return float(np.linalg.norm(target - _nystrom(ops._X, ops._scaled, eps, b @ rows)))

    if K == 1:
        b = np.ones(1)
        return LiftResult(rows[0].copy(), b, idx, objective_b(b), False, 1)

    dist = np.linalg.norm(ops.embedding[idx] - target, axis=1)
    with np.errstate(divide="ignore"):
        inv = 1.0 / dist
    inv_b = (dist == 0).astype(float) if np.any(dist == 0) else inv / inv.sum()
    vertex = np.full(K - 1, st.vertex_logit)
    starts = [np.zeros(K - 1), vertex, np.maximum(_logits(inv_b), st.vertex_logit)]

    # a target at a row's own embedding is met by that row alone
    at_vertex = objective_b(_softmax(vertex))
    if at_vertex <= st.tol:
        return LiftResult(_softmax(vertex) @ rows, _softmax(vertex), idx, at_vertex, False, 1)

    best = (np.inf, None)
    evaluations = 1
    for z0 in starts:
        state = {"best": (np.inf, None), "n": 0}

        def f(z):
            val = objective_b(_softmax(z))
            state["n"] += 1
            if val < state["best"][0]:
                state["best"] = (val, np.array(z))
            if val <= st.tol:
                raise _Reached
            return val

        try:
            minimize(f, z0, method="Nelder-Mead",
                     options={"maxfev": st.max_evaluations, "xatol": 1e-12, "fatol": 1e-16,
                              "adaptive": K > 4})
        except _Reached:
            pass
        evaluations += state["n"]
        if state["best"][0] < best[0]:
            best = state["best"]
        if best[0] <= st.tol:
            break
    val, z = best
    b = _softmax(z)
    degraded = bool(val > st.warn_threshold)
    if degraded:
        log.debug("lift of %s degraded: residual %.3g", target, val)
    return LiftResult(b @ rows, b, idx, float(val), degraded, evaluations)


@dataclass(frozen=True)
class ValidationReport:
    embedding: np.ndarray  # (n, D) reference coordinates
    abs_error: np.ndarray
    rel_error: np.ndarray

    @property
    def mean_abs(self) -> float:
        return float(np.mean(self.abs_error))

    @property
    def mean_rel(self) -> float:
        return float(np.mean(self.rel_error))

    @property
    def max_abs(self) -> float:
        return float(np.max(self.abs_error))

    def write_csv(self, path) -> None:
        D = self.embedding.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + [f"psi{j + 1}" for j in range(D)] + ["abs_error", "rel_error"])
            for i, (e, a, r) in enumerate(zip(self.embedding, self.abs_error, self.rel_error)):
                w.writerow([i] + [f"{x:.17g}" for x in e] + [f"{a:.17g}", f"{r:.17g}"])


def _report(reference, approx) -> ValidationReport:
    reference = np.asarray(reference, dtype=float)
    diff = np.linalg.norm(np.asarray(approx) - reference, axis=1)
    norm = np.linalg.norm(reference, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(norm > 0, diff / norm, np.where(diff > 0, np.inf, 0.0))
    return ValidationReport(reference, diff, rel)


def validate_restriction_loo(data: Dataset, diffusion_map: DiffusionMap | None = None,
                             threads: int | None = None, progress=None) -> ValidationReport:
    """Leave-one-out test of restriction.

    For each row ``m`` the map is rebuilt on the other rows (same epsilon
    rule, same eigenvector indices), ``X_m`` is Nystrom-extended with the
    rebuilt map and compared with its full-map embedding. Rebuilt
    eigenvectors are signed to agree with the full ones.
    """
    X = np.ascontiguousarray(data.profiles, dtype=float)
    M = len(X)
    if M < 3:
        raise ValueError("need at least three rows")
    if diffusion_map is None:
        diffusion_map, _ = dm_mod.embed(data)
    cols = np.array(diffusion_map.selected_indices)  # 1-based, trivial pair is 0
    k = int(cols.max()) + 1
    D = dm_mod.pairwise_distances(X)
    eps = diffusion_map.epsilon
    K = dm_mod.kernel_matrix(D, eps)
    w_full, psi_full = dm_mod.top_eigenpairs(K, k)
    D2 = D**2
    tri = np.tril_indices(M - 1, k=-1)

    def one(m):
        keep = np.arange(M) != m
        Dm = D[np.ix_(keep, keep)]
        eps_m = dm_mod.EPSILON_FACTOR * float(np.median(Dm[tri]))
        Km = np.exp(-D2[np.ix_(keep, keep)] / eps_m**2)
        w, psi = dm_mod.top_eigenpairs(Km, k, guess=psi_full[keep])
        ref = psi_full[keep][:, cols]
        psi = psi[:, cols]
        signs = np.sign(np.sum(psi * ref, axis=0))
        signs[signs == 0] = 1.0
        scaled = psi * signs / w[cols]
        out = _nystrom(X[keep], scaled, eps_m, X[m])
        if progress is not None:
            progress(m)
        return out

    threads = threads or default_threads()
    if threads == 1:
        approx = [one(m) for m in range(M)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            approx = list(pool.map(one, range(M)))
    return _report(diffusion_map.eigenvectors, np.array(approx))


def validate_lift_identity(ops: OperatorPair, targets=None) -> tuple[ValidationReport, list]:
    """Errors ``||phi - R(L(phi))||`` over ``targets`` (default: the embedded dataset)."""
    targets = ops.embedding if targets is None else np.atleast_2d(np.asarray(targets, float))
    results = [lift(ops, t) for t in targets]
    approx = np.array([restrict(ops, r.microstate) for r in results])
    return _report(targets, approx), results
