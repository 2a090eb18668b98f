"""Diffusion-map embedding and local-linear-fit eigenvector selection.

The Markov matrix ``M = Q^-1 K`` (Gaussian kernel ``K``, row sums ``Q``) is
similar to the symmetric ``Q^-1/2 K Q^-1/2``; eigenpairs are computed on the
symmetric form and mapped back, which keeps the spectrum real. Eigenvectors
are scaled to unit Euclidean norm and signed so that their largest-magnitude
component is positive.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import eigh
from scipy.spatial.distance import pdist, squareform

from ._backend import kernels

log = logging.getLogger(__name__)

EPSILON_FACTOR = 5.0


class DegenerateDataError(ValueError):
    """All pairwise distances vanish; no kernel scale can be chosen."""


@dataclass(frozen=True)
class DiffusionMap:
    epsilon: float
    eigenvalues: np.ndarray  # selected, descending
    eigenvectors: np.ndarray  # (M, D), columns psi_j
    selected_indices: tuple[int, ...]  # 1-based among nontrivial eigenvectors
    dataset_fingerprint: str
    candidate_eigenvalues: np.ndarray
    fit_epsilon: np.ndarray  # local-fit width used for each r_j (nan for r_1)

    @property
    def dim(self) -> int:
        return len(self.selected_indices)

    @property
    def coordinates(self) -> np.ndarray:
        """Embedding of the data rows, shape (M, D)."""
        return self.eigenvectors


@dataclass(frozen=True)
class SelectionReport:
    residuals: np.ndarray  # r_1, r_2, ... (r_1 = 1)
    selected: tuple[int, ...]
    threshold: float
    fit_epsilon: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.selected)


def fingerprint(profiles, aligned=False) -> str:
    h = hashlib.sha256()
    a = np.ascontiguousarray(profiles, dtype=np.float64)
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    h.update(b"aligned" if aligned else b"raw")
    return h.hexdigest()[:16]


def pairwise_distances(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("need at least two rows")
    return squareform(pdist(X, "euclidean"))


def select_epsilon(distances, factor=EPSILON_FACTOR) -> float:
    """``factor`` times the median of the strictly lower-triangular distances."""
    d = np.asarray(distances)
    vals = d[np.tril_indices(d.shape[0], k=-1)]
    if vals.size == 0 or not np.any(vals > 0):
        raise DegenerateDataError("all pairwise distances are zero")
    return factor * float(np.median(vals))


def kernel_matrix(distances, epsilon) -> np.ndarray:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    d = np.asarray(distances, dtype=float)
    return np.exp(-(d / epsilon) ** 2)


def markov_matrix(distances, epsilon) -> np.ndarray:
    K = kernel_matrix(distances, epsilon)
    return K / K.sum(axis=1, keepdims=True)


def _symmetric_form(markov, degrees=None):
    M = np.asarray(markov, dtype=float)
    if degrees is None:
        # detailed balance q_i M_ij = q_j M_ji fixes q up to scale
        if np.any(M[0] <= 0) or np.any(M[:, 0] <= 0):
            raise ValueError("cannot infer degrees from a Markov matrix with zero entries; "
                             "pass degrees")
        degrees = M[0] / M[:, 0]
    sq = np.sqrt(np.asarray(degrees, dtype=float))
    S = sq[:, None] * M / sq[None, :]
    return 0.5 * (S + S.T), sq


def spectrum(markov, n_eigs: int, degrees=None):
    """Leading ``n_eigs`` nontrivial eigenpairs of a reversible Markov matrix.

    ``degrees`` are the kernel row sums (inferred from ``markov`` when
    omitted). Returns ``(eigenvalues, eigenvectors)``, descending, with the
    trivial pair (1, constant) dropped.
    """
    M = np.asarray(markov)
    n = M.shape[0]
    if not 0 < n_eigs < n:
        raise ValueError(f"need 0 < n_eigs < M, got n_eigs={n_eigs}, M={n}")
    S, sq = _symmetric_form(M, degrees)
    try:
        w, v = eigh(S, subset_by_index=[n - n_eigs - 1, n - 1])
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver did not converge: {exc}") from exc
    w, v = w[::-1], v[:, ::-1]
    psi = v / sq[:, None]
    psi = _normalize(psi)
    if abs(w[0] - 1.0) > 1e-8:
        warnings.warn(f"leading eigenvalue {w[0]!r} differs from 1", RuntimeWarning)
    return w[1:], psi[:, 1:]


def _normalize(psi):
    psi = psi / np.linalg.norm(psi, axis=0)
    idx = np.argmax(np.abs(psi), axis=0)
    signs = np.sign(psi[idx, np.arange(psi.shape[1])])
    signs[signs == 0] = 1.0
    return psi * signs


def default_fit_epsilon(previous) -> float:
    """Median pairwise distance in the preceding eigenvector coordinates, over 3."""
    d = pdist(np.asarray(previous, dtype=float).reshape(len(previous), -1))
    med = float(np.median(d))
    return med / 3.0 if med > 0 else 1.0


def local_fit_residual(previous, candidate, epsilon):
    """r_j of ``candidate`` against the columns of ``previous`` (leave-one-out)."""
    previous = np.ascontiguousarray(np.reshape(previous, (len(candidate), -1)), dtype=float)
    candidate = np.ascontiguousarray(candidate, dtype=float)
    res, n_singular = kernels.local_fit_residuals(previous, candidate, float(epsilon))
    if n_singular:
        warnings.warn(f"{n_singular} singular local fits; r_j reported as 0", RuntimeWarning)
        return 0.0
    return float(np.sqrt(np.sum(res**2) / np.sum(candidate**2)))


def select_eigenvectors(eigenvectors, epsilon=None, max_candidates=20, threshold=0.5,
                        patience=3) -> SelectionReport:
    """Recursive selection by local linear fits.

    Candidate ``j`` is fitted against all preceding candidates with Gaussian
    weights of width ``epsilon``; when ``epsilon`` is None the width is
    :func:`default_fit_epsilon` of those predecessors, recomputed for every
    ``j``. A candidate is kept when ``r_j >= threshold``; the scan ends after
    ``patience`` consecutive residuals below the threshold.
    """
    psi = np.asarray(eigenvectors, dtype=float)
    if max_candidates > psi.shape[1]:
        raise ValueError("max_candidates exceeds the number of eigenvectors")
    residuals, scales = [1.0], [np.nan]
    below = 0
    for j in range(1, max_candidates):
        fe = default_fit_epsilon(psi[:, :j]) if epsilon is None else float(epsilon)
        r = local_fit_residual(psi[:, :j], psi[:, j], fe)
        residuals.append(r)
        scales.append(fe)
        below = below + 1 if r < threshold else 0
        if below >= patience:
            break
    residuals = np.array(residuals)
    selected = tuple(int(j + 1) for j in np.flatnonzero(residuals >= threshold))
    return SelectionReport(residuals, selected, threshold, np.array(scales))


def embed(data, epsilon=None, max_candidates=20, threshold=0.5, fit_epsilon=None,
          dimension=None):
    """Diffusion map of a dataset (or an (M, N) array of profiles).

    ``fit_epsilon`` fixes the weight width of the local fits (default: the
    per-candidate :func:`default_fit_epsilon`);
    ``dimension`` forces the first ``dimension`` eigenvectors instead of
    the selection result.
    """
    profiles = getattr(data, "profiles", data)
    aligned = bool(getattr(data, "aligned", False))
    D = pairwise_distances(profiles)
    eps = select_epsilon(D) if epsilon is None else float(epsilon)
    K = kernel_matrix(D, eps)
    q = K.sum(axis=1)
    n_eigs = min(max_candidates, len(profiles) - 1)
    lam, psi = spectrum(K / q[:, None], n_eigs, degrees=q)
    report = select_eigenvectors(psi, fit_epsilon, min(max_candidates, n_eigs), threshold)
    chosen = report.selected if dimension is None else tuple(range(1, dimension + 1))
    if not chosen:
        raise ValueError("no eigenvector selected")
    cols = [j - 1 for j in chosen]
    dm = DiffusionMap(eps, lam[cols].copy(), psi[:, cols].copy(), tuple(chosen),
                      fingerprint(profiles, aligned), lam.copy(), report.fit_epsilon)
    log.info("diffusion map: eps=%.4g, selected %s, r=%s", eps, chosen,
             np.round(report.residuals, 3))
    return dm, report


def top_eigenpairs(K, k, guess=None, tol=1e-12, max_iter=500):
    """Top ``k`` eigenpairs of the Markov matrix of kernel ``K`` (trivial pair included).

    Warm-started subspace iteration on the symmetric form, used for the many
    near-identical rebuilds of leave-one-out validation; falls back to a
    dense solve when it stalls.
    """
    q = K.sum(axis=1)
    sq = np.sqrt(q)
    S = K / sq[:, None] / sq[None, :]
    n = S.shape[0]
    if guess is None or k + 2 >= n:
        w, v = eigh(S, subset_by_index=[n - k, n - 1])
        w, v = w[::-1], v[:, ::-1]
    else:
        p = min(n, k + 4)
        V = np.zeros((n, p))
        V[:, : guess.shape[1]] = guess * sq[:, None]
        rng = np.random.default_rng(0)
        V[:, guess.shape[1]:] = rng.standard_normal((n, p - guess.shape[1]))
        V, _ = np.linalg.qr(V)
        for _ in range(max_iter):
            W = S @ V
            H = V.T @ W
            w, y = np.linalg.eigh(0.5 * (H + H.T))
            w, y = w[::-1], y[:, ::-1]
            V = W @ y
            V, _ = np.linalg.qr(V)
            Vk = V[:, :k]
            R = S @ Vk - Vk * (Vk.T @ S @ Vk).diagonal()
            if np.abs(R).max() <= tol:
                break
        else:
            w, v = eigh(S, subset_by_index=[n - k, n - 1])
            w, v = w[::-1], v[:, ::-1]
            return w, _normalize(v / sq[:, None])
        Vk = V[:, :k]
        w = (Vk.T @ S @ Vk).diagonal()
        v = Vk
    return w[:k], _normalize(v[:, :k] / sq[:, None])


def save(dm: DiffusionMap, report: SelectionReport, path) -> None:
    """Eigenvectors as CSV at ``path``; header JSON beside it."""
    path = Path(path)
    np.savetxt(path, dm.eigenvectors, fmt="%.17g", delimiter=",")
    header = {
        "epsilon": dm.epsilon,
        "eigenvalues": dm.eigenvalues.tolist(),
        "selected_indices": list(dm.selected_indices),
        "fingerprint": dm.dataset_fingerprint,
        "candidate_eigenvalues": dm.candidate_eigenvalues.tolist(),
        "fit_epsilon": [None if np.isnan(x) else x for x in dm.fit_epsilon],
        "residuals": report.residuals.tolist(),
        "threshold": report.threshold,
        "dimension": dm.dim,
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=1))


def load(path):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    vecs = np.loadtxt(path, delimiter=",", ndmin=2)
    fit = np.array([np.nan if x is None else x for x in header["fit_epsilon"]])
    dm = DiffusionMap(header["epsilon"], np.array(header["eigenvalues"]), vecs,
                      tuple(header["selected_indices"]), header["fingerprint"],
                      np.array(header["candidate_eigenvalues"]), fit)
    rep = SelectionReport(np.array(header["residuals"]), tuple(header["selected_indices"]),
                          header["threshold"], fit)
    return dm, rep
