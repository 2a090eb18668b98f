import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from eqfreedm import dmap
from eqfreedm.dmap import DegenerateDataError


def distance_oracle(X):
    M = len(X)
    D = np.zeros((M, M))
    for i in range(M):
        for j in range(M):
            D[i, j] = np.sqrt(sum((a - b) ** 2 for a, b in zip(X[i], X[j])))
    return D


def markov_oracle(D, eps):
    M = len(D)
    out = np.zeros((M, M))
    for i in range(M):
        row = [np.exp(-(D[i, j] / eps) ** 2) for j in range(M)]
        total = sum(row)
        out[i] = [r / total for r in row]
    return out


def spectrum_oracle(markov):
    # dense nonsymmetric solve, independent of the symmetric conjugation
    w, v = np.linalg.eig(markov)
    order = np.argsort(-w.real)
    w, v = w.real[order], v.real[:, order]
    v = v / np.linalg.norm(v, axis=0)
    for k in range(v.shape[1]):
        i = np.argmax(np.abs(v[:, k]))
        v[:, k] *= np.sign(v[i, k])
    return w, v


def local_fit_oracle(prev, cand, eps):
    prev = prev.reshape(len(cand), -1)
    M = len(cand)
    res = np.empty(M)
    for i in range(M):
        others = np.arange(M) != i
        w = np.exp(-np.sum((prev[others] - prev[i]) ** 2, axis=1) / eps**2)
        A = np.c_[np.ones(M - 1), prev[others] - prev[i]]
        sw = np.sqrt(w)
        coef = np.linalg.lstsq(A * sw[:, None], cand[others] * sw, rcond=None)[0]
        res[i] = cand[i] - coef[0]
    return np.sqrt(np.sum(res**2) / np.sum(cand**2))


# examples

def test_distance_examples():
    D = dmap.pairwise_distances([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    assert D[0, 1] == 0.0
    D = dmap.pairwise_distances(np.eye(2))
    assert D[0, 1] == pytest.approx(np.sqrt(2), abs=1e-15)
    with pytest.raises(ValueError):
        dmap.pairwise_distances([[1.0, 2.0]])


def test_distances_match_oracle():
    X = np.random.default_rng(1).standard_normal((3, 30))
    np.testing.assert_allclose(dmap.pairwise_distances(X), distance_oracle(X), atol=1e-12)
    X = np.random.default_rng(2).standard_normal((12, 7))
    np.testing.assert_allclose(dmap.pairwise_distances(X), distance_oracle(X), atol=1e-10)


def test_select_epsilon_examples():
    c = np.full((4, 4), 3.0) - 3.0 * np.eye(4)
    assert dmap.select_epsilon(c) == 15.0
    d3 = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], float)
    assert dmap.select_epsilon(d3) == 10.0
    # four distances {1, 2, 3, 4}: even-count median is the midpoint
    vals = np.array([1.0, 2.0, 3.0, 4.0])
    assert 5 * np.median(vals) == 12.5
    d4 = np.zeros((4, 4))
    d4[np.tril_indices(4, -1)] = [1, 2, 3, 4, 4, 4]
    d4 = d4 + d4.T
    assert dmap.select_epsilon(d4) == 5 * 3.5
    with pytest.raises(DegenerateDataError):
        dmap.select_epsilon(np.zeros((3, 3)))


def test_markov_examples():
    np.testing.assert_allclose(dmap.markov_matrix(np.zeros((2, 2)), 1.0), 0.5)
    far = dmap.markov_matrix(np.array([[0, 50.0], [50.0, 0]]), 1.0)
    np.testing.assert_allclose(far, np.eye(2), atol=1e-300)
    D = dmap.pairwise_distances(np.random.default_rng(3).standard_normal((3, 4)))
    np.testing.assert_allclose(dmap.markov_matrix(D, 2.0), markov_oracle(D, 2.0), atol=1e-14)


def test_markov_matches_oracle_larger():
    D = dmap.pairwise_distances(np.random.default_rng(4).standard_normal((9, 5)))
    eps = dmap.select_epsilon(D)
    np.testing.assert_allclose(dmap.markov_matrix(D, eps), markov_oracle(D, eps), atol=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_spectrum_m4_matches_dense_oracle(seed):
    X = np.random.default_rng(seed).standard_normal((4, 3))
    D = dmap.pairwise_distances(X)
    P = dmap.markov_matrix(D, dmap.select_epsilon(D) / 4)
    lam, psi = dmap.spectrum(P, 3)
    w, v = spectrum_oracle(P)
    assert w[0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(lam, w[1:], atol=1e-10)
    np.testing.assert_allclose(psi, v[:, 1:], atol=1e-10)


def test_spectrum_hand_built_m4():
    K = np.array([[1.0, 0.5, 0.2, 0.1],
                  [0.5, 1.0, 0.4, 0.2],
                  [0.2, 0.4, 1.0, 0.6],
                  [0.1, 0.2, 0.6, 1.0]])
    P = K / K.sum(axis=1, keepdims=True)
    lam, psi = dmap.spectrum(P, 3, degrees=K.sum(axis=1))
    w, v = spectrum_oracle(P)
    np.testing.assert_allclose(lam, w[1:], atol=1e-10)
    np.testing.assert_allclose(psi, v[:, 1:], atol=1e-10)
    lam2, psi2 = dmap.spectrum(P, 3)  # degrees inferred from detailed balance
    np.testing.assert_allclose(lam2, lam, atol=1e-12)
    np.testing.assert_allclose(psi2, psi, atol=1e-12)


def test_spectrum_trivial_pair_and_range():
    X = np.random.default_rng(5).standard_normal((20, 4))
    D = dmap.pairwise_distances(X)
    K = dmap.kernel_matrix(D, dmap.select_epsilon(D) / 5)
    q = K.sum(axis=1)
    lam, psi = dmap.spectrum(K / q[:, None], 5, degrees=q)
    assert np.all((lam > 0) & (lam < 1))
    assert np.all(np.diff(lam) <= 0)
    w, v = dmap.top_eigenpairs(K, 3)
    assert w[0] == pytest.approx(1.0, abs=1e-12)
    assert np.ptp(v[:, 0]) < 1e-12
    with pytest.raises(ValueError):
        dmap.spectrum(K / q[:, None], 20)


def test_local_fit_matches_oracle():
    rng = np.random.default_rng(6)
    prev = rng.standard_normal((40, 2))
    cand = np.sin(prev[:, 0]) + 0.3 * rng.standard_normal(40)
    assert dmap.local_fit_residual(prev, cand, 0.7) == pytest.approx(
        local_fit_oracle(prev, cand, 0.7), rel=1e-10)


def test_affine_candidate_has_zero_residual():
    t = np.linspace(-1, 1, 50)
    assert dmap.local_fit_residual(t, 0.3 + 2.0 * t, 0.2) <= 1e-8


def test_singular_fit_reports_zero():
    prev = np.zeros(10)
    with pytest.warns(RuntimeWarning):
        assert dmap.local_fit_residual(prev, np.arange(10.0), 0.5) == 0.0


def test_selection_on_a_curve_keeps_one_coordinate():
    # a closed loop's harmonics: psi_2.. are functions of (psi_1, psi_2)
    t = np.linspace(0, 1, 200, endpoint=False)
    X = np.c_[t, 0.01 * np.sin(6 * np.pi * t)]
    dm, rep = dmap.embed(X, max_candidates=8)
    assert rep.residuals[0] == 1.0
    assert rep.selected == (1,)
    assert np.all(rep.residuals <= 1 + 1e-6)


def test_selection_of_a_rectangle_keeps_two():
    g = np.linspace(0, 1, 25)
    X = np.array([(a, 0.6 * b) for a in g for b in np.linspace(0, 1, 16)])
    _, rep = dmap.embed(X, max_candidates=10)
    assert len(rep.selected) == 2
    assert rep.selected[0] == 1


def test_embed_degenerate():
    with pytest.raises(DegenerateDataError):
        dmap.embed(np.ones((5, 3)))


def test_embed_save_load(tmp_path):
    X = np.random.default_rng(7).standard_normal((30, 4))
    dm, rep = dmap.embed(X, max_candidates=6, dimension=2)
    dmap.save(dm, rep, tmp_path / "e.csv")
    dm2, rep2 = dmap.load(tmp_path / "e.csv")
    np.testing.assert_array_equal(dm2.eigenvectors, dm.eigenvectors)
    np.testing.assert_array_equal(dm2.eigenvalues, dm.eigenvalues)
    assert dm2.selected_indices == dm.selected_indices
    assert dm2.dataset_fingerprint == dm.dataset_fingerprint
    np.testing.assert_array_equal(rep2.residuals, rep.residuals)


def test_top_eigenpairs_warm_start_agrees():
    X = np.random.default_rng(8).standard_normal((60, 5))
    D = dmap.pairwise_distances(X)
    K = dmap.kernel_matrix(D, dmap.select_epsilon(D) / 3)
    w, v = dmap.top_eigenpairs(K, 4)
    w2, v2 = dmap.top_eigenpairs(K, 4, guess=v + 1e-3)
    np.testing.assert_allclose(w2, w, atol=1e-10)
    np.testing.assert_allclose(np.abs(v2), np.abs(v), atol=1e-8)


# properties on small random instances

small = st.integers(4, 12).flatmap(
    lambda m: arrays(np.float64, (m, 5), elements=st.floats(-3, 3, allow_subnormal=False)))


def _nondegenerate(X):
    D = dmap.pairwise_distances(X)
    return np.all(D[np.triu_indices(len(X), 1)] > 1e-3)


@settings(max_examples=40, deadline=None)
@given(small, st.floats(0.2, 5.0))
def test_markov_row_stochastic(X, factor):
    D = dmap.pairwise_distances(X)
    if not np.any(D > 0):
        return
    P = dmap.markov_matrix(D, factor * np.median(D[D > 0]))
    assert np.max(np.abs(P.sum(axis=1) - 1)) <= 1e-12
    np.testing.assert_allclose(D, D.T)
    assert np.all(np.diag(D) == 0)


@settings(max_examples=30, deadline=None)
@given(small, st.data())
def test_spectrum_permutation_equivariant(X, data):
    if not _nondegenerate(X):
        return
    perm = np.array(data.draw(st.permutations(range(len(X)))))
    D = dmap.pairwise_distances(X)
    eps = dmap.select_epsilon(D)
    k = min(3, len(X) - 1)
    K = dmap.kernel_matrix(D, eps)
    lam, psi = dmap.spectrum(K / K.sum(1, keepdims=True), k, degrees=K.sum(1))
    Kp = dmap.kernel_matrix(dmap.pairwise_distances(X[perm]), eps)
    lam_p, psi_p = dmap.spectrum(Kp / Kp.sum(1, keepdims=True), k, degrees=Kp.sum(1))
    np.testing.assert_allclose(lam_p, lam, atol=1e-10)
    gaps = np.abs(np.diff(np.r_[1.0, lam, 0.0]))
    for j in range(k):
        if min(gaps[j], gaps[j + 1]) > 1e-6:  # simple eigenvalue: vector defined up to sign
            a, b = psi_p[:, j], psi[perm, j]
            assert min(np.abs(a - b).max(), np.abs(a + b).max()) <= 1e-6 / min(gaps[j], gaps[j + 1])


@settings(max_examples=30, deadline=None)
@given(small)
def test_spectral_residual(X):
    if not _nondegenerate(X):
        return
    D = dmap.pairwise_distances(X)
    P = dmap.markov_matrix(D, dmap.select_epsilon(D))
    k = min(3, len(X) - 1)
    lam, psi = dmap.spectrum(P, k)
    assert np.max(np.abs(P @ psi - psi * lam)) <= 1e-10
    np.testing.assert_allclose(np.linalg.norm(psi, axis=0), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(small, arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_translation_invariance(X, shift):
    if not _nondegenerate(X):
        return
    a, _ = dmap.embed(X, max_candidates=min(3, len(X) - 1), dimension=1)
    b, _ = dmap.embed(X + shift, max_candidates=min(3, len(X) - 1), dimension=1)
    assert a.epsilon == pytest.approx(b.epsilon, rel=1e-12)
    np.testing.assert_allclose(a.eigenvectors, b.eigenvectors, atol=1e-8)


def test_selection_report_bounds(raw_data):
    _, rep = dmap.embed(raw_data)
    assert rep.residuals[0] == 1.0
    assert np.all((rep.residuals >= 0) & (rep.residuals <= 1 + 1e-6))
