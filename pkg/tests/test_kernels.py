import numpy as np
import pytest

from eqfreedm import _kernels_py as py
from eqfreedm._backend import BACKEND

cy = pytest.importorskip("eqfreedm._kernels")

L, A, H = 60.0, 1.7, 2.4


def ring_state(seed=0, n=30):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, L, n))
    y = rng.uniform(0.5, 1.5, n)
    return np.concatenate([x, y])


def test_default_backend_is_compiled():
    assert BACKEND == "cython"


def test_ov_rhs_oracle():
    # direct loop over cars
    z = ring_state()
    n = 30
    expect = np.empty(2 * n)
    for i in range(n):
        d = (z[(i + 1) % n] - z[i]) % L
        expect[i] = z[n + i]
        expect[n + i] = A * (1.02 * (np.tanh(d - H) + np.tanh(H)) - z[n + i])
    np.testing.assert_allclose(py.ov_rhs(z, L, A, H, 1.02), expect, atol=1e-14)
    np.testing.assert_allclose(cy.ov_rhs(z, L, A, H, 1.02), expect, atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_integrators_agree(seed):
    z = ring_state(seed)
    t = np.array([0.0, 0.5, 10.0, 50.0])
    a, nfa, ta, sa = py.integrate_ov(z, t, L, A, H, 1.0, 1e-10, 1e-10)
    b, nfb, tb, sb = cy.integrate_ov(z, t, L, A, H, 1.0, 1e-10, 1e-10)
    assert sa == sb == 0 and ta == tb == 50.0
    assert nfa == nfb
    np.testing.assert_allclose(a, b, atol=1e-10)
    np.testing.assert_array_equal(a[0], z)


def test_integrator_accuracy_on_free_flow():
    # uniform flow moves rigidly at V(L/N)
    n = 30
    x = np.arange(n) * L / n
    v = 1.0 * (np.tanh(2.0 - H) + np.tanh(H))
    z = np.concatenate([x, np.full(n, v)])
    out, *_ = cy.integrate_ov(z, np.array([7.0]), L, A, H, 1.0, 1e-10, 1e-10)
    np.testing.assert_allclose(out[0, :n], x + 7.0 * v, atol=1e-9)


def test_step_budget_status():
    z = ring_state()
    t = np.array([100.0])
    for k in (py, cy):
        samples, _, t_reached, status = k.integrate_ov(z, t, L, A, H, 1.0, 1e-10, 1e-10,
                                                      max_steps=5)
        assert status == 2 and len(samples) == 0 and t_reached < 100.0


def test_local_fit_residuals_agree():
    rng = np.random.default_rng(3)
    Psi = rng.standard_normal((80, 2))
    target = Psi[:, 0] ** 2 + 0.1 * rng.standard_normal(80)
    a, na = py.local_fit_residuals(Psi, target, 0.7)
    b, nb = cy.local_fit_residuals(Psi, target, 0.7)
    assert na == nb
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_local_fit_residual_oracle():
    # leave-one-out weighted least squares solved with lstsq
    rng = np.random.default_rng(4)
    Psi = rng.standard_normal((12, 1))
    target = rng.standard_normal(12)
    eps = 0.9
    expect = np.empty(12)
    for m in range(12):
        w = np.exp(-((Psi[:, 0] - Psi[m, 0]) ** 2) / eps**2)
        w[m] = 0.0
        Z = np.c_[np.ones(12), Psi]
        sw = np.sqrt(w)
        coef = np.linalg.lstsq(sw[:, None] * Z, sw * target, rcond=None)[0]
        expect[m] = target[m] - Z[m] @ coef
    for k in (py, cy):
        out, ns = k.local_fit_residuals(Psi, target, eps)
        assert ns == 0
        np.testing.assert_allclose(out, expect, atol=1e-10)
