import numpy as np
import pytest

from eqfreedm.continuation import (Branch, BranchPoint, ContinuationSettings, Fold,
                                   NewtonFailure, continue_branch, join_branches, newton,
                                   tangent)


def line():
    # G(phi, v0) = phi - v0: the branch is the diagonal
    return (lambda X: np.array([X[0] - X[1]]), lambda X: np.array([[1.0, -1.0]]))


def parabola():
    # v0 = 1 - phi^2: one fold at (phi, v0) = (0, 1)
    return (lambda X: np.array([X[0] ** 2 + X[1] - 1.0]),
            lambda X: np.array([[2 * X[0], 1.0]]))


def with_sigma(X, res):
    return BranchPoint(unknowns=X[:-1].copy(), v0=float(X[-1]), sigma=float(X[0]),
                       newton_residual=res)


def test_newton_scalar_and_chord():
    G = lambda X: np.array([X[0] ** 3 - 2.0])
    J = lambda X: np.array([[3 * X[0] ** 2]])
    X, res, it = newton(G, J, [1.0], 1e-13, 20)
    assert X[0] == pytest.approx(2 ** (1 / 3), abs=1e-12) and res <= 1e-13
    Xc, _, itc = newton(G, J, [1.2], 1e-12, 60, chord=True)
    assert Xc[0] == pytest.approx(2 ** (1 / 3), abs=1e-11) and itc > it


def test_newton_bordered_row():
    G, J = line()
    X, res, _ = newton(G, J, [0.3, 0.1], 1e-14, 5, extra_row=np.array([0.0, 1.0]),
                       extra_rhs=0.7)
    np.testing.assert_allclose(X, [0.7, 0.7], atol=1e-14)


def test_newton_failures():
    G = lambda X: np.array([X[0] ** 2 + 1.0])
    J = lambda X: np.array([[2 * X[0]]])
    with pytest.raises(NewtonFailure):
        newton(G, J, [1.0], 1e-10, 10)
    with pytest.raises(NewtonFailure, match="no decrease"):
        newton(G, J, [0.1], 1e-10, 10, backtrack=3)
    with pytest.raises(NewtonFailure, match="not finite"):
        newton(lambda X: np.array([np.nan]), J, [1.0], 1e-10, 10)
    with pytest.raises(NewtonFailure, match="singular"):
        newton(lambda X: np.array([1.0]), lambda X: np.zeros((1, 1)), [1.0], 1e-10, 10)


def test_tangent_orientation():
    J = np.array([[1.0, -1.0]])
    w = np.ones(2)
    t = tangent(J, w, direction=-1)
    assert t[-1] < 0 and np.sum(t * t) == pytest.approx(1.0)
    assert tangent(J, w, previous=-t) @ t < 0


def test_line_is_traced_exactly():
    G, J = line()
    s = ContinuationSettings(step_size=0.05, newton_tol=1e-12, max_steps=50,
                             v0_bounds=(-1.0, 1.0))
    br = continue_branch(G, J, np.array([0.0, 0.0]), s, direction=1.0)
    np.testing.assert_allclose(br.unknowns[:, 0], br.v0, atol=1e-12)
    assert np.all(np.diff(br.v0) > 0) and not br.folds
    assert br.stop_reason == "left parameter window"
    # every step is one arclength unit of the window
    d = np.linalg.norm(np.diff(np.c_[br.unknowns, br.v0], axis=0), axis=1)
    np.testing.assert_allclose(d, 0.05, rtol=1e-10)


def test_parabola_has_one_fold():
    G, J = parabola()
    s = ContinuationSettings(step_size=0.05, newton_tol=1e-12, max_steps=80,
                             v0_bounds=(0.0, 2.0))
    br = continue_branch(G, J, np.array([-0.8, 0.36]), s, direction=1.0,
                         make_point=with_sigma, stop=lambda p: "end" if p.sigma > 0.8 else "")
    assert len(br.folds) == 1
    f = br.folds[0]
    assert f.v0 == pytest.approx(1.0, abs=1e-3) and f.sigma == pytest.approx(0.0, abs=2e-2)
    assert br.points[f.index].fold
    assert sum(p.fold for p in br.points) == 1


def test_single_reversed_secant_is_not_a_fold():
    # v0 = phi - a bump(phi): the dip reverses exactly one secant at this step size
    a, w, c = 0.05, 0.03, 0.5

    def G(X):
        return np.array([X[0] - X[1] - a * np.exp(-((X[0] - c) / w) ** 2)])

    def J(X):
        b = np.exp(-((X[0] - c) / w) ** 2)
        return np.array([[1 + a * b * 2 * (X[0] - c) / w**2, -1.0]])

    s = ContinuationSettings(step_size=0.02, newton_tol=1e-12, max_steps=60)
    br = continue_branch(G, J, np.array([0.0, 0.0]), s, direction=1.0)
    assert np.sum(np.diff(br.v0) < 0) == 1
    assert not br.folds and not any(p.fold for p in br.points)


def test_step_halving_then_stop():
    calls = []

    def G(X):
        calls.append(X[-1])
        if X[-1] > 0.3:
            return np.array([np.nan])
        return np.array([X[0] - X[1]])

    s = ContinuationSettings(step_size=0.1, newton_tol=1e-12, max_steps=100)
    br = continue_branch(G, line()[1], np.array([0.0, 0.0]), s, direction=1.0)
    assert br.stop_reason.startswith("newton failure at minimum step")
    assert br.v0[-1] <= 0.3 and br.v0[-1] > 0.3 - 0.1 / 16 * 1.5


def test_join_branches():
    pts = [BranchPoint(np.array([float(i)]), float(i)) for i in range(4)]
    down = Branch(pts[:3], [Fold(1, 1.0, 0.0)], "a")
    up = Branch([pts[0], pts[3]], [Fold(1, 3.0, 0.0)], "b")
    j = join_branches(down, up)
    assert [p.v0 for p in j.points] == [2.0, 1.0, 0.0, 3.0]
    assert [f.index for f in j.folds] == [1, 3]
    assert j.stop_reason == "a | b"
