import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from dualocp.conic import SdpProblem, smat, solve, svec, svec_index, svec_len


def _psd_row(n, i, j, val=1.0):
    a = np.zeros(svec_len(n))
    a[svec_index(n, i, j)] = val
    return a


def test_scalar_lower_bound():
    # min x s.t. x - s = 1, s >= 0
    p = SdpProblem(c=[1, 0], A=sp.csr_matrix([[1, -1]]), b=[1], n_free=1, n_nonneg=1)
    s = solve(p)
    assert s.status == "optimal"
    assert s.x[0] == pytest.approx(1.0, abs=1e-7)


def test_trace_minimization():
    n = 3
    p = SdpProblem(c=svec(np.eye(n)), A=sp.csr_matrix(_psd_row(n, 0, 0)[None]), b=[2], psd_sizes=[n])
    s = solve(p)
    assert s.status == "optimal"
    assert s.objective == pytest.approx(2.0, abs=1e-6)
    np.testing.assert_allclose(smat(s.x, n), np.diag([2.0, 0, 0]), atol=1e-5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lambda_max(seed):
    rng = np.random.default_rng(seed)
    n = 4
    S = rng.normal(size=(n, n))
    S = S + S.T
    k = svec_len(n)
    A = np.zeros((k, 1 + k))
    A[:, 0] = svec(np.eye(n))
    A[:, 1:] = -np.eye(k)
    p = SdpProblem(c=np.r_[1.0, np.zeros(k)], A=sp.csr_matrix(A), b=svec(S), n_free=1, psd_sizes=[n])
    s = solve(p)
    assert s.status == "optimal"
    assert s.objective == pytest.approx(np.linalg.eigvalsh(S)[-1], abs=1e-6)


def test_infeasible_lp():
    s = solve(SdpProblem(c=[0], A=sp.csr_matrix([[1.0]]), b=[-1], n_nonneg=1))
    assert s.status == "infeasible"
    assert s.certificate is not None


def test_unbounded_lp():
    s = solve(SdpProblem(c=[-1, 0], A=sp.csr_matrix([[0, 1.0]]), b=[1], n_nonneg=2))
    assert s.status == "unbounded"


def test_infeasible_psd():
    p = SdpProblem(c=np.zeros(3), A=sp.csr_matrix(_psd_row(2, 0, 0)[None]), b=[-1], psd_sizes=[2])
    assert solve(p).status == "infeasible"


def test_no_rows():
    p = SdpProblem(c=np.zeros(3), A=sp.csr_matrix((0, 3)), b=np.zeros(0), psd_sizes=[2])
    s = solve(p)
    assert s.status == "optimal" and s.objective == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_random_lp_against_linprog(seed):
    rng = np.random.default_rng(seed)
    m, n = 4, 9
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(0.5, 1.5, size=n)
    b = A @ x0
    c = rng.uniform(0.1, 2.0, size=n)  # positive cost keeps the LP bounded
    ref = linprog(c, A_eq=A, b_eq=b, bounds=[(0, None)] * n, method="highs")
    s = solve(SdpProblem(c=c, A=sp.csr_matrix(A), b=b, n_nonneg=n))
    assert s.status == "optimal"
    assert s.objective == pytest.approx(ref.fun, rel=1e-6, abs=1e-7)


def test_free_variables_eliminated():
    # min x1 + 2 x2 with x1 - y = 1, x2 - w = -3, y, w >= 0 (x free)
    A = sp.csr_matrix([[1, 0, -1, 0], [0, 1, 0, -1]])
    s = solve(SdpProblem(c=[1, 2, 0, 0], A=A, b=[1, -3], n_free=2, n_nonneg=2))
    assert s.status == "optimal"
    np.testing.assert_allclose(s.x[:2], [1, -3], atol=1e-7)


def test_tolerance_validated():
    p = SdpProblem(c=[1.0], A=sp.csr_matrix([[1.0]]), b=[1.0], n_nonneg=1)
    with pytest.raises(ValueError):
        solve(p, tol=1.0)


def test_dimension_checks():
    with pytest.raises(ValueError):
        SdpProblem(c=[1.0, 2.0], A=sp.csr_matrix([[1.0]]), b=[1.0], n_nonneg=1)


def test_text_round_trip():
    p = SdpProblem(c=[1, 0, 0.25, 0], A=sp.csr_matrix([[1, 1, 0, 2.0]]), b=[3.0], n_free=1, psd_sizes=[2])
    q = SdpProblem.from_text(p.to_text())
    assert q.to_text() == p.to_text()
    assert q.psd_sizes == [2] and q.n_free == 1


def test_cross_check_backend():
    pytest.importorskip("cvxpy")
    rng = np.random.default_rng(3)
    S = rng.normal(size=(3, 3))
    S = S + S.T
    k = svec_len(3)
    A = np.zeros((k, 1 + k))
    A[:, 0] = svec(np.eye(3))
    A[:, 1:] = -np.eye(k)
    p = SdpProblem(c=np.r_[1.0, np.zeros(k)], A=sp.csr_matrix(A), b=svec(S), n_free=1, psd_sizes=[3])
    a, b = solve(p), solve(p, backend="cvxpy")
    assert a.objective == pytest.approx(b.objective, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10**6))
def test_svec_isometry(n, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(2, n, n))
    X, Y = X + X.T, Y + Y.T
    assert svec(X) @ svec(Y) == pytest.approx(np.trace(X @ Y), rel=1e-10, abs=1e-10)
    np.testing.assert_allclose(smat(svec(X), n), X, atol=1e-14)
    i, j = rng.integers(0, n, size=2)
    assert svec(X)[svec_index(n, i, j)] == pytest.approx(X[i, j] * (1 if i == j else np.sqrt(2)))
