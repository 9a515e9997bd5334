import numpy as np
import pytest

from dualocp.ocpsynth import AffinePoly, MatrixConstraint
from dualocp.polybasis import Poly, monomials
from dualocp.soscompile import CompileError, assemble_sdp, gramify, reconstruct, solve_program
from oracles import negative_corpus, sos_program, sos_status

x = Poly.variable(0, 1)
x1, x2 = Poly.variable(0, 2), Poly.variable(1, 2)


def test_simple_sos_feasible():
    prog = sos_program(AffinePoly.from_poly(x**2 + 1, 0))
    sol = solve_program(prog)
    assert sol.status in ("optimal", "optimal_inaccurate")
    (_, G), = sol.grams["p"]
    np.testing.assert_allclose(G, np.eye(2), atol=1e-6)


def test_odd_polynomial_rejected():
    with pytest.raises(CompileError):
        gramify(AffinePoly.from_poly(x, 0), "odd")


def test_square_has_rank_one_gram():
    sol = solve_program(sos_program(AffinePoly.from_poly((x1 + x2) ** 2, 0)))
    (_, G), = sol.grams["p"]
    ev = np.linalg.eigvalsh(G)
    assert ev[-1] > 1.0 and ev[-2] < 1e-5 * ev[-1]


def test_empty_program():
    prog = sos_program(AffinePoly(1, 0, 0))
    prog.sos = []
    sdp = assemble_sdp(prog)
    sol = solve_program(prog)
    assert sdp.A.shape[0] == 0 and sol.objective == 0.0


def test_toy_minimization_hand_kkt():
    """min t s.t. 2x^2 - 2x + t is SOS: the discriminant 4 - 8t vanishes at t* = 1/2."""
    p = AffinePoly.from_poly(2 * x**2 - 2 * x, 1)
    p.coef[0, 1] = 1.0
    sol = solve_program(sos_program(p, objective=[1.0]))
    assert sol.decisions[0] == pytest.approx(0.5, abs=1e-6)


def test_box_positivity_uses_multipliers():
    # 1 - x^2 is not globally SOS but is nonnegative on [-1, 1]
    box = np.array([[-1.0], [1.0]])
    assert sos_status(1 - x**2, box) in ("optimal", "optimal_inaccurate")
    assert sos_status(1 - x**2) in ("infeasible", "rejected")


def test_gram_reconstruction_matches_constraint():
    box = np.array([[-2.0, -1.0], [3.0, 2.0]])
    prog = sos_program(AffinePoly.from_poly(x1**2 + x2**2 + x1 * x2 + 0.5, 0), box=box, scale_box=box)
    sol = solve_program(prog)
    poly, rec = reconstruct(prog, sol, "p")
    S = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))
    np.testing.assert_allclose(rec(S), poly(S), atol=1e-6)


@pytest.mark.parametrize("case", range(20))
def test_negative_corpus_never_certified(case):
    p, box = negative_corpus()[case]
    assert sos_status(p, box) in ("rejected", "infeasible")


# --------------------------------------------------------- PSD matrix expansion


def _matrix_program(entries, zdeg):
    prog = sos_program(AffinePoly(entries[0][0].n_vars, 0, 0))
    prog.sos = []
    prog.matrices.append(MatrixConstraint("M", entries, zdeg))
    return prog


def test_matrix_expansion_p1_equals_gram():
    ent = [[AffinePoly.from_poly(x**2 + 1, 0, 2)]]
    sol = solve_program(_matrix_program(ent, 1))
    (_, D), = sol.grams["M"]
    np.testing.assert_allclose(D, np.eye(2), atol=1e-6)


def test_matrix_expansion_constant_identity():
    one, zero = Poly.constant(1, 1.0), Poly(1)
    ent = [[AffinePoly.from_poly(p, 0, 0) for p in row] for row in ((one, zero), (zero, one))]
    sol = solve_program(_matrix_program(ent, 0))
    assert sol.status in ("optimal", "optimal_inaccurate")


def test_matrix_expansion_round_trip():
    """Forward-build H from a random D0 >= 0, re-expand, and compare H at sample points."""
    rng = np.random.default_rng(1)
    p, zdeg, n = 2, 1, 2
    z = monomials(n, zdeg)
    k = len(z)
    F = rng.normal(size=(p * k, p * k))
    D0 = F @ F.T
    zpolys = [Poly(n, {tuple(int(v) for v in e): 1.0}) for e in z]
    H = [[Poly(n) for _ in range(p)] for _ in range(p)]
    for r in range(p):
        for s in range(p):
            for i in range(k):
                for j in range(k):
                    H[r][s] = H[r][s] + D0[i * p + r, j * p + s] * (zpolys[i] * zpolys[j])
    ent = [[AffinePoly.from_poly(H[r][s], 0, 2 * zdeg) for s in range(p)] for r in range(p)]
    sol = solve_program(_matrix_program(ent, zdeg))
    (_, D), = sol.grams["M"]
    assert np.linalg.eigvalsh(D)[0] > -1e-8
    X = rng.uniform(-1, 1, size=(20, n))
    for t in range(20):
        Z = np.kron(np.array([zp(X[t]) for zp in zpolys]), np.eye(p))
        Hx = np.array([[H[r][s](X[t]) for s in range(p)] for r in range(p)])
        np.testing.assert_allclose(Z @ D @ Z.T, Hx, atol=1e-8 * (1 + np.abs(Hx).max()))


def test_matrix_entry_degree_checked():
    ent = [[AffinePoly.from_poly(x**4, 0, 4)]]
    with pytest.raises(CompileError):
        solve_program(_matrix_program(ent, 1))
