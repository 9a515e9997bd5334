"""Standard-form conic solver for free / nonnegative / PSD variable blocks.

Problem::

    minimize    c^T x
    subject to  A x = b,   x in R^f x R_+^l x S_+^{n_1} x ... x S_+^{n_k}

PSD blocks are stored with ``svec`` (lower triangle in ``np.tril_indices``
order, off-diagonals scaled by sqrt(2)) so the trace inner product is the
Euclidean one.  The dual is ``max b^T y  s.t.  A^T y + z = c``, ``z`` in the dual
cone (``z = 0`` on free coordinates).

The solver is a homogeneous self-dual interior-point method with
Nesterov-Todd scaling and a Mehrotra predictor-corrector, which gives
infeasibility and unboundedness certificates from the same iteration.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
STATUSES = ("optimal", "optimal_inaccurate", "infeasible", "unbounded", "max_iter")


# ---------------------------------------------------------------------------
# svec helpers
# ---------------------------------------------------------------------------


def svec_len(n: int) -> int:
    return n * (n + 1) // 2


def _tril(n: int):
    return np.tril_indices(n)


def svec(S: np.ndarray) -> np.ndarray:
    """svec of a symmetric matrix (or a stack of them along axis 0)."""
    n = S.shape[-1]
    r, c = _tril(n)
    v = S[..., r, c].copy()
    v[..., r != c] *= SQRT2
    return v


def smat(v: np.ndarray, n: int) -> np.ndarray:
    r, c = _tril(n)
    vv = np.array(v, dtype=float)
    vv[..., r != c] /= SQRT2
    S = np.zeros(vv.shape[:-1] + (n, n))
    S[..., r, c] = vv
    S[..., c, r] = vv
    return S


def svec_index(n: int, i: int, j: int) -> int:
    """Position of entry (i, j) of an n x n symmetric matrix inside its svec."""
    if i < j:
        i, j = j, i
    return i * (i + 1) // 2 + j


# ---------------------------------------------------------------------------
# problem / solution containers
# ---------------------------------------------------------------------------


@dataclass
class SdpProblem:
    """Standard-form conic problem.

    Attributes
    ----------
    c : (N,) objective.
    A : sparse (m, N) equality matrix.
    b : (m,) right-hand side.
    n_free, n_nonneg : block sizes.
    psd_sizes : side length of every PSD block.
    meta : free-form bookkeeping (variable maps, objective scaling ...).
    """

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    n_free: int = 0
    n_nonneg: int = 0
    psd_sizes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.psd_sizes = [int(s) for s in self.psd_sizes]
        if self.A.shape != (len(self.b), self.n_vars):
            raise ValueError(f"A has shape {self.A.shape}, expected {(len(self.b), self.n_vars)}")
        if len(self.c) != self.n_vars:
            raise ValueError("objective length does not match cone layout")

    @property
    def n_vars(self) -> int:
        return self.n_free + self.n_nonneg + sum(svec_len(s) for s in self.psd_sizes)

    def block_slices(self) -> list:
        """(kind, slice, side) for every block in layout order."""
        out = []
        o = 0
        if self.n_free:
            out.append(("free", slice(o, o + self.n_free), self.n_free))
        o += self.n_free
        if self.n_nonneg:
            out.append(("nonneg", slice(o, o + self.n_nonneg), self.n_nonneg))
        o += self.n_nonneg
        for s in self.psd_sizes:
            out.append(("psd", slice(o, o + svec_len(s)), s))
            o += svec_len(s)
        return out

    # text format -------------------------------------------------------------
    def to_text(self) -> str:
        """Byte-stable sparse text export."""
        A = self.A.tocoo()
        order = np.lexsort((A.col, A.row))
        lines = ["# conic problem: minimize c'x s.t. Ax = b, x in K"]
        lines.append(f"VARS {self.n_vars}")
        lines.append(f"ROWS {len(self.b)}")
        lines.append(f"BLOCK free {self.n_free}")
        lines.append(f"BLOCK nonneg {self.n_nonneg}")
        for s in self.psd_sizes:
            lines.append(f"BLOCK psd {s}")
        lines.append("OBJECTIVE")
        for j in np.flatnonzero(self.c):
            lines.append(f"{j} {self.c[j]:.17g}")
        lines.append("RHS")
        for i in np.flatnonzero(self.b):
            lines.append(f"{i} {self.b[i]:.17g}")
        lines.append("MATRIX")
        for k in order:
            lines.append(f"{A.row[k]} {A.col[k]} {A.data[k]:.17g}")
        lines.append("END")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SdpProblem":
        n_vars = m = 0
        n_free = n_nonneg = 0
        psd = []
        section = None
        c = b = None
        rows, cols, vals = [], [], []
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            key = parts[0]
            if key == "VARS":
                n_vars = int(parts[1])
            elif key == "ROWS":
                m = int(parts[1])
            elif key == "BLOCK":
                if parts[1] == "free":
                    n_free = int(parts[2])
                elif parts[1] == "nonneg":
                    n_nonneg = int(parts[2])
                else:
                    psd.append(int(parts[2]))
            elif key in ("OBJECTIVE", "RHS", "MATRIX", "END"):
                section = key
                if c is None:
                    c, b = np.zeros(n_vars), np.zeros(m)
            elif section == "OBJECTIVE":
                c[int(parts[0])] = float(parts[1])
            elif section == "RHS":
                b[int(parts[0])] = float(parts[1])
            elif section == "MATRIX":
                rows.append(int(parts[0]))
                cols.append(int(parts[1]))
                vals.append(float(parts[2]))
        A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n_vars))
        return cls(c, A, b, n_free, n_nonneg, psd)


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    objective: float
    residuals: dict
    iterations: int
    certificate: np.ndarray | None = None
    solve_time: float = 0.0
    backend: str = "hsd"

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "residuals": self.residuals,
            "iterations": self.iterations,
            "backend": self.backend,
            "x": self.x.tolist(),
            "y": self.y.tolist(),
        }


def compute_residuals(sdp: SdpProblem, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> dict:
    """Independently recomputed optimality measures."""
    r_p = sdp.A @ x - sdp.b
    r_d = sdp.c - sdp.A.T @ y - z
    min_eig = np.inf
    for kind, sl, s in sdp.block_slices():
        if kind == "nonneg":
            min_eig = min(min_eig, float(np.min(x[sl])))
        elif kind == "psd":
            min_eig = min(min_eig, float(np.linalg.eigvalsh(smat(x[sl], s))[0]))
    pobj = float(sdp.c @ x)
    dobj = float(sdp.b @ y)
    return {
        "primal_inf": float(np.max(np.abs(r_p))) if len(r_p) else 0.0,
        "dual_inf": float(np.max(np.abs(r_d))) if len(r_d) else 0.0,
        "min_eig": float(min_eig) if np.isfinite(min_eig) else 0.0,
        "gap": abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj)),
        "pobj": pobj,
        "dobj": dobj,
    }


# ---------------------------------------------------------------------------
# cone operations (non-free part)
# ---------------------------------------------------------------------------


class _Cone:
    """Nonnegative orthant followed by PSD blocks (svec coordinates)."""

    def __init__(self, n_nonneg: int, psd_sizes: Sequence[int]):
        self.nl = n_nonneg
        self.sizes = list(psd_sizes)
        self.slices = []
        o = n_nonneg
        for s in self.sizes:
            self.slices.append(slice(o, o + svec_len(s)))
            o += svec_len(s)
        self.dim = o
        self.degree = n_nonneg + sum(self.sizes)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[: self.nl] = 1.0
        for s, sl in zip(self.sizes, self.slices):
            e[sl] = svec(np.eye(s))
        return e

    def nt_scaling(self, x: np.ndarray, z: np.ndarray) -> dict:
        sc = {"lp_g": None, "lp_lam": None, "G": [], "Ginv": [], "W": [], "lam": []}
        if self.nl:
            xl, zl = x[: self.nl], z[: self.nl]
            sc["lp_g"] = (xl / zl) ** 0.25
            sc["lp_lam"] = np.sqrt(xl * zl)
        for s, sl in zip(self.sizes, self.slices):
            X, Z = smat(x[sl], s), smat(z[sl], s)
            Lx = np.linalg.cholesky(X)
            Lz = np.linalg.cholesky(Z)
            U, S, Vt = np.linalg.svd(Lz.T @ Lx)
            V = Vt.T
            G = Lx @ V / np.sqrt(S)[None, :]
            Ginv = (np.sqrt(S)[:, None] * Vt) @ sla.solve_triangular(Lx, np.eye(s), lower=True)
            sc["G"].append(G)
            sc["Ginv"].append(Ginv)
            sc["W"].append(G @ G.T)
            sc["lam"].append(S)
        return sc

    def apply_W(self, sc: dict, v: np.ndarray) -> np.ndarray:
        """The operator ``v -> W v W`` (``(x/z) v`` on the orthant)."""
        out = np.empty_like(v)
        if self.nl:
            out[: self.nl] = sc["lp_g"] ** 4 * v[: self.nl]
        for s, sl, W in zip(self.sizes, self.slices, sc["W"]):
            V = smat(v[sl], s)
            out[sl] = svec(W @ V @ W)
        return out

    def scaled_pair(self, sc: dict, dx: np.ndarray, dz: np.ndarray) -> list:
        """Blocks of (G^-1 dx G^-T, G^T dz G) in matrix form (diagonal vectors for LP)."""
        out = []
        if self.nl:
            g = sc["lp_g"] ** 2
            out.append((dx[: self.nl] / g, dz[: self.nl] * g))
        for s, sl, G, Gi in zip(self.sizes, self.slices, sc["G"], sc["Ginv"]):
            out.append((Gi @ smat(dx[sl], s) @ Gi.T, G.T @ smat(dz[sl], s) @ G))
        return out

    def comp_rhs(self, sc: dict, sigma_mu: float, corr: list | None) -> np.ndarray:
        """``R_c = G (lam^{-1} o (sigma mu e - lam o lam - corr)) G^T``."""
        out = np.empty(self.dim)
        k = 0
        if self.nl:
            lam = sc["lp_lam"]
            rhs = sigma_mu - lam * lam
            if corr is not None:
                rhs = rhs - corr[0][0] * corr[0][1]
            out[: self.nl] = (sc["lp_g"] ** 2) * rhs / lam
            k = 1
        for i, (s, sl) in enumerate(zip(self.sizes, self.slices)):
            lam = sc["lam"][i]
            rhs = -np.diag(lam * lam) + sigma_mu * np.eye(s)
            if corr is not None:
                dX, dZ = corr[k + i]
                P = dX @ dZ
                rhs = rhs - 0.5 * (P + P.T)
            D = 2.0 * rhs / (lam[:, None] + lam[None, :])
            G = sc["G"][i]
            out[sl] = svec(G @ D @ G.T)
        return out

    def max_step(self, x: np.ndarray, dx: np.ndarray) -> float:
        alpha = np.inf
        if self.nl:
            neg = dx[: self.nl] < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-x[: self.nl][neg] / dx[: self.nl][neg])))
        for s, sl in zip(self.sizes, self.slices):
            L = np.linalg.cholesky(smat(x[sl], s))
            Li = sla.solve_triangular(L, np.eye(s), lower=True)
            ev = np.linalg.eigvalsh(Li @ smat(dx[sl], s) @ Li.T)[0]
            if ev < 0:
                alpha = min(alpha, -1.0 / ev)
        return alpha

    def dist_outside(self, v: np.ndarray) -> float:
        """Norm of the negative part of ``v`` with respect to the cone."""
        tot = 0.0
        if self.nl:
            tot += float(np.sum(np.minimum(v[: self.nl], 0.0) ** 2))
        for s, sl in zip(self.sizes, self.slices):
            ev = np.linalg.eigvalsh(smat(v[sl], s))
            tot += float(np.sum(np.minimum(ev, 0.0) ** 2))
        return float(np.sqrt(tot))


# ---------------------------------------------------------------------------
# Schur complement machinery
# ---------------------------------------------------------------------------


class _Schur:
    """Builds ``M = A_K W A_K^T`` for the current scaling."""

    def __init__(self, AK: sp.csr_matrix, cone: _Cone):
        self.AK = AK.tocsc()
        self.cone = cone
        self.m = AK.shape[0]
        self.lp = self.AK[:, : cone.nl].tocsr() if cone.nl else None
        self.blocks = []
        for s, sl in zip(cone.sizes, cone.slices):
            sub = self.AK[:, sl].tocsr()
            rows = np.flatnonzero(np.diff(sub.indptr))
            dense = sub[rows].toarray()
            mats = smat(dense, s)
            self.blocks.append((rows, dense, mats))

    def build(self, sc: dict) -> np.ndarray:
        M = np.zeros((self.m, self.m))
        if self.lp is not None:
            w = sc["lp_g"] ** 4
            M += (self.lp @ sp.diags(w) @ self.lp.T).toarray()
        for (rows, dense, mats), W in zip(self.blocks, sc["W"]):
            if len(rows) == 0:
                continue
            WAW = np.matmul(np.matmul(W, mats), W)
            M[np.ix_(rows, rows)] += dense @ svec(WAW).T
        return M


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def solve(
    sdp: SdpProblem,
    tol: float = 1e-8,
    max_iter: int = 100,
    verbose: bool = False,
    backend: str = "hsd",
) -> ConicSolution:
    """Solve a standard-form conic problem.

    Parameters
    ----------
    sdp : SdpProblem
    tol : float
        Target for the scaled primal/dual residuals and relative gap; must lie
        in [1e-10, 1e-2].
    max_iter : int
    backend : {"hsd", "cvxpy"}
        ``"cvxpy"`` routes through cvxpy (Clarabel) as a cross-check; the
        returned residuals are recomputed here either way.
    """
    if not (1e-10 <= tol <= 1e-2):
        raise ValueError("tol must lie in [1e-10, 1e-2]")
    t0 = time.perf_counter()
    if backend == "cvxpy":
        sol = _solve_cvxpy(sdp, tol)
    elif backend == "hsd":
        if sdp.n_free:
            sol = _solve_eliminated(sdp, tol, max_iter, verbose)
        else:
            sol = _solve_hsd(sdp, tol, max_iter, verbose)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    sol.solve_time = time.perf_counter() - t0
    return sol


def _solve_hsd(sdp: SdpProblem, tol: float, max_iter: int, verbose: bool) -> ConicSolution:
    m, N = sdp.A.shape
    nf = sdp.n_free
    cone = _Cone(sdp.n_nonneg, sdp.psd_sizes)

    if N == 0 or (m == 0 and not np.any(sdp.c)):
        x = np.zeros(N)
        if N:
            x[nf:] = 0.0
        y = np.zeros(m)
        if m and np.any(sdp.b):
            return _finish(sdp, "infeasible", x, y, np.zeros(N), 0, None)
        return _finish(sdp, "optimal", x, y, np.zeros(N), 0, None)

    if m == 0 and nf == 0:
        return _solve_no_rows(sdp, cone, tol)

    # --- scaling -----------------------------------------------------------
    A = sdp.A.tocsr().astype(float)
    rn = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    zero_rows = rn == 0
    if np.any(zero_rows & (np.abs(sdp.b) > 0)):
        x = np.zeros(N)
        cert = np.zeros(m)
        cert[np.flatnonzero(zero_rows & (np.abs(sdp.b) > 0))[0]] = 1.0
        return _finish(sdp, "infeasible", x, np.zeros(m), np.zeros(N), 0, cert)
    keep = ~zero_rows
    rscale = np.zeros(m)
    rscale[keep] = 1.0 / rn[keep]
    A_s = sp.diags(rscale[keep]) @ A[keep]
    cn = np.sqrt(np.asarray(A_s[:, :nf].multiply(A_s[:, :nf]).sum(axis=0)).ravel()) if nf else np.zeros(0)
    cscale = np.ones(N)
    if nf:
        cscale[:nf] = np.where(cn > 0, 1.0 / np.where(cn > 0, cn, 1.0), 1.0)
    A_s = (A_s @ sp.diags(cscale)).tocsr()
    b_s = rscale[keep] * sdp.b[keep]
    c_s = cscale * sdp.c
    sb = max(1.0, float(np.linalg.norm(b_s)))
    sc_ = max(1.0, float(np.linalg.norm(c_s)))
    b_s /= sb
    c_s /= sc_

    Af = A_s[:, :nf].toarray() if nf else np.zeros((A_s.shape[0], 0))
    AK = A_s[:, nf:]
    AKt = AK.T.tocsr()
    cf, cK = c_s[:nf], c_s[nf:]
    mm = A_s.shape[0]
    schur = _Schur(AK, cone)

    def unscale(xs, ys, zs, tau):
        x = cscale * xs * sb / tau
        y = np.zeros(m)
        y[keep] = rscale[keep] * ys * sc_ / tau
        z = np.zeros(N)
        z[nf:] = zs * sc_ / tau
        return x, y, z

    # --- initial point -----------------------------------------------------
    xf = np.zeros(nf)
    xK = cone.identity()
    zK = cone.identity()
    y = np.zeros(mm)
    tau = kappa = 1.0
    nu = cone.degree

    best = None
    status = "max_iter"
    cert = None
    it = 0
    small_steps = 0
    for it in range(1, max_iter + 1):
        # residuals of the homogeneous model
        Ax = (Af @ xf if nf else 0.0) + AK @ xK
        Aty = A_s.T @ y
        p = Ax - b_s * tau
        dK = Aty[nf:] + zK - cK * tau
        dfree = Aty[:nf] - cf * tau
        g = -(cf @ xf + cK @ xK) + b_s @ y - kappa
        mu = (xK @ zK + tau * kappa) / (nu + 1)

        # termination tests on the unscaled candidate
        x_u, y_u, z_u = unscale(np.concatenate([xf, xK]), y, zK, tau)
        res = compute_residuals(sdp, x_u, y_u, z_u)
        pi = res["primal_inf"] / (1.0 + float(np.max(np.abs(sdp.b), initial=0.0)))
        di = res["dual_inf"] / (1.0 + float(np.max(np.abs(sdp.c), initial=0.0)))
        score = max(pi, di, res["gap"])
        if best is None or score < best[0]:
            best = (score, x_u, y_u, z_u)
        if verbose:
            logger.info("it %3d mu %.2e pinf %.2e dinf %.2e gap %.2e tau %.2e kappa %.2e", it, mu, pi, di, res["gap"], tau, kappa)
        if pi <= tol and di <= tol and res["gap"] <= tol:
            status = "optimal"
            break
        by = b_s @ y
        if by > 0:
            r = np.sqrt(np.linalg.norm(AKt @ y + zK) ** 2 + np.linalg.norm(Af.T @ y) ** 2) / by
            if r <= tol:
                status = "infeasible"
                cert = np.zeros(m)
                cert[keep] = rscale[keep] * y / by
                break
        cx = cf @ xf + cK @ xK
        if cx < 0:
            r = np.linalg.norm(Ax) / (-cx)
            if r <= tol and cone.dist_outside(xK) <= tol * (-cx):
                status = "unbounded"
                cert = cscale * np.concatenate([xf, xK]) / (-cx)
                break

        # --- Newton system ----------------------------------------------
        try:
            sc = cone.nt_scaling(xK, zK)
        except np.linalg.LinAlgError:
            logger.warning("lost positive definiteness at iteration %d", it)
            break
        M = schur.build(sc)
        reg = 1e-14 * (1.0 + np.max(np.abs(np.diag(M)), initial=0.0))
        K = np.zeros((mm + nf, mm + nf))
        K[:mm, :mm] = M + reg * np.eye(mm)
        if nf:
            K[:mm, mm:] = Af
            K[mm:, :mm] = Af.T
            K[mm:, mm:] = -reg * np.eye(nf)
        # symmetric equilibration before factorization
        dk = np.ones(mm + nf)
        for _ in range(6):
            rmax = np.max(np.abs(K * dk[:, None] * dk[None, :]), axis=1)
            rmax[rmax == 0] = 1.0
            dk = dk / np.sqrt(rmax)
        try:
            lu = sla.lu_factor(K * dk[:, None] * dk[None, :], check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            logger.warning("KKT factorization failed at iteration %d", it)
            break

        def kkt_solve(r1, r2):
            rhs = np.concatenate([r1, r2])
            sol = dk * sla.lu_solve(lu, dk * rhs, check_finite=False)
            return sol[:mm], sol[mm:]

        WcK = cone.apply_W(sc, cK)
        q1 = b_s + AK @ WcK
        u1y, u1f = kkt_solve(q1, cf)
        dx1K = AKt @ u1y
        dx1K = cone.apply_W(sc, dx1K) - WcK
        den = -(cf @ u1f + cK @ dx1K) + b_s @ u1y + kappa / tau

        def newton(rA, rD, rF, rC, rG, rT):
            """Solve the linearized homogeneous model for a general right-hand side.

            Equations: Af dxf + AK dxK - b dtau = rA;  AK' dy + dzK - cK dtau = rD;
            Af' dy - cf dtau = rF;  dxK + W dzK = rC;  -c'dx + b'dy - dkappa = rG;
            kappa dtau + tau dkappa = rT.
            """
            base = rC - cone.apply_W(sc, rD)
            u0y, u0f = kkt_solve(rA - AK @ base, rF)
            dx0K = base + cone.apply_W(sc, AKt @ u0y)
            num = rG + (cf @ u0f + cK @ dx0K) - b_s @ u0y + rT / tau
            dtau = num / den
            dy = u0y + dtau * u1y
            dxf = u0f + dtau * u1f
            dxK = dx0K + dtau * dx1K
            dzK = rD - AKt @ dy + cK * dtau
            dkappa = (rT - kappa * dtau) / tau
            return [dxf, dxK, dy, dzK, dtau, dkappa]

        def residual(d, rhs):
            dxf, dxK, dy, dzK, dtau, dkappa = d
            rA, rD, rF, rC, rG, rT = rhs
            return [
                rA - ((Af @ dxf if nf else 0.0) + AK @ dxK - b_s * dtau),
                rD - (AKt @ dy + dzK - cK * dtau),
                rF - ((Af.T @ dy if nf else np.zeros(0)) - cf * dtau),
                rC - (dxK + cone.apply_W(sc, dzK)),
                rG - (-(cf @ dxf + cK @ dxK) + b_s @ dy - dkappa),
                rT - (kappa * dtau + tau * dkappa),
            ]

        def direction(eta, Rc, r_tk):
            rhs = [-eta * p, -eta * dK, -eta * dfree, Rc, -eta * g, r_tk]
            d = newton(*rhs)
            nrm = max(np.max(np.abs(r)) if np.size(r) else 0.0 for r in rhs) + 1e-300
            err_prev = np.inf
            for _ in range(4):
                res_ = residual(d, rhs)
                err = max(np.max(np.abs(r)) if np.size(r) else 0.0 for r in res_)
                if err <= 1e-14 * nrm or err >= 0.5 * err_prev:
                    break
                err_prev = err
                corr_ = newton(*res_)
                d = [a + b for a, b in zip(d, corr_)]
            if verbose:
                res_ = residual(d, rhs)
                logger.debug("   newton err %.2e / rhs %.2e", max(np.max(np.abs(r)) if np.size(r) else 0.0 for r in res_), nrm)
            return tuple(d)

        def step_len(dxK, dzK, dtau, dkappa):
            a = min(cone.max_step(xK, dxK), cone.max_step(zK, dzK))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        # predictor
        aff = direction(1.0, -xK, -tau * kappa)
        a_aff = min(1.0, step_len(aff[1], aff[3], aff[4], aff[5]))
        sigma = (1.0 - a_aff) ** 3
        # corrector
        corr = cone.scaled_pair(sc, aff[1], aff[3])
        Rc = cone.comp_rhs(sc, sigma * mu, corr)
        r_tk = sigma * mu - tau * kappa - aff[4] * aff[5]
        dxf, dxK, dy, dzK, dtau, dkappa = direction(1.0 - sigma, Rc, r_tk)
        a = min(1.0, 0.99 * step_len(dxK, dzK, dtau, dkappa))
        xf = xf + a * dxf
        xK = xK + a * dxK
        y = y + a * dy
        zK = zK + a * dzK
        tau = tau + a * dtau
        kappa = kappa + a * dkappa
        if verbose:
            logger.debug("   step %.3e sigma %.2e", a, sigma)
        small_steps = small_steps + 1 if a < 1e-7 else 0
        if small_steps >= 5:
            logger.warning("step length stalled at iteration %d", it)
            break

    if status == "optimal":
        x_u, y_u, z_u = unscale(np.concatenate([xf, xK]), y, zK, tau)
    elif status in ("infeasible", "unbounded"):
        x_u, y_u, z_u = unscale(np.concatenate([xf, xK]), y, zK, 1.0)
    else:
        score, x_u, y_u, z_u = best
        # Interior-point iterations on degenerate SOS programs often stall just
        # short of the requested accuracy; accept the best iterate when it is
        # within sqrt(tol) but label it so callers can tell.
        if score <= np.sqrt(tol):
            status = "optimal_inaccurate"
            logger.warning("returning reduced-accuracy solution (score %.2e)", score)
    return _finish(sdp, status, x_u, y_u, z_u, it, cert)


def _solve_no_rows(sdp: SdpProblem, cone, tol: float) -> ConicSolution:
    """``min c^T x`` over the cone alone: bounded iff ``c`` lies in the (self-dual) cone."""
    N = sdp.n_vars
    c = sdp.c
    d = np.zeros(N)
    worst = 0.0
    k = sdp.n_nonneg
    if k:
        neg = c[:k] < 0
        d[:k][neg] = 1.0
        worst = min(worst, float(c[:k].min()))
    off = k
    for s_ in sdp.psd_sizes:
        ln = svec_len(s_)
        w, V = np.linalg.eigh(smat(c[off : off + ln], s_))
        if w[0] < 0:
            v = V[:, 0]
            d[off : off + ln] = svec(np.outer(v, v))
            worst = min(worst, float(w[0]))
        off += ln
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    if worst < -tol * scale:
        return _finish(sdp, "unbounded", d, np.zeros(0), np.zeros(N), 0, d)
    return _finish(sdp, "optimal", np.zeros(N), np.zeros(0), c.copy(), 0, None)


def _solve_eliminated(sdp: SdpProblem, tol: float, max_iter: int, verbose: bool) -> ConicSolution:
    """Eliminate free variables with a pivoted QR of their columns, then solve the cone-only problem.

    With ``A_f P = Q R`` the rows ``Q_2^T A_K x_K = Q_2^T b`` no longer involve the
    free block, ``x_f`` is recovered from the remaining rows and the dual vector
    is lifted back as ``y = Q_2 y_hat + Q_1 R^{-T} c_f``.
    """
    nf = sdp.n_free
    A = sdp.A.tocsc()
    Af = A[:, :nf].toarray()
    AK = A[:, nf:]
    m = Af.shape[0]
    cf, cK = sdp.c[:nf], sdp.c[nf:]
    Q, R, perm = sla.qr(Af, pivoting=True)
    diag = np.abs(np.diag(R)) if R.size else np.zeros(0)
    r = int(np.sum(diag > 1e-12 * (diag[0] if len(diag) else 1.0)))
    Q1, Q2 = Q[:, :r], Q[:, r:]
    R11 = R[:r, :r]
    piv = perm[:r]
    rest = perm[r:]
    if len(rest):
        # free directions that never meet a constraint: any objective weight makes the problem unbounded
        R12 = R[:r, r:]
        t = sla.solve_triangular(R11, R12)
        red = cf[rest] - t.T @ cf[piv]
        if np.any(np.abs(red) > 1e-12 * (1 + np.abs(cf).max())):
            logger.warning("free variables without constraints carry objective weight")
            x = np.zeros(sdp.n_vars)
            x[rest[np.argmax(np.abs(red))]] = -np.sign(red[np.argmax(np.abs(red))])
            return _finish(sdp, "unbounded", x, np.zeros(m), np.zeros(sdp.n_vars), 0, x)
    cfp = cf[piv]
    w = sla.solve_triangular(R11, cfp, trans="T") if r else np.zeros(0)  # R^{-T} c_f
    y0 = Q1 @ w
    AKd = AK.toarray()
    A_red = Q2.T @ AKd
    b_red = Q2.T @ sdp.b
    c_red = cK - AKd.T @ y0
    A_red[np.abs(A_red) < 1e-15 * (1 + np.abs(A_red).max(initial=0.0))] = 0.0
    red = SdpProblem(c_red, sp.csr_matrix(A_red), b_red, 0, sdp.n_nonneg, sdp.psd_sizes)
    inner = _solve_hsd(red, tol, max_iter, verbose)
    xK = inner.x
    xf = np.zeros(nf)
    if r:
        xf[piv] = sla.solve_triangular(R11, Q1.T @ (sdp.b - AKd @ xK))
    x = np.concatenate([xf, xK])
    y = Q2 @ inner.y + (y0 if inner.status != "infeasible" else 0.0)
    z = np.concatenate([np.zeros(nf), inner.z[nf - nf:]])
    cert = None
    if inner.certificate is not None:
        cert = Q2 @ inner.certificate if inner.status == "infeasible" else np.concatenate([xf, inner.certificate])
    sol = _finish(sdp, inner.status, x, y, z, inner.iterations, cert)
    return sol


def _finish(sdp, status, x, y, z, it, cert, backend="hsd") -> ConicSolution:
    res = compute_residuals(sdp, x, y, z)
    return ConicSolution(status, x, y, z, res["pobj"], res, it, cert, backend=backend)


def _solve_cvxpy(sdp: SdpProblem, tol: float) -> ConicSolution:
    """Cross-check backend through cvxpy (imported lazily; optional)."""
    import cvxpy as cp

    N = sdp.n_vars
    x = cp.Variable(N)
    cons = [sdp.A @ x == sdp.b] if sdp.A.shape[0] else []
    mats = []
    for kind, sl, s in sdp.block_slices():
        if kind == "nonneg":
            cons.append(x[sl] >= 0)
        elif kind == "psd":
            S = cp.Variable((s, s), symmetric=True)
            r, c = _tril(s)
            scale = np.where(r == c, 1.0, SQRT2)
            cons.append(x[sl] == cp.multiply(scale, S[r, c]))
            cons.append(S >> 0)
            mats.append(S)
    prob = cp.Problem(cp.Minimize(sdp.c @ x), cons)
    prob.solve(solver="CLARABEL", tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol)
    st = prob.status
    y = np.zeros(sdp.A.shape[0])
    if st in ("optimal", "optimal_inaccurate"):
        if cons:
            y = -np.asarray(cons[0].dual_value).ravel()
        xv = np.asarray(x.value).ravel()
        z = sdp.c - sdp.A.T @ y
        z[: sdp.n_free] = 0.0
        return _finish(sdp, "optimal" if st == "optimal" else "max_iter", xv, y, z, 0, None, "cvxpy")
    mapped = {"infeasible": "infeasible", "unbounded": "unbounded", "infeasible_inaccurate": "infeasible", "unbounded_inaccurate": "unbounded"}
    return _finish(sdp, mapped.get(st, "max_iter"), np.zeros(N), y, np.zeros(N), 0, None, "cvxpy")


def save_solution(sol: ConicSolution, path) -> None:
    with open(path, "w") as fh:
        json.dump(sol.to_json(), fh)
