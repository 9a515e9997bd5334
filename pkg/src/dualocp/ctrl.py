"""Feedback extraction, local LQR design, blending, closed-loop rollout and certification.

The synthesized densities give the rational law ``k(x) = c(x) / a(x)`` (the
common factor ``b**alpha`` cancels).  Near the origin the density is singular,
so the law is blended with a local linear controller ``u = -K_l x`` using the
weights

    rho_L(x) = max((x^T P x)**-3 - Delta, 0),    rho_N(x) = a(x) / (b(x) + b_Delta)**alpha,

with ``b_Delta = Delta**(-1/3)`` the level of ``x^T P x`` where ``rho_L``
switches on.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .dynsim import DIVERGENCE_BOUND, ControlAffineSystem
from .gedmd import GeneratorSet, LinearModel
from .ocpsynth import build_constraint_poly
from .polybasis import Poly, box_quadrature_nodes, excluded_boxes

logger = logging.getLogger(__name__)

B_ZERO = 1e-8


class StabilizabilityError(ValueError):
    """Raised when no stabilizing Riccati/Lyapunov solution exists."""


# ---------------------------------------------------------------------------
# local design
# ---------------------------------------------------------------------------


def solve_are(A, B, Q, R) -> np.ndarray:
    """Stabilizing solution of ``A^T P + P A - P B R^-1 B^T P + Q = 0``.

    The solution is read off the stable invariant subspace of the Hamiltonian
    matrix (ordered real Schur form).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    G = B @ np.linalg.solve(R, B.T)
    H = np.block([[A, -G], [-Q, -A.T]])
    T, U, sdim = sla.schur(H, output="real", sort="lhp")
    if sdim != n:
        raise StabilizabilityError(
            f"Hamiltonian has {sdim} stable eigenvalues, expected {n}: (A, B) must be stabilizable "
            "and (A, Q) detectable for a stabilizing Riccati solution"
        )
    U11, U21 = U[:n, :n], U[n:, :n]
    if np.linalg.cond(U11) > 1e12:
        raise StabilizabilityError("stable subspace is not a graph: (A, B) is not stabilizable")
    P = np.linalg.solve(U11.T, U21.T).T
    P = 0.5 * (P + P.T)
    closed = A - G @ P
    if np.max(np.linalg.eigvals(closed).real) >= 0:
        raise StabilizabilityError("Riccati solution is not stabilizing: (A, B) must be stabilizable")
    return P


def lyapunov_fallback(A, Q) -> np.ndarray:
    """``P`` with ``A^T P + P A = -Q`` for Hurwitz ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if np.max(np.linalg.eigvals(A).real) >= 0:
        raise StabilizabilityError("input matrix vanishes at the origin and A is not Hurwitz: the linearization is not stabilizable")
    P = sla.solve_continuous_lyapunov(A.T, -Q)
    return 0.5 * (P + P.T)


@dataclass
class LocalDesign:
    P: np.ndarray
    K: np.ndarray
    method: str

    def b_poly(self) -> Poly:
        return Poly.quadratic_form(self.P)


def local_design(A, B, Q=None, R=None) -> LocalDesign:
    """LQR gain ``K = R^-1 B^T P`` or the Lyapunov fallback when ``||B|| < 1e-8``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.eye(m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    if np.linalg.norm(B) < B_ZERO:
        P = lyapunov_fallback(A, Q)
        method = "lyapunov"
    else:
        P = solve_are(A, B, Q, R)
        method = "riccati"
    if np.linalg.eigvalsh(P)[0] <= 0:
        raise StabilizabilityError("local solution P is not positive definite")
    K = np.linalg.solve(R, B.T @ P)
    return LocalDesign(P, K, method)


def design_from_model(model: LinearModel, R=None, q_scale: float = 1.0) -> LocalDesign:
    n = model.A.shape[0]
    return local_design(model.A, model.B, q_scale * np.eye(n), R)


def default_delta(P: np.ndarray, excluded) -> float:
    """``Delta`` such that the region ``(x^T P x)**-3 > Delta`` is the largest ellipsoid inside ``N``."""
    excluded = np.asarray(excluded, dtype=float)
    r = float(np.min(0.5 * (excluded[1] - excluded[0])))
    level = r * r / float(np.max(np.diag(np.linalg.inv(P))))
    return level**-3


# ---------------------------------------------------------------------------
# controller artifact
# ---------------------------------------------------------------------------


@dataclass
class ControllerArtifact:
    """Rational feedback ``k = c / a`` together with the local blending data."""

    a: Poly
    c: list
    gamma: float
    alpha: int
    b: Poly
    P: np.ndarray
    K_l: np.ndarray
    Delta: float
    a_floor: float = 0.0
    beta: float = 1.0
    R: np.ndarray | None = None
    norm: str = "l2"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.K_l = np.atleast_2d(np.asarray(self.K_l, dtype=float)).reshape(len(self.c), -1)
        if self.R is None:
            self.R = np.eye(len(self.c))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not np.allclose(self.P, self.P.T) or np.linalg.eigvalsh(self.P)[0] <= 0:
            raise ValueError("P must be symmetric positive definite")

    @property
    def n(self) -> int:
        return self.a.n_vars

    @property
    def m(self) -> int:
        return len(self.c)

    @property
    def b_delta(self) -> float:
        return self.Delta ** (-1.0 / 3.0) if self.Delta > 0 else np.inf

    # evaluation -------------------------------------------------------------
    def rational(self, X) -> tuple[np.ndarray, np.ndarray]:
        """``k(x) = c(x) / a(x)`` and a mask of points where ``a <= a_floor`` (k set to 0 there)."""
        X = np.atleast_2d(X)
        av = np.atleast_1d(self.a(X))
        low = av <= self.a_floor
        safe = np.where(low, 1.0, av)
        K = np.stack([np.atleast_1d(cj(X)) / safe for cj in self.c], axis=1) if self.m else np.zeros((len(X), 0))
        K[low] = 0.0
        return K, low

    def local(self, X) -> np.ndarray:
        return -np.atleast_2d(X) @ self.K_l.T

    def weights(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        v = np.einsum("ti,ij,tj->t", X, self.P, X)
        with np.errstate(divide="ignore", over="ignore"):
            rho_L = np.maximum(np.where(v > 0, v, 0.0) ** -3.0 - self.Delta, 0.0)
        rho_L = np.where(v > 0, rho_L, np.inf)
        bv = np.atleast_1d(self.b(X))
        rho_N = np.maximum(np.atleast_1d(self.a(X)), 0.0) / (bv + self.b_delta) ** self.alpha
        return rho_L, rho_N

    def __call__(self, X, t: float = 0.0) -> np.ndarray:
        return self.blend(X)

    def blend(self, X) -> np.ndarray:
        """Blended input; points where the rational law is unusable fall back to the local law."""
        X = np.atleast_2d(X)
        kN, low = self.rational(X)
        kL = self.local(X)
        rho_L, rho_N = self.weights(X)
        rho_N = np.where(low, 0.0, rho_N)
        tot = rho_L + rho_N
        u = np.empty_like(kN)
        inf = np.isinf(rho_L)
        u[inf] = kL[inf]
        zero = (~inf) & (tot <= 0)
        if np.any(zero):
            logger.debug("%d points with both blending weights zero; using the local law", int(zero.sum()))
            u[zero] = kL[zero]
        ok = (~inf) & (tot > 0)
        wl = rho_L[ok] / tot[ok]
        u[ok] = wl[:, None] * kL[ok] + (1.0 - wl)[:, None] * kN[ok]
        return u

    # serialization ------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "a": self.a.to_json(),
            "c": [cj.to_json() for cj in self.c],
            "gamma": float(self.gamma),
            "alpha": int(self.alpha),
            "beta": float(self.beta),
            "b": self.b.to_json(),
            "P": self.P.tolist(),
            "K_l": self.K_l.tolist(),
            "Delta": float(self.Delta),
            "a_floor": float(self.a_floor),
            "R": self.R.tolist(),
            "norm": self.norm,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ControllerArtifact":
        return cls(
            a=Poly.from_json(obj["a"]),
            c=[Poly.from_json(cj) for cj in obj["c"]],
            gamma=obj["gamma"],
            alpha=obj["alpha"],
            b=Poly.from_json(obj["b"]),
            P=np.array(obj["P"]),
            K_l=np.array(obj["K_l"]),
            Delta=obj["Delta"],
            a_floor=obj.get("a_floor", 0.0),
            beta=obj.get("beta", 1.0),
            R=np.array(obj["R"]) if "R" in obj else None,
            norm=obj.get("norm", "l2"),
            provenance=obj.get("provenance", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ControllerArtifact":
        return cls.from_json(json.loads(Path(path).read_text()))


def grid_points(domain, excluded=None, per_axis: int | None = None) -> np.ndarray:
    """Tensor grid over ``domain`` (200 points per axis for n <= 2, 50 for n = 3, fewer above) minus ``N``."""
    domain = np.asarray(domain, dtype=float)
    n = domain.shape[1]
    if per_axis is None:
        per_axis = 200 if n <= 2 else (50 if n == 3 else max(8, int(round(2e5 ** (1.0 / n)))))
    axes = [np.linspace(domain[0, i], domain[1, i], per_axis) for i in range(n)]
    G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    if excluded is not None:
        excluded = np.asarray(excluded, dtype=float)
        inside = np.all((G > excluded[0]) & (G < excluded[1]), axis=1)
        G = G[~inside]
    return G


def extract_controller(
    a: Poly,
    c_list: Sequence[Poly],
    local: LocalDesign,
    gamma: float = 0.0,
    alpha: int = 4,
    b: Poly | None = None,
    domain=None,
    excluded=None,
    Delta: float | None = None,
    beta: float = 1.0,
    R=None,
    norm: str = "l2",
    provenance: dict | None = None,
) -> ControllerArtifact:
    """Package ``a`` and ``c`` with the local design.

    ``a_floor`` is ``1e-8`` times the maximum of ``a`` on a grid over the domain
    (or on ``[-1, 1]^n`` when no domain is given).
    """
    if a.is_zero():
        raise ValueError("density numerator a is identically zero")
    n = a.n_vars
    if domain is None:
        domain = np.vstack([-np.ones(n), np.ones(n)])
    G = grid_points(domain, None, per_axis=min(60, 200 if n <= 2 else 20))
    a_floor = 1e-8 * float(np.max(a(G)))
    if Delta is None:
        Delta = default_delta(local.P, excluded) if excluded is not None else 1.0
    return ControllerArtifact(
        a=a, c=list(c_list), gamma=gamma, alpha=alpha, b=local.b_poly() if b is None else b,
        P=local.P, K_l=local.K, Delta=Delta, a_floor=a_floor, beta=beta, R=R, norm=norm,
        provenance=dict(provenance or {}),
    )


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


@dataclass
class Rollout:
    t: np.ndarray
    X: np.ndarray  # (T, n)
    U: np.ndarray  # (T, m)
    Xdot: np.ndarray  # (T, n)
    cost: np.ndarray  # cumulative discounted cost
    diverged: bool

    @property
    def total_cost(self) -> float:
        return float(self.cost[-1])

    def first_hit(self, radius: float) -> float:
        """First sample time with ``|x| <= radius`` (``inf`` if never)."""
        idx = np.flatnonzero(np.linalg.norm(self.X, axis=1) <= radius)
        return float(self.t[idx[0]]) if len(idx) else np.inf

    def save(self, path) -> None:
        n, m = self.X.shape[1], self.U.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"dx{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + ["cost"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(len(self.t)):
                row = [self.t[k], *self.X[k], *self.Xdot[k], *self.U[k], self.cost[k]]
                w.writerow([repr(float(v)) for v in row])


def stage_cost(X, U, q: Poly | None, beta: float, R, norm: str) -> np.ndarray:
    X = np.atleast_2d(X)
    qv = np.sum(X * X, axis=1) if q is None else np.atleast_1d(q(X))
    if norm == "l1":
        return qv + beta * np.sum(np.abs(U), axis=1)
    return qv + beta * np.einsum("ti,ij,tj->t", U, R, U)


def rollout(
    system: ControlAffineSystem,
    policy: Callable | None,
    x0,
    dt: float = 0.01,
    T: float = 10.0,
    gamma: float = 0.0,
    q: Poly | None = None,
    beta: float = 1.0,
    R=None,
    norm: str = "l2",
    bound: float = DIVERGENCE_BOUND,
) -> Rollout:
    """RK4 closed loop ``xdot = f + g u(x)``; cost ``int e^{gamma t}(q + beta u^T R u) dt`` by trapezoid rule.

    ``policy`` is any callable ``(X, t) -> U`` (e.g. a :class:`ControllerArtifact`)
    or ``None`` for zero input.
    """
    steps = int(round(T / dt))
    m = system.m
    R = np.eye(m) if R is None else np.atleast_2d(R)

    def u_of(X, t):
        if policy is None or m == 0:
            return np.zeros((X.shape[0], m))
        return np.atleast_2d(policy(X, t)).reshape(X.shape[0], m)

    def rhs(X, t):
        return system.field(X, u_of(X, t))

    x = np.atleast_2d(np.asarray(x0, dtype=float))
    Xs = [x[0]]
    diverged = False
    t = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            k1 = rhs(x, t)
            k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
            k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
            k4 = rhs(x + dt * k3, t + dt)
            xn = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += dt
            if not np.all(np.isfinite(xn)) or np.linalg.norm(xn) > bound:
                diverged = True
                logger.warning("closed loop diverged at t=%.3f", t)
                break
            x = xn
            Xs.append(x[0])
    X = np.array(Xs)
    tt = dt * np.arange(len(X))
    U = u_of(X, 0.0)
    Xdot = system.field(X, U)
    L = np.exp(gamma * tt) * stage_cost(X, U, q, beta, R, norm)
    cost = np.concatenate([[0.0], np.cumsum(0.5 * dt * (L[1:] + L[:-1]))])
    return Rollout(tt, X, U, Xdot, cost, diverged)


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------


def _numeric_divergence(fun, X, h=1e-6) -> np.ndarray:
    """Central-difference divergence of a vector field ``fun: (T, n) -> (T, n)``."""
    n = X.shape[1]
    div = np.zeros(len(X))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        div += (fun(X + e)[:, i] - fun(X - e)[:, i]) / (2 * h)
    return div


def transport_values(ctrl: ControllerArtifact, X, system: ControlAffineSystem | None = None,
                     generators: GeneratorSet | None = None) -> np.ndarray:
    """``(1+alpha) b div(f a + g c) - alpha div(b f a + b g c) - gamma a b`` at the points ``X``.

    With ``generators`` the polynomial is assembled from the P-F matrices (the
    same map the synthesis used); otherwise it is evaluated from the analytic
    field, symbolically when the field is polynomial and by central
    differences otherwise.
    """
    X = np.atleast_2d(X)
    al, gam, b = ctrl.alpha, ctrl.gamma, ctrl.b
    if generators is not None:
        basis = generators.basis
        ca, fa = basis.project(ctrl.a)
        cs = [basis.project(cj) for cj in ctrl.c]
        if fa or any(f for _, f in cs):
            raise ValueError("controller polynomials exceed the generator dictionary")
        sa = basis.support(max(ctrl.a.degree, 0))
        sc = basis.support(max([cj.degree for cj in ctrl.c] + [0]))
        T = build_constraint_poly(generators, b, al, gam, sa, sc)
        v = np.concatenate([ca[sa]] + [c[sc] for c, _ in cs])
        return T.evaluate(X, v)
    if system is None:
        raise ValueError("either a system or a generator set is required")
    n = X.shape[1]
    if system.is_polynomial:
        vec = [ctrl.a * fi for fi in system.drift_polys]
        for cj, gj in zip(ctrl.c, system.input_polys):
            vec = [vi + cj * gi for vi, gi in zip(vec, gj)]
        div_v = sum((vi.diff(i) for i, vi in enumerate(vec)), Poly(n))
        div_bv = sum(((b * vi).diff(i) for i, vi in enumerate(vec)), Poly(n))
        T = (1 + al) * b * div_v - al * div_bv - gam * ctrl.a * b
        return np.atleast_1d(T(X))

    def vfield(Y):
        v = system.drift(Y) * np.atleast_1d(ctrl.a(Y))[:, None]
        G = system.inputs(Y)
        for j, cj in enumerate(ctrl.c):
            v = v + G[:, :, j] * np.atleast_1d(cj(Y))[:, None]
        return v

    div_v = _numeric_divergence(vfield, X)
    grad_b = np.stack([np.atleast_1d(b.diff(i)(X)) for i in range(n)], axis=1)
    bv = np.atleast_1d(b(X))
    # div(b v) = b div v + grad b . v
    return bv * div_v - al * np.einsum("ti,ti->t", grad_b, vfield(X)) - gam * np.atleast_1d(ctrl.a(X)) * bv


@dataclass
class CertificateReport:
    min_value: float
    max_abs: float
    scale: float
    violation_fraction: float
    n_points: int
    density_integral: float
    passed: bool
    tol: float
    assumptions: list

    def to_json(self) -> dict:
        return dict(self.__dict__)


def density_integral(ctrl: ControllerArtifact, domain, excluded, order: int = 12) -> float:
    """``int_{X \\ N} a / b**alpha`` by composite Gauss-Legendre quadrature."""
    total = 0.0
    for P, W in box_quadrature_nodes(domain, excluded, order):
        total += float(W @ (np.atleast_1d(ctrl.a(P)) / np.atleast_1d(ctrl.b(P)) ** ctrl.alpha))
    return total


def certify_density(
    ctrl: ControllerArtifact,
    domain,
    excluded,
    system: ControlAffineSystem | None = None,
    generators: GeneratorSet | None = None,
    per_axis: int | None = None,
    tol: float = 1e-6,
    chunk: int = 20_000,
) -> CertificateReport:
    """Grid check of the transport inequality on ``X \\ N``.

    Passes when the grid minimum is at least ``-tol * (1 + max |value|)``.
    """
    G = grid_points(domain, excluded, per_axis)
    vals = np.concatenate([transport_values(ctrl, G[s : s + chunk], system, generators) for s in range(0, len(G), chunk)])
    max_abs = float(np.max(np.abs(vals))) if len(vals) else 0.0
    scale = 1.0 + max_abs
    mn = float(np.min(vals)) if len(vals) else 0.0
    viol = float(np.mean(vals < -tol * scale)) if len(vals) else 0.0
    notes = []
    if ctrl.gamma > 0:
        notes.append("gamma > 0: a.e. exponential stabilizability with a decay rate above gamma is assumed, not verified")
    excluded_boxes(np.asarray(domain, dtype=float), np.asarray(excluded, dtype=float))  # validates the geometry
    return CertificateReport(
        min_value=mn, max_abs=max_abs, scale=scale, violation_fraction=viol, n_points=len(vals),
        density_integral=density_integral(ctrl, domain, excluded), passed=bool(mn >= -tol * scale),
        tol=tol, assumptions=notes,
    )
