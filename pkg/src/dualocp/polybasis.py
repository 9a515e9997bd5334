"""Multivariate polynomials, polynomial dictionaries and box quadrature.

Two representations coexist:

* :class:`Poly` is a sparse monomial-form polynomial (exponent rows plus
  coefficients) of arbitrary degree.  It supports the arithmetic the rest of
  the package needs (sums, products, partial derivatives, evaluation).
* :class:`BasisDictionary` is a finite dictionary ``Psi(x)`` (monomial or tensor
  Legendre) together with the change-of-basis matrix ``C_psi`` that writes each
  dictionary function over a common monomial list.  Coefficient vectors over
  the dictionary are wrapped in :class:`BasisPoly`.

All monomial lists use graded lexicographic order: total degree first, then
lexicographically descending exponents (so ``x1**2`` precedes ``x1*x2``).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from numpy.polynomial import legendre as npleg
from numpy.polynomial import polynomial as nppoly

logger = logging.getLogger(__name__)

KINDS = ("monomial", "legendre")


class DegreeOverflowError(ValueError):
    """Raised when a product leaves the span of a dictionary and the caller asked for strictness."""


class SingularWeightError(ValueError):
    """Raised when a rational quadrature weight is not strictly positive at a node."""


# ---------------------------------------------------------------------------
# monomial enumeration
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _monomials_cached(n_vars: int, max_degree: int) -> tuple:
    out = []
    for d in range(max_degree + 1):
        # lexicographically descending compositions of d into n_vars parts
        for combo in _compositions(d, n_vars):
            out.append(combo)
    return tuple(out)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def monomials(n_vars: int, max_degree: int) -> np.ndarray:
    """All exponent vectors of total degree <= ``max_degree`` in graded-lex order.

    >>> monomials(2, 2).tolist()
    [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]
    """
    if n_vars < 1 or max_degree < 0:
        raise ValueError("need n_vars >= 1 and max_degree >= 0")
    return np.array(_monomials_cached(int(n_vars), int(max_degree)), dtype=np.int64).reshape(-1, n_vars)


def grlex_key(exp: Sequence[int]) -> tuple:
    return (int(sum(exp)),) + tuple(-int(e) for e in exp)


def monomial_index(exps: np.ndarray) -> dict:
    """Map exponent tuple -> row index."""
    return {tuple(int(v) for v in row): i for i, row in enumerate(exps)}


def _power_table(X: np.ndarray, max_pow: int) -> np.ndarray:
    """``out[t, i, k] = X[t, i] ** k`` for k = 0..max_pow."""
    T, n = X.shape
    out = np.empty((T, n, max_pow + 1))
    out[:, :, 0] = 1.0
    for k in range(1, max_pow + 1):
        out[:, :, k] = out[:, :, k - 1] * X
    return out


def eval_monomials(exps: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Evaluate monomials ``exps`` (M x n) at points ``X`` (T x n); returns T x M."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if exps.size == 0:
        return np.zeros((X.shape[0], 0))
    pw = _power_table(X, int(exps.max()) if exps.size else 0)
    out = np.ones((X.shape[0], exps.shape[0]))
    for i in range(exps.shape[1]):
        out *= pw[:, i, exps[:, i]]
    return out


# ---------------------------------------------------------------------------
# monomial-form polynomial
# ---------------------------------------------------------------------------


class Poly:
    """Sparse polynomial in monomial form.

    Parameters
    ----------
    n_vars : int
        Number of variables.
    terms : dict, optional
        Mapping ``exponent tuple -> coefficient``.  Zero coefficients are
        dropped.
    """

    __slots__ = ("n_vars", "exps", "coeffs")

    def __init__(self, n_vars: int, terms: dict | None = None):
        self.n_vars = int(n_vars)
        terms = {} if terms is None else terms
        keys = sorted((k for k, v in terms.items() if v != 0.0), key=grlex_key)
        for k in keys:
            if len(k) != self.n_vars:
                raise ValueError(f"exponent {k} does not have {self.n_vars} entries")
        self.exps = np.array(keys, dtype=np.int64).reshape(len(keys), self.n_vars)
        self.coeffs = np.array([float(terms[k]) for k in keys], dtype=float)

    # constructors ---------------------------------------------------------
    @classmethod
    def from_arrays(cls, exps: np.ndarray, coeffs: np.ndarray) -> "Poly":
        exps = np.asarray(exps, dtype=np.int64)
        terms: dict = {}
        for e, c in zip(map(tuple, exps.tolist()), np.asarray(coeffs, dtype=float)):
            terms[e] = terms.get(e, 0.0) + c
        return cls(exps.shape[1], terms)

    @classmethod
    def constant(cls, n_vars: int, value: float) -> "Poly":
        return cls(n_vars, {(0,) * n_vars: float(value)})

    @classmethod
    def variable(cls, i: int, n_vars: int) -> "Poly":
        e = [0] * n_vars
        e[i] = 1
        return cls(n_vars, {tuple(e): 1.0})

    @classmethod
    def quadratic_form(cls, P: np.ndarray) -> "Poly":
        """Return ``x^T P x`` for a square matrix ``P``."""
        P = np.asarray(P, dtype=float)
        n = P.shape[0]
        terms: dict = {}
        for i in range(n):
            for j in range(n):
                e = [0] * n
                e[i] += 1
                e[j] += 1
                terms[tuple(e)] = terms.get(tuple(e), 0.0) + P[i, j]
        return cls(n, terms)

    # views ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return {tuple(int(v) for v in e): float(c) for e, c in zip(self.exps, self.coeffs)}

    @property
    def degree(self) -> int:
        return int(self.exps.sum(axis=1).max()) if len(self.coeffs) else 0

    def is_zero(self, tol: float = 0.0) -> bool:
        return not np.any(np.abs(self.coeffs) > tol)

    def coefficient(self, exp: Sequence[int]) -> float:
        return self.to_dict().get(tuple(exp), 0.0)

    def coeffs_on(self, exps: np.ndarray) -> tuple[np.ndarray, bool]:
        """Coefficients on the monomial list ``exps``; flag if terms fall outside."""
        idx = monomial_index(exps)
        out = np.zeros(len(exps))
        outside = False
        for e, c in zip(map(tuple, self.exps.tolist()), self.coeffs):
            k = idx.get(e)
            if k is None:
                outside = outside or c != 0.0
            else:
                out[k] = c
        return out, outside

    # arithmetic -----------------------------------------------------------
    def _check(self, other: "Poly") -> None:
        if other.n_vars != self.n_vars:
            raise ValueError("polynomials live in different variable counts")

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.constant(self.n_vars, float(other))
        self._check(other)
        t = self.to_dict()
        for e, c in other.to_dict().items():
            t[e] = t.get(e, 0.0) + c
        return Poly(self.n_vars, t)

    __radd__ = __add__

    def __neg__(self):
        return Poly.from_arrays(self.exps, -self.coeffs) if len(self.coeffs) else Poly(self.n_vars)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Poly) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Poly):
            s = float(other)
            if s == 0.0 or not len(self.coeffs):
                return Poly(self.n_vars)
            return Poly.from_arrays(self.exps, s * self.coeffs)
        self._check(other)
        t: dict = {}
        for e1, c1 in zip(self.exps.tolist(), self.coeffs):
            for e2, c2 in zip(other.exps.tolist(), other.coeffs):
                e = tuple(a + b for a, b in zip(e1, e2))
                t[e] = t.get(e, 0.0) + c1 * c2
        return Poly(self.n_vars, t)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if k < 0 or int(k) != k:
            raise ValueError("only non-negative integer powers")
        out = Poly.constant(self.n_vars, 1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def diff(self, i: int) -> "Poly":
        """Partial derivative with respect to variable ``i``."""
        t: dict = {}
        for e, c in zip(self.exps.tolist(), self.coeffs):
            if e[i] > 0:
                e2 = list(e)
                e2[i] -= 1
                t[tuple(e2)] = t.get(tuple(e2), 0.0) + c * e[i]
        return Poly(self.n_vars, t)

    def __call__(self, X) -> np.ndarray | float:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[1] != self.n_vars:
            raise ValueError(f"expected points with {self.n_vars} coordinates")
        vals = eval_monomials(self.exps, X2) @ self.coeffs if len(self.coeffs) else np.zeros(X2.shape[0])
        return float(vals[0]) if single else vals

    def affine_substitute(self, center: np.ndarray, scale: np.ndarray) -> "Poly":
        """Return ``p(center + scale * s)`` as a polynomial in ``s``."""
        n = self.n_vars
        subs = [Poly(n, {tuple(int(j == i) for j in range(n)): float(scale[i])}) + float(center[i]) for i in range(n)]
        out = Poly(n)
        cache: dict = {}
        for e, c in zip(self.exps.tolist(), self.coeffs):
            term = Poly.constant(n, c)
            for i, k in enumerate(e):
                if k:
                    key = (i, k)
                    if key not in cache:
                        cache[key] = subs[i] ** k
                    term = term * cache[key]
            out = out + term
        return out

    def __repr__(self) -> str:
        if not len(self.coeffs):
            return "Poly(0)"
        parts = []
        for e, c in zip(self.exps.tolist(), self.coeffs):
            mono = "*".join(f"x{i + 1}" + (f"^{k}" if k > 1 else "") for i, k in enumerate(e) if k)
            parts.append(f"{c:+.6g}" + (f"*{mono}" if mono else ""))
        return "Poly(" + " ".join(parts) + ")"

    # serialization ----------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "basis": {"kind": "monomial-sparse", "n_vars": self.n_vars},
            "exponents": self.exps.tolist(),
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Poly":
        n = int(obj["basis"]["n_vars"])
        exps = np.array(obj["exponents"], dtype=np.int64).reshape(-1, n)
        return cls.from_arrays(exps, np.array(obj["coeffs"], dtype=float))


def poly_mul(p: Poly, q: Poly, basis: "BasisDictionary | None" = None) -> tuple[Poly, bool]:
    """Multiply two monomial-form polynomials.

    Returns the product and an overflow flag that is set when a target
    ``basis`` is given and the product degree exceeds its ``max_degree``.
    """
    prod = p * q
    overflow = basis is not None and prod.degree > basis.max_degree
    return prod, bool(overflow)


def divergence_of_field(field_polys: Sequence[Poly]) -> Poly:
    """Sum of ``d field_j / d x_j``."""
    if not field_polys:
        raise ValueError("empty field")
    n = field_polys[0].n_vars
    if len(field_polys) != n:
        raise ValueError("field must have one component per variable")
    out = Poly(n)
    for j, fj in enumerate(field_polys):
        out = out + fj.diff(j)
    return out


def monomial_mul_matrix(p: Poly, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Matrix of ``m -> p*m`` from coefficients on ``src`` monomials to ``dst`` monomials.

    Raises ``DegreeOverflowError`` if a product monomial is missing from ``dst``.
    """
    didx = monomial_index(dst)
    out = np.zeros((len(dst), len(src)))
    for k, e in enumerate(src.tolist()):
        for pe, pc in zip(p.exps.tolist(), p.coeffs):
            r = didx.get(tuple(a + b for a, b in zip(e, pe)))
            if r is None:
                raise DegreeOverflowError("destination monomial list too small for product")
            out[r, k] += pc
    return out


def embed_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """0/1 matrix placing coefficients on ``src`` monomials into ``dst`` monomials."""
    didx = monomial_index(dst)
    out = np.zeros((len(dst), len(src)))
    for k, e in enumerate(map(tuple, src.tolist())):
        out[didx[e], k] = 1.0
    return out


def substitution_matrix(exps: np.ndarray, center: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Linear map on coefficient vectors over ``exps`` implementing ``x = center + scale*s``.

    The monomial list must be closed under taking lower-order terms (true for
    every full graded list), which keeps the map square.
    """
    n = exps.shape[1]
    idx = monomial_index(exps)
    out = np.zeros((len(exps), len(exps)))
    for k, e in enumerate(exps.tolist()):
        sub = Poly(n, {tuple(e): 1.0}).affine_substitute(center, scale)
        for se, sc in zip(map(tuple, sub.exps.tolist()), sub.coeffs):
            out[idx[se], k] += sc
    return out


# ---------------------------------------------------------------------------
# dictionaries
# ---------------------------------------------------------------------------


def _legendre_in_x(k: int, lo: float, hi: float) -> np.ndarray:
    """Power-series coefficients (ascending, in x) of P_k((2x - lo - hi)/(hi - lo))."""
    ser = npleg.leg2poly(np.eye(k + 1)[k])
    c1 = 2.0 / (hi - lo)
    c0 = -(lo + hi) / (hi - lo)
    out = np.zeros(1)
    term = np.ones(1)
    for j, cj in enumerate(ser):
        if j > 0:
            term = nppoly.polymul(term, [c0, c1])
        out = nppoly.polyadd(out, cj * term)
    res = np.zeros(k + 1)
    res[: len(out)] = out[: k + 1]
    return res


@dataclass
class BasisDictionary:
    """Polynomial dictionary ``Psi(x)`` with total-degree truncation.

    Attributes
    ----------
    kind : str
        ``"monomial"`` or ``"legendre"`` (tensor Legendre in affinely scaled
        variables).
    n_vars, max_degree : int
    domain_box : (2, n) array
        Row 0 lower bounds, row 1 upper bounds.
    exps : (Q, n) int array
        Multi-indices of the dictionary functions in graded-lex order.
    monos : (M, n) int array
        Common monomial list (here all monomials of degree <= max_degree, so M = Q).
    C_psi : (Q, M) array
        Row k holds the monomial coefficients of ``psi_k``.
    C_x : (Q, n) array
        ``x = C_x^T Psi(x)``.
    """

    kind: str
    n_vars: int
    max_degree: int
    domain_box: np.ndarray
    exps: np.ndarray = field(repr=False)
    monos: np.ndarray = field(repr=False)
    C_psi: np.ndarray = field(repr=False)
    C_x: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.exps.shape[0])

    Q = size

    @property
    def degrees(self) -> np.ndarray:
        return self.exps.sum(axis=1)

    def support(self, max_deg: int) -> np.ndarray:
        """Indices of dictionary functions with total degree <= ``max_deg``."""
        return np.flatnonzero(self.degrees <= max_deg)

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "n_vars": self.n_vars,
            "max_degree": self.max_degree,
            "domain_box": np.asarray(self.domain_box).tolist(),
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "BasisDictionary":
        return build_dictionary(d["kind"], d["n_vars"], d["max_degree"], d["domain_box"])

    # evaluation -------------------------------------------------------------
    def _scaled(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.domain_box
        return (2.0 * X - lo - hi) / (hi - lo), 2.0 / (hi - lo)

    def _univariate(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and derivatives of univariate factors, shape (T, n, d+1)."""
        d = self.max_degree
        if self.kind == "monomial":
            V = _power_table(X, d)
            D = np.zeros_like(V)
            for k in range(1, d + 1):
                D[:, :, k] = k * V[:, :, k - 1]
            return V, D
        S, ds = self._scaled(X)
        V = np.empty(X.shape + (d + 1,))
        D = np.empty_like(V)
        V[..., 0] = 1.0
        D[..., 0] = 0.0
        if d >= 1:
            V[..., 1] = S
            D[..., 1] = 1.0
        for k in range(1, d):
            # (k+1) P_{k+1} = (2k+1) s P_k - k P_{k-1};  P'_{k+1} = s P'_k + (k+1) P_k
            V[..., k + 1] = ((2 * k + 1) * S * V[..., k] - k * V[..., k - 1]) / (k + 1)
            D[..., k + 1] = S * D[..., k] + (k + 1) * V[..., k]
        D *= ds[None, :, None]
        return V, D

    def eval(self, X) -> np.ndarray:
        """Evaluate ``Psi`` at a point (returns Q-vector) or at T points (T x Q)."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[1] != self.n_vars:
            raise ValueError(f"expected points with {self.n_vars} coordinates")
        V, _ = self._univariate(X2)
        out = np.ones((X2.shape[0], self.size))
        for i in range(self.n_vars):
            out *= V[:, i, self.exps[:, i]]
        return out[0] if single else out

    def grad(self, X) -> np.ndarray:
        """Gradients: (Q, n) for one point, (T, Q, n) for T points."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[1] != self.n_vars:
            raise ValueError(f"expected points with {self.n_vars} coordinates")
        V, D = self._univariate(X2)
        T = X2.shape[0]
        n = self.n_vars
        factors = np.stack([V[:, i, self.exps[:, i]] for i in range(n)], axis=2)  # T,Q,n
        dfac = np.stack([D[:, i, self.exps[:, i]] for i in range(n)], axis=2)
        out = np.empty((T, self.size, n))
        for i in range(n):
            prod = dfac[:, :, i].copy()
            for j in range(n):
                if j != i:
                    prod *= factors[:, :, j]
            out[:, :, i] = prod
        return out[0] if single else out

    # conversions --------------------------------------------------------------
    def to_poly(self, c: np.ndarray) -> Poly:
        """Monomial form of ``c^T Psi``."""
        c = np.asarray(c, dtype=float)
        if c.shape != (self.size,):
            raise ValueError(f"coefficient vector must have length {self.size}")
        return Poly.from_arrays(self.monos, self.C_psi.T @ c)

    def project(self, p: Poly) -> tuple[np.ndarray, bool]:
        """Dictionary coefficients of ``p`` via the pseudo-inverse of ``C_psi``.

        Terms of ``p`` outside the common monomial list are dropped and the
        returned flag is set.
        """
        m, outside = p.coeffs_on(self.monos)
        return self._pinv_T() @ m, outside

    def _pinv_T(self) -> np.ndarray:
        cache = getattr(self, "_pinv_cache", None)
        if cache is None:
            cache = np.linalg.pinv(self.C_psi.T)
            object.__setattr__(self, "_pinv_cache", cache)
        return cache

    def mul_matrix(self, p: Poly, columns: Iterable[int] | None = None) -> tuple[np.ndarray, bool]:
        """Matrix of ``c -> project(p * c^T Psi)`` (Q x Q) and an overflow flag.

        Only the requested ``columns`` are filled (others stay zero).
        """
        cols = range(self.size) if columns is None else columns
        out = np.zeros((self.size, self.size))
        overflow = False
        for k in cols:
            prod = p * Poly.from_arrays(self.monos, self.C_psi[k])
            ck, flag = self.project(prod)
            out[:, k] = ck
            overflow = overflow or flag
        return out, overflow


def build_dictionary(kind: str, n_vars: int, max_degree: int, domain_box=None) -> BasisDictionary:
    """Build a total-degree dictionary.

    Parameters
    ----------
    kind : {"monomial", "legendre"}
    n_vars : int
    max_degree : int
        Must be at least 1 so that ``x`` lies in the span.
    domain_box : array-like, shape (2, n) or (2,)
        Interval per variable; a pair ``(lo, hi)`` is broadcast.  Legendre
        factors are evaluated at ``(2x - lo - hi)/(hi - lo)``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dictionary kind {kind!r}")
    if max_degree < 1:
        raise ValueError("max_degree must be >= 1 (first-degree terms are required)")
    box = np.array([[-1.0], [1.0]]) if domain_box is None else np.asarray(domain_box, dtype=float)
    if box.ndim == 1:
        box = box.reshape(2, 1)
    box = np.broadcast_to(box, (2, n_vars)).astype(float).copy()
    if np.any(box[1] <= box[0]):
        raise ValueError("domain_box must be nonempty in every variable")
    exps = monomials(n_vars, max_degree)
    monos = exps.copy()
    midx = monomial_index(monos)
    Q = len(exps)
    if kind == "monomial":
        C_psi = np.eye(Q)
    else:
        uni = [[_legendre_in_x(k, box[0, i], box[1, i]) for k in range(max_degree + 1)] for i in range(n_vars)]
        C_psi = np.zeros((Q, Q))
        for r, alpha in enumerate(exps.tolist()):
            factors = [uni[i][alpha[i]] for i in range(n_vars)]
            for powers in itertools.product(*[range(a + 1) for a in alpha]):
                coef = 1.0
                for i, pw in enumerate(powers):
                    coef *= factors[i][pw]
                if coef != 0.0:
                    C_psi[r, midx[powers]] += coef
    C_x = np.zeros((Q, n_vars))
    for i in range(n_vars):
        e = [0] * n_vars
        e[i] = 1
        m = np.zeros(Q)
        m[midx[tuple(e)]] = 1.0
        C_x[:, i] = np.linalg.solve(C_psi.T, m)
    return BasisDictionary(kind, n_vars, max_degree, box, exps, monos, C_psi, C_x)


def eval_basis(d: BasisDictionary, x) -> np.ndarray:
    return d.eval(x)


def grad_basis(d: BasisDictionary, x) -> np.ndarray:
    return d.grad(x)


@dataclass
class BasisPoly:
    """Coefficient vector over a dictionary."""

    basis: BasisDictionary
    coeffs: np.ndarray
    overflow: bool = False

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.basis.size,):
            raise ValueError("coefficient vector length does not match the dictionary")

    def __call__(self, X):
        vals = self.basis.eval(np.atleast_2d(X)) @ self.coeffs
        return float(vals[0]) if np.asarray(X).ndim == 1 else vals

    def to_json(self) -> dict:
        return {"basis": self.basis.descriptor(), "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "BasisPoly":
        return cls(BasisDictionary.from_descriptor(obj["basis"]), np.array(obj["coeffs"]))


def to_monomial(p: BasisPoly) -> Poly:
    return p.basis.to_poly(p.coeffs)


def from_monomial(p: Poly, basis: BasisDictionary) -> BasisPoly:
    c, flag = basis.project(p)
    return BasisPoly(basis, c, overflow=flag)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def _graded_breaks(lo: float, hi: float, near: float, width: float) -> list:
    """Breakpoints of [lo, hi] refined geometrically toward the point ``near``.

    ``near`` is an endpoint of the interval or lies inside it; cells touching it
    have length ``width`` and grow by a factor two away from it.
    """
    pts = {lo, hi}
    if width <= 0:
        return sorted(pts)
    for side in (-1.0, 1.0):
        step = width
        x = near
        while True:
            x = near + side * step
            if not (lo < x < hi):
                break
            pts.add(x)
            step *= 2.0
    if lo < near < hi:
        pts.add(near)
    return sorted(pts)


def excluded_boxes(domain_box: np.ndarray, excluded_box: np.ndarray) -> list:
    """Decompose ``X \\ N`` into 2n axis-aligned boxes by peeling one axis at a time."""
    lo, hi = np.asarray(domain_box, dtype=float)
    nlo, nhi = np.asarray(excluded_box, dtype=float)
    n = len(lo)
    boxes = []
    cur_lo, cur_hi = lo.copy(), hi.copy()
    for i in range(n):
        below_lo, below_hi = cur_lo.copy(), cur_hi.copy()
        below_hi[i] = nlo[i]
        above_lo, above_hi = cur_lo.copy(), cur_hi.copy()
        above_lo[i] = nhi[i]
        boxes.append((below_lo, below_hi))
        boxes.append((above_lo, above_hi))
        cur_lo[i], cur_hi[i] = nlo[i], nhi[i]
    return [b for b in boxes if np.all(b[1] > b[0])]


def quadrature_order(basis_degree: int, weight_degree: int, b_degree: int, alpha: float) -> int:
    return int(math.ceil((weight_degree + basis_degree + alpha * b_degree) / 2.0)) + 8


def box_quadrature_nodes(domain_box, excluded_box=None, order: int = 10):
    """Yield ``(points, weights)`` chunks covering ``X \\ N``.

    Each half-slab box is split into sub-boxes graded geometrically toward
    ``N`` (cells next to ``N`` have the width of ``N``) and a tensor
    Gauss-Legendre rule of ``order`` points per axis is applied per sub-box.
    """
    domain_box = np.asarray(domain_box, dtype=float)
    g, gw = npleg.leggauss(order)
    if excluded_box is None:
        boxes = [(domain_box[0], domain_box[1])]
        nlo = nhi = None
    else:
        excluded_box = np.asarray(excluded_box, dtype=float)
        if np.any(excluded_box[0] <= domain_box[0]) or np.any(excluded_box[1] >= domain_box[1]):
            raise ValueError("excluded box must lie strictly inside the domain")
        boxes = excluded_boxes(domain_box, excluded_box)
        nlo, nhi = excluded_box
    for blo, bhi in boxes:
        axes = []
        for i in range(len(blo)):
            if nlo is None:
                br = [blo[i], bhi[i]]
            else:
                w = nhi[i] - nlo[i]
                center = 0.5 * (nlo[i] + nhi[i])
                if bhi[i] <= nlo[i]:
                    br = _graded_breaks(blo[i], bhi[i], bhi[i], w)
                elif blo[i] >= nhi[i]:
                    br = _graded_breaks(blo[i], bhi[i], blo[i], w)
                elif blo[i] >= nlo[i] and bhi[i] <= nhi[i]:
                    br = [blo[i], bhi[i]]
                else:
                    left = _graded_breaks(blo[i], nlo[i], nlo[i], w)
                    right = _graded_breaks(nhi[i], bhi[i], nhi[i], w)
                    br = sorted(set(left) | set(right) | {center})
            pts, wts = [], []
            for a, b_ in zip(br[:-1], br[1:]):
                pts.append(0.5 * (b_ - a) * g + 0.5 * (a + b_))
                wts.append(0.5 * (b_ - a) * gw)
            axes.append((np.concatenate(pts), np.concatenate(wts)))
        grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
        wgrids = np.meshgrid(*[a[1] for a in axes], indexing="ij")
        P = np.stack([gg.ravel() for gg in grids], axis=1)
        W = np.prod(np.stack([ww.ravel() for ww in wgrids], axis=1), axis=1)
        yield P, W


def quadrature_moments(
    basis: BasisDictionary,
    weight: Poly,
    b: Poly,
    alpha: float,
    domain_box,
    excluded_box=None,
    order: int | None = None,
    chunk: int = 200_000,
) -> np.ndarray:
    """Integrate ``weight * Psi / b**alpha`` over ``X \\ N``.

    Returns a Q-vector.  Raises :class:`SingularWeightError` when ``b`` is not
    strictly positive at some node.
    """
    if order is None:
        order = quadrature_order(basis.max_degree, weight.degree, b.degree, alpha)
    total = np.zeros(basis.size)
    for P, W in box_quadrature_nodes(domain_box, excluded_box, order):
        for s in range(0, len(W), chunk):
            p, w = P[s : s + chunk], W[s : s + chunk]
            bv = b(p)
            if alpha != 0 and np.any(bv <= 0):
                raise SingularWeightError("b(x) is not strictly positive at a quadrature node")
            f = w * weight(p) / (bv**alpha if alpha != 0 else 1.0)
            total += f @ basis.eval(p)
    return total
