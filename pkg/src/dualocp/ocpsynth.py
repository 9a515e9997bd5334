"""Convex density-space OCP as a solver-independent SOS program.

Decision polynomials are stored as coefficient vectors over (subsets of) the
generator dictionary.  The density is ``rho = a / b**alpha`` and the control
density ``rho_bar_j = c_j / b**alpha``; the transport inequality

    (1+alpha) b div(f a + g c) - alpha div(b f a + b g c) - gamma a b >= h0_floor |x|^2

is written with the Perron-Frobenius matrices of a :class:`GeneratorSet`, which
keeps it affine in the decisions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gedmd import GeneratorSet, field_polys
from .polybasis import (
    BasisDictionary,
    DegreeOverflowError,
    Poly,
    monomial_mul_matrix,
    monomials,
    quadrature_moments,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# decision-affine polynomials
# ---------------------------------------------------------------------------


class AffinePoly:
    """Polynomial whose coefficients are affine in a decision vector ``v``.

    ``coef[k, 0]`` is the constant part and ``coef[k, 1 + i]`` the sensitivity to
    ``v[i]`` of the coefficient of monomial ``exps[k]``.  ``exps`` is always a
    full graded-lex list ``monomials(n, deg)``.
    """

    __slots__ = ("n_vars", "n_dec", "exps", "coef")

    def __init__(self, n_vars: int, n_dec: int, max_degree: int, coef: np.ndarray | None = None):
        self.n_vars = int(n_vars)
        self.n_dec = int(n_dec)
        self.exps = monomials(n_vars, max_degree)
        if coef is None:
            coef = np.zeros((len(self.exps), 1 + n_dec))
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (len(self.exps), 1 + n_dec):
            raise ValueError(f"coefficient block has shape {coef.shape}, expected {(len(self.exps), 1 + n_dec)}")
        self.coef = coef

    @property
    def max_degree(self) -> int:
        return int(self.exps[-1].sum()) if len(self.exps) else 0

    @classmethod
    def from_poly(cls, p: Poly, n_dec: int, max_degree: int | None = None) -> "AffinePoly":
        deg = p.degree if max_degree is None else max_degree
        out = cls(p.n_vars, n_dec, deg)
        vals, outside = p.coeffs_on(out.exps)
        if outside:
            raise DegreeOverflowError("polynomial degree exceeds the requested monomial list")
        out.coef[:, 0] = vals
        return out

    def lifted(self, max_degree: int) -> "AffinePoly":
        if max_degree < self.max_degree:
            raise ValueError("cannot lower the degree of the monomial list")
        out = AffinePoly(self.n_vars, self.n_dec, max_degree)
        out.coef[: len(self.exps)] = self.coef
        return out

    def __add__(self, other: "AffinePoly") -> "AffinePoly":
        d = max(self.max_degree, other.max_degree)
        a, b = self.lifted(d), other.lifted(d)
        return AffinePoly(self.n_vars, self.n_dec, d, a.coef + b.coef)

    def __neg__(self):
        return AffinePoly(self.n_vars, self.n_dec, self.max_degree, -self.coef)

    def __sub__(self, other):
        return self + (-other)

    def scaled(self, s: float) -> "AffinePoly":
        return AffinePoly(self.n_vars, self.n_dec, self.max_degree, s * self.coef)

    def degree(self, tol: float = 0.0) -> int:
        """Largest degree whose coefficient row depends on anything (constant or decisions)."""
        nz = np.flatnonzero(np.any(np.abs(self.coef) > tol, axis=1))
        return int(self.exps[nz[-1]].sum()) if len(nz) else 0

    def substitute(self, v: np.ndarray) -> Poly:
        vals = self.coef[:, 0] + self.coef[:, 1:] @ np.asarray(v, dtype=float)
        return Poly.from_arrays(self.exps, vals)

    def evaluate(self, X: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.substitute(v)(np.atleast_2d(X))

    def to_json(self) -> dict:
        return {"n_vars": self.n_vars, "n_dec": self.n_dec, "max_degree": self.max_degree, "coef": self.coef.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "AffinePoly":
        return cls(obj["n_vars"], obj["n_dec"], obj["max_degree"], np.array(obj["coef"]).reshape(-1, 1 + obj["n_dec"]))


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------


@dataclass
class OcpSpec:
    """Discounted OCP data (see README for the meaning of every field)."""

    n: int
    m: int
    gamma: float = 0.0
    alpha: int = 4
    beta: float = 1.0
    q: Poly | None = None
    R: np.ndarray | None = None
    b: Poly | None = None
    domain: np.ndarray | None = None
    excluded: np.ndarray | None = None
    deg_a: int = 1
    deg_c: int = 2
    deg_s: int = 2
    deg_w: int | None = None
    norm: str = "l2"
    input_bound: float | None = None
    h0_floor: float = 1e-3
    normalize_a0: bool = True
    positivity: str = "box"
    cut_hole: bool = True

    def __post_init__(self):
        if self.q is None:
            self.q = sum((Poly.variable(i, self.n) ** 2 for i in range(self.n)), Poly(self.n))
        self.R = np.eye(self.m) if self.R is None else np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.domain is not None:
            self.domain = _box(self.domain, self.n)
        if self.excluded is not None:
            self.excluded = _box(self.excluded, self.n)

    def validate(self, n_samples: int = 1000, seed: int = 0) -> None:
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be l1 or l2, got {self.norm!r}")
        if int(self.alpha) != self.alpha or self.alpha <= 0:
            raise ValueError("alpha must be a positive integer")
        if self.R.shape != (self.m, self.m) or not np.allclose(self.R, self.R.T):
            raise ValueError("R must be a symmetric m x m matrix")
        if np.linalg.eigvalsh(self.R)[0] <= 0:
            raise ValueError("R must be positive definite")
        if self.b is None or self.domain is None or self.excluded is None:
            raise ValueError("b, domain and excluded box are required")
        if np.any(self.excluded[0] <= self.domain[0]) or np.any(self.excluded[1] >= self.domain[1]):
            raise ValueError("excluded box N must lie strictly inside the domain X")
        if self.norm == "l1" and self.deg_s < self.deg_c:
            raise ValueError("deg_s must be >= deg_c for the L1 program")
        if self.positivity not in ("box", "global"):
            raise ValueError("positivity must be 'box' or 'global'")
        rng = np.random.default_rng(seed)
        pts = rng.uniform(self.domain[0], self.domain[1], size=(4 * n_samples, self.n))
        inside = np.all((pts > self.excluded[0]) & (pts < self.excluded[1]), axis=1)
        pts = pts[~inside][:n_samples]
        if np.any(self.b(pts) <= 0):
            raise ValueError("b must be strictly positive on X \\ N")
        if self.q(np.zeros(self.n)) != 0 or np.any(self.q(pts) < 0):
            raise ValueError("q must be nonnegative with q(0) = 0")


def _box(b, n) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b.reshape(2, 1)
    return np.broadcast_to(b, (2, n)).astype(float).copy()


@dataclass
class SosConstraint:
    name: str
    poly: AffinePoly
    box: np.ndarray | None = None  # positivity required on this box only
    hole: float | None = None  # positivity not required inside the ball of this radius


@dataclass
class MatrixConstraint:
    name: str
    entries: list  # p x p nested list of AffinePoly (symmetric)
    z_degree: int


@dataclass
class SosProgram:
    """Decisions, linear objective, SOS / PSD-matrix constraints and linear equalities."""

    n_vars: int
    basis: BasisDictionary
    decisions: dict  # name -> (offset, support indices into the dictionary)
    n_dec: int
    objective: np.ndarray
    sos: list = field(default_factory=list)
    matrices: list = field(default_factory=list)
    lin_eq: list = field(default_factory=list)  # (name, row, rhs)
    scale_box: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def decision_coeffs(self, name: str, v: np.ndarray) -> np.ndarray:
        """Full dictionary coefficient vector of decision ``name``."""
        off, sup = self.decisions[name]
        c = np.zeros(self.basis.size)
        c[sup] = v[off : off + len(sup)]
        return c

    def decision_poly(self, name: str, v: np.ndarray) -> Poly:
        return self.basis.to_poly(self.decision_coeffs(name, v))

    def selector(self, name: str) -> np.ndarray:
        """Matrix mapping the decision vector to the full coefficient vector of ``name``."""
        off, sup = self.decisions[name]
        S = np.zeros((self.basis.size, self.n_dec))
        S[sup, off + np.arange(len(sup))] = 1.0
        return S

    def validate(self) -> None:
        if self.objective.shape != (self.n_dec,):
            raise ValueError("objective length does not match the decision count")
        for c in self.sos:
            if c.poly.n_dec != self.n_dec:
                raise ValueError(f"constraint {c.name} references an unknown decision layout")

    def to_json(self) -> dict:
        return {
            "basis": self.basis.descriptor(),
            "decisions": {k: [int(o), [int(i) for i in s]] for k, (o, s) in self.decisions.items()},
            "n_dec": self.n_dec,
            "objective": self.objective.tolist(),
            "sos": [{"name": c.name, "poly": c.poly.to_json(), "box": None if c.box is None else c.box.tolist(), "hole": c.hole} for c in self.sos],
            "matrices": [
                {"name": mc.name, "z_degree": mc.z_degree, "entries": [[e.to_json() for e in row] for row in mc.entries]}
                for mc in self.matrices
            ],
            "lin_eq": [{"name": nm, "row": r.tolist(), "rhs": float(rhs)} for nm, r, rhs in self.lin_eq],
            "scale_box": None if self.scale_box is None else self.scale_box.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SosProgram":
        basis = BasisDictionary.from_descriptor(obj["basis"])
        return cls(
            n_vars=basis.n_vars,
            basis=basis,
            decisions={k: (o, np.array(s, dtype=int)) for k, (o, s) in obj["decisions"].items()},
            n_dec=obj["n_dec"],
            objective=np.array(obj["objective"]),
            sos=[SosConstraint(c["name"], AffinePoly.from_json(c["poly"]), None if c["box"] is None else np.array(c["box"]), c.get("hole")) for c in obj["sos"]],
            matrices=[
                MatrixConstraint(mc["name"], [[AffinePoly.from_json(e) for e in row] for row in mc["entries"]], mc["z_degree"])
                for mc in obj["matrices"]
            ],
            lin_eq=[(e["name"], np.array(e["row"]), e["rhs"]) for e in obj["lin_eq"]],
            scale_box=None if obj["scale_box"] is None else np.array(obj["scale_box"]),
            meta=obj.get("meta", {}),
        )


# ---------------------------------------------------------------------------
# constraint assembly
# ---------------------------------------------------------------------------


def _poly_of_columns(basis: BasisDictionary, cols: np.ndarray, n_dec: int, offsets: np.ndarray, deg: int) -> AffinePoly:
    """AffinePoly whose decision ``offsets[k]`` multiplies the monomial column ``cols[:, k]``."""
    out = AffinePoly(basis.n_vars, n_dec, deg)
    out.coef[: len(cols), 1 + offsets] += cols
    return out


def product_map(basis: BasisDictionary, b: Poly, support: np.ndarray) -> np.ndarray:
    """Dictionary matrix of ``c -> project(b * c^T Psi)`` restricted to ``support`` columns."""
    need = int(basis.degrees[support].max()) + b.degree if len(support) else 0
    if need > basis.max_degree:
        raise DegreeOverflowError(f"dictionary too small: products with b need max_degree >= {need}, have {basis.max_degree}")
    Pi, flag = basis.mul_matrix(b, columns=support)
    assert not flag
    return Pi


def build_constraint_poly(
    generators: GeneratorSet,
    b: Poly,
    alpha: float,
    gamma: float,
    a_support: np.ndarray,
    c_support: np.ndarray,
    a_offset: int = 0,
    c_offsets: Sequence[int] | None = None,
    n_dec: int | None = None,
) -> AffinePoly:
    """Transport polynomial affine in ``(C_a, C_c1..C_cm)``.

    The decisions are laid out as ``C_a`` (restricted to ``a_support``) at
    ``a_offset`` and each ``C_cj`` (restricted to ``c_support``) at
    ``c_offsets[j]``; by default they are packed contiguously.
    """
    basis = generators.basis
    m = generators.m
    a_support = np.asarray(a_support, dtype=int)
    c_support = np.asarray(c_support, dtype=int)
    if c_offsets is None:
        c_offsets = [a_offset + len(a_support) + j * len(c_support) for j in range(m)]
    if n_dec is None:
        n_dec = max([a_offset + len(a_support)] + [o + len(c_support) for o in c_offsets])
    D = basis.max_degree
    degT = D + b.degree
    monosT = monomials(basis.n_vars, degT)
    E = basis.C_psi.T  # dictionary coefficients -> monomial coefficients
    Mb = monomial_mul_matrix(b, basis.monos, monosT)
    grad_b = [b.diff(i) for i in range(basis.n_vars)]

    def block(j, support, with_gamma):
        # div(b F phi) = b div(F phi) + (grad b . F) phi, so
        # (1+alpha) b P phi - alpha div(b F phi) = b P phi - alpha (grad b . F) phi
        field = field_polys(generators.L[j], basis)
        bF = sum((gb * fi for gb, fi in zip(grad_b, field)), Poly(basis.n_vars))
        dsup = int(basis.degrees[support].max())
        src = monomials(basis.n_vars, dsup)
        terms = bF.to_dict()
        kept = Poly(basis.n_vars, {e: v for e, v in terms.items() if sum(e) + dsup <= degT})
        if len(kept.to_dict()) < len(terms):
            logger.info("transport block %d: dropping grad(b).F terms above degree %d", j, degT - dsup)
        MbF = monomial_mul_matrix(kept, src, monosT)
        cols = Mb @ (E @ generators.P[j][:, support]) - alpha * MbF @ E[: len(src), support]
        if with_gamma:
            cols -= gamma * Mb @ E[:, support]
        return cols

    out = _poly_of_columns(basis, block(0, a_support, True), n_dec, a_offset + np.arange(len(a_support)), degT)
    for j in range(m):
        cols = block(j + 1, c_support, False)
        out = out + _poly_of_columns(basis, cols, n_dec, c_offsets[j] + np.arange(len(c_support)), degT)
    return out


def moments(spec: OcpSpec, basis: BasisDictionary) -> tuple[np.ndarray, np.ndarray]:
    """Cost vectors ``d1`` (weight q) and ``d2`` (weight 1)."""
    d1 = quadrature_moments(basis, spec.q, spec.b, spec.alpha, spec.domain, spec.excluded)
    d2 = quadrature_moments(basis, Poly.constant(spec.n, 1.0), spec.b, spec.alpha, spec.domain, spec.excluded)
    return d1, d2


def _layout(names_sizes):
    dec = {}
    off = 0
    for name, sup in names_sizes:
        dec[name] = (off, np.asarray(sup, dtype=int))
        off += len(sup)
    return dec, off


def _decision_affine(prog_basis, n_dec, off, sup, deg=None, sign=1.0) -> AffinePoly:
    """AffinePoly equal to ``sign * (decision)^T Psi``."""
    cols = prog_basis.C_psi.T[:, sup]
    deg = prog_basis.max_degree if deg is None else deg
    out = AffinePoly(prog_basis.n_vars, n_dec, deg)
    M = len(prog_basis.monos)
    if len(out.exps) >= M:
        out.coef[:M, 1 + off + np.arange(len(sup))] = sign * cols
    else:
        if np.any(cols[len(out.exps):]):
            raise DegreeOverflowError("decision polynomial exceeds the requested degree")
        out.coef[:, 1 + off + np.arange(len(sup))] = sign * cols[: len(out.exps)]
    return out


def _common(spec: OcpSpec, generators: GeneratorSet, extra):
    spec.validate()
    basis = generators.basis
    if generators.m != spec.m or basis.n_vars != spec.n:
        raise ValueError("generator set does not match the OCP dimensions")
    for nm, dg in (("deg_a", spec.deg_a), ("deg_c", spec.deg_c)):
        if dg > basis.max_degree:
            raise ValueError(f"{nm}={dg} exceeds the dictionary degree {basis.max_degree}")
    sup_a = basis.support(spec.deg_a)
    sup_c = basis.support(spec.deg_c)
    layout = [("a", sup_a)] + [(f"c{j + 1}", sup_c) for j in range(spec.m)] + extra
    dec, n_dec = _layout(layout)
    T = build_constraint_poly(
        generators, spec.b, spec.alpha, spec.gamma, sup_a, sup_c,
        a_offset=dec["a"][0], c_offsets=[dec[f"c{j + 1}"][0] for j in range(spec.m)], n_dec=n_dec,
    )
    if spec.h0_floor:
        T = T - AffinePoly.from_poly(spec.h0_floor * Poly.quadratic_form(np.eye(spec.n)), n_dec, T.max_degree)
    box = spec.domain if spec.positivity == "box" else None
    prog = SosProgram(spec.n, basis, dec, n_dec, np.zeros(n_dec), scale_box=spec.domain.copy())
    # the transport inequality is only imposed on X \ N; the inscribed ball of N is cut out
    hole = float(np.min(0.5 * (spec.excluded[1] - spec.excluded[0]))) if spec.cut_hole else None
    prog.sos.append(SosConstraint("transport", T, box, hole))
    prog.sos.append(SosConstraint("a", _decision_affine(basis, n_dec, dec["a"][0], sup_a, spec.deg_a), box))
    if spec.normalize_a0:
        row = np.zeros(n_dec)
        row[dec["a"][0] + np.arange(len(sup_a))] = basis.eval(np.zeros(spec.n))[sup_a]
        prog.lin_eq.append(("a(0)=1", row, 1.0))
    prog.meta.update({
        "gamma": spec.gamma, "alpha": spec.alpha, "beta": spec.beta, "norm": spec.norm,
        "h0_floor": spec.h0_floor, "positivity": spec.positivity,
        "b": spec.b.to_json(), "generator_digest": generators.digest(),
    })
    return prog, basis, dec, n_dec, box


def build_l1_program(spec: OcpSpec, generators: GeneratorSet, d1=None, d2=None) -> SosProgram:
    """L1-cost program: SOS constraints {transport, a, s_j - c_j, s_j + c_j}."""
    if spec.norm != "l1":
        raise ValueError("spec.norm must be 'l1'")
    if spec.deg_s < spec.deg_c:
        raise ValueError("deg_s must be >= deg_c")
    basis = generators.basis
    if spec.deg_s > basis.max_degree:
        raise ValueError("deg_s exceeds the dictionary degree")
    sup_s = basis.support(spec.deg_s)
    prog, basis, dec, n_dec, box = _common(spec, generators, [(f"s{j + 1}", sup_s) for j in range(spec.m)])
    if d1 is None or d2 is None:
        d1, d2 = moments(spec, basis)
    obj = np.zeros(n_dec)
    off, sup = dec["a"]
    obj[off : off + len(sup)] = d1[sup]
    for j in range(spec.m):
        off_s, sup_sj = dec[f"s{j + 1}"]
        obj[off_s : off_s + len(sup_sj)] += spec.beta * d2[sup_sj]
        off_c, sup_cj = dec[f"c{j + 1}"]
        s_poly = _decision_affine(basis, n_dec, off_s, sup_sj, spec.deg_s)
        c_poly = _decision_affine(basis, n_dec, off_c, sup_cj, spec.deg_s)
        prog.sos.append(SosConstraint(f"s{j + 1}-c{j + 1}", s_poly - c_poly, box))
        prog.sos.append(SosConstraint(f"s{j + 1}+c{j + 1}", s_poly + c_poly, box))
    prog.objective = obj
    prog.meta["d1"] = d1.tolist()
    prog.meta["d2"] = d2.tolist()
    return prog


def l2_z_degree(basis: BasisDictionary) -> int:
    return basis.max_degree // 2 + 1


def build_l2_program(spec: OcpSpec, generators: GeneratorSet, d1=None, d2=None) -> SosProgram:
    """L2-cost program with the Schur matrix ``[[w, c^T], [c, a R^-1]] >= 0``."""
    if spec.norm != "l2":
        raise ValueError("spec.norm must be 'l2'")
    basis = generators.basis
    deg_w = basis.max_degree if spec.deg_w is None else spec.deg_w
    sup_w = basis.support(deg_w)
    prog, basis, dec, n_dec, box = _common(spec, generators, [("w", sup_w)])
    if d1 is None or d2 is None:
        d1, d2 = moments(spec, basis)
    obj = np.zeros(n_dec)
    off, sup = dec["a"]
    obj[off : off + len(sup)] = d1[sup]
    off_w, _ = dec["w"]
    obj[off_w : off_w + len(sup_w)] = spec.beta * d2[sup_w]
    prog.objective = obj
    zdeg = l2_z_degree(basis)
    D = 2 * zdeg
    Rinv = np.linalg.inv(spec.R)
    p = 1 + spec.m
    a_poly = _decision_affine(basis, n_dec, off, sup, D)
    entries = [[None] * p for _ in range(p)]
    entries[0][0] = _decision_affine(basis, n_dec, off_w, sup_w, D)
    for j in range(spec.m):
        cj = _decision_affine(basis, n_dec, dec[f"c{j + 1}"][0], dec[f"c{j + 1}"][1], D)
        entries[0][j + 1] = entries[j + 1][0] = cj
        for k in range(spec.m):
            entries[j + 1][k + 1] = a_poly.scaled(Rinv[j, k])
    prog.matrices.append(MatrixConstraint("schur", entries, zdeg))
    prog.meta["d1"] = d1.tolist()
    prog.meta["d2"] = d2.tolist()
    return prog


def build_program(spec: OcpSpec, generators: GeneratorSet, d1=None, d2=None) -> SosProgram:
    prog = build_l1_program(spec, generators, d1, d2) if spec.norm == "l1" else build_l2_program(spec, generators, d1, d2)
    if spec.input_bound is not None:
        prog = add_input_bound(prog, spec.input_bound, spec)
    return prog


def add_input_bound(program: SosProgram, M_bound: float, spec: OcpSpec) -> SosProgram:
    """Append ``[[M a b^alpha, c^T], [c, I]] >= 0`` (i.e. ``|c|^2 <= M a b^alpha``)."""
    if M_bound <= 0:
        raise ValueError("input bound must be positive")
    if int(spec.alpha) != spec.alpha:
        raise ValueError("input bound needs an integer alpha (b**alpha must be a polynomial)")
    basis = program.basis
    b_alpha = spec.b ** int(spec.alpha)
    off, sup = program.decisions["a"]
    deg_entry = int(basis.degrees[sup].max()) + b_alpha.degree
    zdeg = max(l2_z_degree(basis), math.ceil(deg_entry / 2), math.ceil(spec.deg_c / 2))
    D = 2 * zdeg
    n_dec = program.n_dec
    monosD = monomials(basis.n_vars, D)
    src = monomials(basis.n_vars, int(basis.degrees[sup].max()))
    Mba = monomial_mul_matrix(b_alpha, src, monosD)
    aba = AffinePoly(basis.n_vars, n_dec, D)
    aba.coef[:, 1 + off + np.arange(len(sup))] = M_bound * (Mba @ basis.C_psi.T[: len(src), sup])
    p = 1 + spec.m
    entries = [[None] * p for _ in range(p)]
    entries[0][0] = aba
    for j in range(spec.m):
        cj = _decision_affine(basis, n_dec, *program.decisions[f"c{j + 1}"], D)
        entries[0][j + 1] = entries[j + 1][0] = cj
        for k in range(spec.m):
            entries[j + 1][k + 1] = AffinePoly.from_poly(Poly.constant(basis.n_vars, float(j == k)), n_dec, D)
    program.matrices.append(MatrixConstraint("input_bound", entries, zdeg))
    program.meta["input_bound"] = float(M_bound)
    return program


def save_program(prog: SosProgram, path) -> None:
    with open(path, "w") as fh:
        json.dump(prog.to_json(), fh)
