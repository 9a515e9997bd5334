"""Compile an :class:`SosProgram` into a standard-form conic problem and back.

Every polynomial identity is first rewritten in scaled variables
``s = (x - center) / halfwidth`` of the program's ``scale_box`` (an invertible
affine change of variables, so SOS membership is unchanged) to keep Gram
entries of comparable magnitude on wide boxes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import ConicSolution, SdpProblem, smat, solve, svec_index, svec_len
from .ocpsynth import AffinePoly, SosProgram
from .polybasis import Poly, monomial_index, monomials, substitution_matrix

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


class CompileError(ValueError):
    """The program cannot be represented (or is infeasible by construction)."""


class SolveError(RuntimeError):
    """The conic solver did not return an optimal point."""

    def __init__(self, message: str, solution: ConicSolution | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.solution = solution
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


@dataclass
class _Block:
    """A PSD variable block and where it came from."""

    owner: str
    role: str  # "gram", "multiplier:<i>", "matrix"
    basis: np.ndarray  # exponent rows of the Gram monomial vector z
    p: int = 1  # Kronecker factor (matrix constraints)
    multiplier: Poly | None = None

    @property
    def side(self) -> int:
        return len(self.basis) * self.p


@dataclass
class _Rows:
    """Equality rows ``sum_dec coef*v + sum_G coef*G = rhs`` collected per constraint."""

    owner: str
    dec: list = field(default_factory=list)  # (row, dec index, value)
    gram: list = field(default_factory=list)  # (row, block index, svec index, value)
    rhs: list = field(default_factory=list)
    labels: list = field(default_factory=list)


def _scaled_affine(poly: AffinePoly, center, scale) -> AffinePoly:
    if center is None:
        return poly
    S = substitution_matrix(poly.exps, center, scale)
    return AffinePoly(poly.n_vars, poly.n_dec, poly.max_degree, S @ poly.coef)


def _gram_contrib(zexps: np.ndarray, mult: Poly | None, target_idx: dict, n_vars: int):
    """Yield (monomial row, svec index, coefficient) for ``mult * z^T G z``."""
    k = len(zexps)
    mult_terms = [((0,) * n_vars, 1.0)] if mult is None else list(zip(map(tuple, mult.exps.tolist()), mult.coeffs))
    zl = zexps.tolist()
    for i in range(k):
        for j in range(i + 1):
            base = [a + b for a, b in zip(zl[i], zl[j])]
            w = 1.0 if i == j else SQRT2
            sidx = svec_index(k, i, j)
            for me, mc in mult_terms:
                e = tuple(a + b for a, b in zip(base, me))
                yield target_idx[e], sidx, w * mc


def gramify(poly: AffinePoly, name: str = "sos", box: np.ndarray | None = None, tol: float = 0.0,
            hole: Poly | None = None):
    """Gram representation of ``poly in Sigma`` (or of positivity on ``box``).

    Globally the Gram vector holds all monomials up to ``floor(deg/2)``; rows of
    higher degree (odd degree) must then vanish identically.  On a box the
    Putinar form ``sigma_0 + sum_i sigma_i (hi_i - x_i)(x_i - lo_i)`` is used with
    ``deg sigma_0 = 2 ceil(deg/2)``.  ``hole`` is an optional quadratic ``g_N``
    (nonnegative outside a neighbourhood of the origin); it adds a term
    ``sigma_N g_N`` so that positivity is only required where ``g_N >= 0``.

    Returns ``(blocks, rows)``.
    """
    n = poly.n_vars
    deg = poly.degree(tol)
    blocks: list = []
    if box is None:
        half = deg // 2
        if deg % 2 == 1:
            top = [k for k, e in enumerate(poly.exps) if e.sum() == deg]
            for k in top:
                if not np.any(poly.coef[k, 1:]) and poly.coef[k, 0] != 0.0:
                    raise CompileError(f"constraint {name}: odd-degree leading term cannot be a sum of squares")
        blocks.append(_Block(name, "gram", monomials(n, half)))
        span = max(deg, 2 * half)
    else:
        half = math.ceil(deg / 2)
        blocks.append(_Block(name, "gram", monomials(n, half)))
        if half >= 1:
            lo, hi = np.asarray(box, dtype=float)
            for i in range(n):
                xi = Poly.variable(i, n)
                g = (hi[i] - xi) * (xi - lo[i])
                blocks.append(_Block(name, f"multiplier:{i}", monomials(n, half - 1), multiplier=g))
        span = max(deg, 2 * half)
    if hole is not None and half >= 1:
        blocks.append(_Block(name, "multiplier:hole", monomials(n, half - 1), multiplier=hole))
    target = monomials(n, span)
    tidx = monomial_index(target)
    lifted = poly.lifted(max(span, poly.max_degree))
    rows = _Rows(name)
    nT = len(target)
    for r in range(nT):
        for d in np.flatnonzero(lifted.coef[r, 1:]):
            rows.dec.append((r, int(d), float(lifted.coef[r, 1 + d])))
        rows.rhs.append(-float(lifted.coef[r, 0]))
        rows.labels.append(tuple(int(v) for v in target[r]))
    for bi, blk in enumerate(blocks):
        for r, sidx, val in _gram_contrib(blk.basis, blk.multiplier, tidx, n):
            rows.gram.append((r, bi, sidx, -val))
    # rows beyond the retained list must vanish
    extra = np.flatnonzero(np.any(lifted.coef[nT:] != 0, axis=1)) + nT if len(lifted.exps) > nT else []
    for r in extra:
        rr = len(rows.rhs)
        for d in np.flatnonzero(lifted.coef[r, 1:]):
            rows.dec.append((rr, int(d), float(lifted.coef[r, 1 + d])))
        rows.rhs.append(-float(lifted.coef[r, 0]))
        rows.labels.append(tuple(int(v) for v in lifted.exps[r]))
    return blocks, rows


def expand_psd_matrix(entries, z_degree: int, name: str = "matrix"):
    """Rows matching ``entries[r][s] == ((z kron I_p)^T D (z kron I_p))_{rs}``."""
    p = len(entries)
    n = entries[0][0].n_vars
    zexps = monomials(n, z_degree)
    k = len(zexps)
    span = 2 * z_degree
    for r in range(p):
        for s in range(p):
            if entries[r][s].degree() > span:
                need = math.ceil(entries[r][s].degree() / 2)
                raise CompileError(f"{name}: entry ({r},{s}) has degree {entries[r][s].degree()} > 2*deg(z); need deg(z) >= {need}")
    target = monomials(n, span)
    tidx = monomial_index(target)
    nT = len(target)
    side = p * k
    block = _Block(name, "matrix", zexps, p=p)
    rows = _Rows(name)
    zl = zexps.tolist()
    pair_terms: dict = {}
    for i in range(k):
        for j in range(k):
            pair_terms[(i, j)] = tidx[tuple(a + b for a, b in zip(zl[i], zl[j]))]
    row_of = {}
    for r in range(p):
        for s in range(r, p):
            ent = entries[r][s].lifted(max(span, entries[r][s].max_degree))
            for t in range(nT):
                rr = len(rows.rhs)
                row_of[(r, s, t)] = rr
                for d in np.flatnonzero(ent.coef[t, 1:]):
                    rows.dec.append((rr, int(d), float(ent.coef[t, 1 + d])))
                rows.rhs.append(-float(ent.coef[t, 0]))
                rows.labels.append((r, s) + tuple(int(v) for v in target[t]))
    for r in range(p):
        for s in range(r, p):
            if r == s:
                for i in range(k):
                    for j in range(i + 1):
                        u, v = i * p + r, j * p + r
                        w = 1.0 if i == j else SQRT2
                        rows.gram.append((row_of[(r, s, pair_terms[(i, j)])], 0, svec_index(side, u, v), -w))
            else:
                for i in range(k):
                    for j in range(k):
                        u, v = i * p + r, j * p + s
                        rows.gram.append((row_of[(r, s, pair_terms[(i, j)])], 0, svec_index(side, u, v), -1.0 / SQRT2))
    return [block], rows


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def assemble_sdp(program: SosProgram, reduce: bool = True) -> SdpProblem:
    """Build the standard-form conic problem.

    Variable layout: the decision vector (free block) followed by one PSD block
    per Gram / matrix variable in declaration order.  Equality rows are
    normalized to max-abs 1; identical rows are removed.  With ``reduce`` the
    diagonal entries forced to zero by homogeneous rows are eliminated
    (together with their rows and columns) before the solve.
    """
    program.validate()
    n = program.n_vars
    if program.scale_box is not None:
        lo, hi = np.asarray(program.scale_box, dtype=float)
        center, scale = 0.5 * (lo + hi), 0.5 * (hi - lo)
    else:
        center = scale = None

    def to_s_box(box):
        if box is None or center is None:
            return box
        return np.vstack([(box[0] - center) / scale, (box[1] - center) / scale])

    all_blocks: list = []
    all_rows: list = []
    for con in program.sos:
        poly = _scaled_affine(con.poly, center, scale)
        hole = None
        if con.hole is not None:
            hole = Poly.quadratic_form(np.eye(n)) - float(con.hole) ** 2
            if center is not None:
                hole = hole.affine_substitute(center, scale)
        blocks, rows = gramify(poly, con.name, to_s_box(con.box), hole=hole)
        all_rows.append((rows, len(all_blocks)))
        all_blocks.extend(blocks)
    for mc in program.matrices:
        ents = [[_scaled_affine(e, center, scale) for e in row] for row in mc.entries]
        blocks, rows = expand_psd_matrix(ents, mc.z_degree, mc.name)
        all_rows.append((rows, len(all_blocks)))
        all_blocks.extend(blocks)
    lin = _Rows("linear")
    for name, row, rhs in program.lin_eq:
        rr = len(lin.rhs)
        for d in np.flatnonzero(row):
            lin.dec.append((rr, int(d), float(row[d])))
        lin.rhs.append(float(rhs))
        lin.labels.append(name)
    all_rows.append((lin, len(all_blocks)))

    # global numbering of rows
    R_dec, R_gram, rhs, owners, labels = [], [], [], [], []
    for rows, b0 in all_rows:
        base = len(rhs)
        R_dec += [(base + r, d, v) for r, d, v in rows.dec]
        R_gram += [(base + r, b0 + bi, si, v) for r, bi, si, v in rows.gram]
        rhs += rows.rhs
        owners += [rows.owner] * len(rows.rhs)
        labels += rows.labels
    rhs = np.array(rhs, dtype=float)
    nrows = len(rhs)

    active = [np.ones(blk.side, dtype=bool) for blk in all_blocks]
    if reduce:
        active = _zero_diagonal_elimination(nrows, R_dec, R_gram, rhs, all_blocks, active)

    # column numbering with reduced blocks
    n_dec = program.n_dec
    offsets, sizes, maps = [], [], []
    off = n_dec
    for blk, act in zip(all_blocks, active):
        idx = np.flatnonzero(act)
        s = len(idx)
        full = blk.side
        # map full svec index -> reduced svec index (or -1)
        pos = -np.ones(full, dtype=int)
        pos[idx] = np.arange(s)
        r, c = np.tril_indices(full)
        keep = (pos[r] >= 0) & (pos[c] >= 0)
        m = -np.ones(svec_len(full), dtype=int)
        m[keep] = off + np.array([svec_index(s, pos[a], pos[b]) for a, b in zip(r[keep], c[keep])], dtype=int)
        offsets.append(off)
        sizes.append(s)
        maps.append(m)
        off += svec_len(s)
    rows_i, cols_i, vals = [], [], []
    for r, d, v in R_dec:
        rows_i.append(r)
        cols_i.append(d)
        vals.append(v)
    for r, bi, si, v in R_gram:
        col = maps[bi][si]
        if col >= 0:
            rows_i.append(r)
            cols_i.append(col)
            vals.append(v)
    A = sp.csr_matrix((vals, (rows_i, cols_i)), shape=(nrows, off))
    A.sum_duplicates()
    A.eliminate_zeros()

    # empty rows: consistent ones vanish, inconsistent ones mean infeasibility
    nnz = np.diff(A.indptr)
    bad = (nnz == 0) & (np.abs(rhs) > 1e-12 * (1 + np.abs(rhs).max(initial=0)))
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise CompileError(f"constraint {owners[k]}: coefficient {labels[k]} cannot be matched (infeasible by construction)")
    keep_rows = nnz > 0
    A = A[keep_rows]
    rhs = rhs[keep_rows]
    owners = [o for o, k in zip(owners, keep_rows) if k]
    labels = [lb for lb, k in zip(labels, keep_rows) if k]

    # row normalization and deduplication
    absmax = np.asarray(abs(A).max(axis=1).todense()).ravel() if A.shape[0] else np.ones(0)
    A = sp.diags(1.0 / absmax) @ A
    rhs = rhs / absmax
    A = A.tocsr()
    A.sort_indices()
    seen = {}
    uniq = []
    for i in range(A.shape[0]):
        lo_, hi_ = A.indptr[i], A.indptr[i + 1]
        key = (tuple(A.indices[lo_:hi_]), tuple(np.round(A.data[lo_:hi_], 14)), round(float(rhs[i]), 14))
        if key not in seen:
            seen[key] = i
            uniq.append(i)
    A = A[uniq]
    rhs = rhs[uniq]
    owners = [owners[i] for i in uniq]

    c = np.zeros(off)
    obj_scale = float(np.max(np.abs(program.objective), initial=0.0)) or 1.0
    c[:n_dec] = program.objective / obj_scale
    meta = {
        "n_dec": n_dec,
        "objective_scale": obj_scale,
        "blocks": [
            {"owner": blk.owner, "role": blk.role, "side": blk.side, "active": np.flatnonzero(act).tolist(), "offset": o}
            for blk, act, o in zip(all_blocks, active, offsets)
        ],
        "row_owner": owners,
        "center": None if center is None else center.tolist(),
        "scale": None if scale is None else scale.tolist(),
    }
    return SdpProblem(c, A, rhs, n_free=n_dec, n_nonneg=0, psd_sizes=sizes, meta=meta)


def _zero_diagonal_elimination(nrows, R_dec, R_gram, rhs, blocks, active):
    """Find Gram diagonals forced to zero by rows ``sum(same-sign diagonals) = 0``.

    A PSD matrix with a zero diagonal entry has a zero row and column, so those
    indices are removed; the process repeats until nothing changes.
    """
    has_dec = np.zeros(nrows, dtype=bool)
    for r, _, v in R_dec:
        if v != 0:
            has_dec[r] = True
    by_row: dict = {}
    for r, bi, si, v in R_gram:
        by_row.setdefault(r, []).append((bi, si, v))
    diag_of = []
    for blk in blocks:
        s = blk.side
        d = {}
        for i in range(s):
            d[svec_index(s, i, i)] = i
        diag_of.append(d)
    changed = True
    while changed:
        changed = False
        for r, terms in by_row.items():
            if has_dec[r] or rhs[r] != 0:
                continue
            live = []
            ok = True
            for bi, si, v in terms:
                s = blocks[bi].side
                # locate (i, j) for this svec position
                i = int((math.isqrt(8 * si + 1) - 1) // 2)
                j = si - i * (i + 1) // 2
                if not (active[bi][i] and active[bi][j]):
                    continue
                if i != j:
                    ok = False
                    break
                live.append((bi, i, v))
            if not ok or not live:
                continue
            signs = {np.sign(v) for _, _, v in live}
            if len(signs) != 1:
                continue
            for bi, i, _ in live:
                if active[bi][i]:
                    active[bi][i] = False
                    changed = True
    removed = sum(int((~a).sum()) for a in active)
    if removed:
        logger.info("facial reduction removed %d Gram indices", removed)
    return active


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------


@dataclass
class SosSolution:
    status: str
    decisions: np.ndarray
    objective: float
    grams: dict  # owner -> list of (role, full Gram matrix)
    min_gram_eig: dict
    max_eq_residual: dict
    conic: ConicSolution

    def summary(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "min_gram_eig": self.min_gram_eig,
            "max_eq_residual": self.max_eq_residual,
            "conic_residuals": self.conic.residuals,
            "iterations": self.conic.iterations,
        }


def extract_solution(sol: ConicSolution, sdp: SdpProblem, program: SosProgram) -> SosSolution:
    """Read decisions and Gram matrices; report per-constraint diagnostics."""
    meta = sdp.meta
    n_dec = meta["n_dec"]
    v = np.asarray(sol.x[:n_dec], dtype=float)
    grams: dict = {}
    min_eig: dict = {}
    for blk, s in zip(meta["blocks"], sdp.psd_sizes):
        full = np.zeros((blk["side"], blk["side"]))
        if s:
            G = smat(sol.x[blk["offset"] : blk["offset"] + svec_len(s)], s)
            idx = np.array(blk["active"], dtype=int)
            full[np.ix_(idx, idx)] = G
            ev = float(np.linalg.eigvalsh(G)[0])
        else:
            ev = 0.0
        grams.setdefault(blk["owner"], []).append((blk["role"], full))
        min_eig[blk["owner"]] = min(min_eig.get(blk["owner"], np.inf), ev)
    resid = sdp.A @ sol.x - sdp.b
    eq: dict = {}
    for owner, r in zip(meta["row_owner"], resid):
        eq[owner] = max(eq.get(owner, 0.0), float(abs(r)))
    obj = float(program.objective @ v)
    return SosSolution(sol.status, v, obj, grams, min_eig, eq, sol)


def solve_program(program: SosProgram, tol: float = 1e-8, max_iter: int = 150, backend: str = "hsd", strict: bool = True) -> SosSolution:
    """Compile, solve and extract; raises :class:`SolveError` unless optimal (when ``strict``)."""
    sdp = assemble_sdp(program)
    logger.info("SDP: %d rows, %d free, PSD blocks %s", sdp.A.shape[0], sdp.n_free, sdp.psd_sizes)
    sol = solve(sdp, tol=tol, max_iter=max_iter, backend=backend)
    out = extract_solution(sol, sdp, program)
    if strict and sol.status not in ("optimal", "optimal_inaccurate"):
        diag = {"status": sol.status, "residuals": sol.residuals}
        if sol.certificate is not None and sol.status == "infeasible":
            y = np.zeros(len(sdp.b))
            y[: len(sol.certificate)] = sol.certificate
            weight: dict = {}
            for owner, val in zip(sdp.meta["row_owner"], np.abs(y)):
                weight[owner] = weight.get(owner, 0.0) + float(val)
            diag["certificate_weight"] = weight
            diag["failing_block"] = max(weight, key=weight.get) if weight else None
        raise SolveError(f"conic solver returned {sol.status}", sol, diag)
    return out


def reconstruct(program: SosProgram, solution: SosSolution, name: str) -> tuple[Poly, Poly]:
    """Return (substituted constraint, Gram reconstruction), both in scaled variables."""
    con = next(c for c in program.sos if c.name == name)
    if program.scale_box is not None:
        lo, hi = np.asarray(program.scale_box, dtype=float)
        center, scale = 0.5 * (lo + hi), 0.5 * (hi - lo)
    else:
        center = scale = None
    poly = _scaled_affine(con.poly, center, scale).substitute(solution.decisions)
    box = con.box
    if box is not None and center is not None:
        box = np.vstack([(box[0] - center) / scale, (box[1] - center) / scale])
    deg = con.poly.degree()
    n = program.n_vars
    rec = Poly(n)
    for role, G in solution.grams[name]:
        if role == "gram":
            half = deg // 2 if box is None else math.ceil(deg / 2)
            z = monomials(n, half)
            mult = None
        elif role == "multiplier:hole":
            half = (deg // 2 if box is None else math.ceil(deg / 2)) - 1
            z = monomials(n, half)
            mult = Poly.quadratic_form(np.eye(n)) - float(con.hole) ** 2
            if center is not None:
                mult = mult.affine_substitute(center, scale)
        else:
            i = int(role.split(":")[1])
            half = math.ceil(deg / 2) - 1
            z = monomials(n, half)
            xi = Poly.variable(i, n)
            mult = (box[1][i] - xi) * (xi - box[0][i])
        zp = [Poly(n, {tuple(int(v) for v in e): 1.0}) for e in z]
        q = Poly(n)
        for a in range(len(zp)):
            for b in range(len(zp)):
                if G[a, b] != 0:
                    q = q + G[a, b] * (zp[a] * zp[b])
        rec = rec + (q if mult is None else q * mult)
    return poly, rec
