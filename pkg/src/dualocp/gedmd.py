"""Generator EDMD: Koopman and Perron-Frobenius generator matrices from data.

Convention: a generator matrix ``L`` acts on dictionary coefficient vectors,
so that for an observable ``phi = c^T Psi`` the lifted derivative is
approximately ``(L c)^T Psi``.  With data this is the least-squares solution of
``A L = B`` where ``A = mean(Psi Psi^T)`` and ``B = mean(Psi Psidot^T)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynsim import TrajectoryDataset
from .polybasis import BasisDictionary, Poly, divergence_of_field

logger = logging.getLogger(__name__)

CUTOFF = 1e-10


def assemble_gram(dataset: TrajectoryDataset, basis: BasisDictionary, chunk: int = 20_000) -> tuple[np.ndarray, np.ndarray]:
    """Empirical Gram matrices ``A`` and ``B`` for one dataset."""
    T = dataset.size
    if T == 0:
        raise ValueError("empty dataset")
    Q = basis.size
    A = np.zeros((Q, Q))
    B = np.zeros((Q, Q))
    Xt = dataset.X.T
    Dt = dataset.Xdot.T
    for s in range(0, T, chunk):
        x = Xt[s : s + chunk]
        psi = basis.eval(x)
        psidot = np.einsum("tqn,tn->tq", basis.grad(x), Dt[s : s + chunk])
        A += psi.T @ psi
        B += psi.T @ psidot
    return A / T, B / T


def conditioning(A: np.ndarray) -> dict:
    s = np.linalg.svd(A, compute_uv=False)
    return {"sigma_min": float(s[-1]), "sigma_max": float(s[0])}


def estimate_generator(A: np.ndarray, B: np.ndarray, ridge: float = 0.0, cutoff: float = CUTOFF) -> np.ndarray:
    """Minimum-norm least-squares ``L = A^+ B`` with a relative singular-value cutoff."""
    A = np.asarray(A, dtype=float)
    if ridge:
        A = A + ridge * np.eye(A.shape[0])
    U, s, Vt = np.linalg.svd(A)
    keep = s > cutoff * s[0] if s[0] > 0 else np.zeros_like(s, dtype=bool)
    if not np.all(keep):
        logger.warning("Gram matrix rank-deficient: %d of %d singular values below cutoff (min %.3g, max %.3g)",
                       int((~keep).sum()), len(s), s[-1], s[0])
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (Vt.T * inv) @ (U.T @ B)


def control_generators(L0: np.ndarray, Ls: Sequence[np.ndarray]) -> list:
    """``K_gj = L_j - L_0`` for unit-step protocols."""
    return [np.asarray(Lj) - np.asarray(L0) for Lj in Ls]


def field_polys(L: np.ndarray, basis: BasisDictionary) -> list:
    """Vector field reconstructed from a generator: component i is ``(L C_x[:, i])^T Psi``."""
    return [basis.to_poly(L @ basis.C_x[:, i]) for i in range(basis.n_vars)]


def divergence_poly(L: np.ndarray, basis: BasisDictionary) -> Poly:
    return divergence_of_field(field_polys(L, basis))


def pf_generator(L: np.ndarray, div: Poly, basis: BasisDictionary) -> tuple[np.ndarray, bool]:
    """Perron-Frobenius matrix ``P = L + M_div`` with ``M_div`` the multiply-then-project map.

    ``P c`` represents ``div(F * phi)`` for ``phi = c^T Psi``.  The flag reports
    whether any product left the dictionary span (then the top-degree terms
    are dropped by the projection).
    """
    Mdiv, flag = basis.mul_matrix(div)
    return L + Mdiv, flag


@dataclass
class GeneratorSet:
    """Koopman generators ``L_0..L_m`` (drift then control), divergences and P-F matrices.

    ``L[0]`` is the drift generator and ``L[j]`` for ``j >= 1`` the control
    generator ``K_gj``.  ``P[j]`` is the matching P-F matrix.
    """

    basis: BasisDictionary
    L: list
    div: list
    P: list
    conditioning: list = field(default_factory=list)
    projection_flags: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.L) - 1

    def to_json(self) -> dict:
        return {
            "basis": self.basis.descriptor(),
            "L": [np.asarray(L).tolist() for L in self.L],
            "div": [d.to_json() for d in self.div],
            "P": [np.asarray(P).tolist() for P in self.P],
            "conditioning": self.conditioning,
            "projection_flags": [bool(f) for f in self.projection_flags],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorSet":
        return cls(
            BasisDictionary.from_descriptor(obj["basis"]),
            [np.array(L) for L in obj["L"]],
            [Poly.from_json(d) for d in obj["div"]],
            [np.array(P) for P in obj["P"]],
            obj.get("conditioning", []),
            obj.get("projection_flags", []),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for M in self.L:
            h.update(np.ascontiguousarray(M).tobytes())
        return h.hexdigest()[:16]


def _complete(basis, L_list, cond=None) -> GeneratorSet:
    div, P, flags = [], [], []
    for L in L_list:
        d = divergence_poly(L, basis)
        Pj, flag = pf_generator(L, d, basis)
        div.append(d)
        P.append(Pj)
        flags.append(flag)
    return GeneratorSet(basis, list(L_list), div, P, cond or [], flags)


def estimate_generators(datasets: Sequence[TrajectoryDataset], basis: BasisDictionary, ridge: float = 0.0) -> GeneratorSet:
    """Full gEDMD pipeline for the zero/unit-step protocol.

    ``datasets`` must be ordered by input label 0..m.
    """
    labels = [d.input_label for d in datasets]
    if labels != list(range(len(datasets))):
        raise ValueError(f"datasets must carry labels 0..m in order, got {labels}")
    Ls, cond = [], []
    for ds in datasets:
        A, B = assemble_gram(ds, basis)
        cond.append(conditioning(A))
        Ls.append(estimate_generator(A, B, ridge))
    L_list = [Ls[0]] + control_generators(Ls[0], Ls[1:])
    return _complete(basis, L_list, cond)


def exact_generator(field: Sequence[Poly], basis: BasisDictionary) -> tuple[np.ndarray, bool]:
    """Galerkin generator of a polynomial field by symbolic projection.

    Column k is the projection of ``field . grad psi_k`` onto the dictionary;
    the flag is set when some image leaves the span.
    """
    Q = basis.size
    L = np.zeros((Q, Q))
    flag = False
    for k in range(Q):
        psi = Poly.from_arrays(basis.monos, basis.C_psi[k])
        img = Poly(basis.n_vars)
        for i, fi in enumerate(field):
            img = img + fi * psi.diff(i)
        L[:, k], f = basis.project(img)
        flag = flag or f
    return L, flag


def exact_generators(drift: Sequence[Poly], inputs: Sequence[Sequence[Poly]], basis: BasisDictionary) -> GeneratorSet:
    """Generator set from known polynomial fields (oracle path)."""
    L_list = [exact_generator(drift, basis)[0]] + [exact_generator(g, basis)[0] for g in inputs]
    return _complete(basis, L_list)


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    residual: float
    n_samples: int


def _near(X: np.ndarray, radius: float, min_samples: int) -> np.ndarray:
    """Samples within ``radius``; widened to the ``min_samples`` nearest when too few qualify."""
    r = np.linalg.norm(X, axis=0)
    mask = r <= radius
    if mask.sum() < min_samples and X.shape[1] >= min_samples:
        cut = np.partition(r, min_samples - 1)[min_samples - 1]
        logger.info("identify_linear: widening radius from %.3g to %.3g", radius, cut)
        mask = r <= cut
    return mask


def identify_linear(datasets: Sequence[TrajectoryDataset], radius: float = 0.5, min_samples: int = 200) -> LinearModel:
    """Least-squares linearization from samples near the origin.

    Samples with ``|x| <= radius`` are used; when fewer than ``min_samples``
    qualify, the ``min_samples`` nearest samples are used instead.  ``A`` comes
    from the zero-input dataset (``Xdot ~ A X``).  Column j of ``B`` is the
    intercept of an affine fit ``Xdot - A X ~ B_j + C_j x`` over the step-input
    dataset j, i.e. an estimate of ``g_j(0)``.
    """
    ds0 = datasets[0]
    n = ds0.n
    m = len(datasets) - 1
    mask = _near(ds0.X, radius, min_samples)
    if mask.sum() < n + 1:
        raise ValueError(f"identify_linear needs at least {n + 1} samples near the origin, found {int(mask.sum())}")
    X, D = ds0.X[:, mask], ds0.Xdot[:, mask]
    At, *_ = np.linalg.lstsq(X.T, D.T, rcond=None)
    A = At.T
    res = [np.linalg.norm(D - A @ X)]
    B = np.zeros((n, m))
    count = int(mask.sum())
    for j, ds in enumerate(datasets[1:]):
        mk = _near(ds.X, radius, min_samples)
        if mk.sum() < n + 1:
            raise ValueError(f"identify_linear needs at least {n + 1} samples near the origin for input {j + 1}")
        E = ds.Xdot[:, mk] - A @ ds.X[:, mk]
        Z = np.vstack([np.ones(int(mk.sum())), ds.X[:, mk]])
        W, *_ = np.linalg.lstsq(Z.T, E.T, rcond=None)
        B[:, j] = W[0]
        res.append(np.linalg.norm(E - W.T @ Z))
        count += int(mk.sum())
    return LinearModel(A, B, float(np.sqrt(sum(r * r for r in res))), count)


def save_generators(gs: GeneratorSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(gs.to_json(), fh)


def load_generators(path) -> GeneratorSet:
    with open(path) as fh:
        return GeneratorSet.from_json(json.load(fh))
