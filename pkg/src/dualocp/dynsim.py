"""Control-affine systems, RK4 simulation, finite differences and dataset files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .polybasis import Poly

logger = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e6


@dataclass
class ControlAffineSystem:
    """``xdot = f(x) + g(x) u`` with vectorized evaluators.

    ``drift(X)`` maps (T, n) -> (T, n); ``inputs(X)`` maps (T, n) -> (T, n, m).
    When the fields are polynomial, ``drift_polys`` (n Polys) and
    ``input_polys`` (m lists of n Polys) may be supplied; they are used for
    exact-generator oracles and analytic certificates.
    """

    n: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    inputs: Callable[[np.ndarray], np.ndarray]
    drift_polys: list | None = None
    input_polys: list | None = None
    name: str = "system"

    @classmethod
    def from_polys(cls, drift_polys: Sequence[Poly], input_polys: Sequence[Sequence[Poly]], name: str = "system"):
        drift_polys = list(drift_polys)
        input_polys = [list(g) for g in input_polys]
        n = len(drift_polys)
        m = len(input_polys)

        def drift(X):
            X = np.atleast_2d(X)
            return np.stack([p(X) for p in drift_polys], axis=1)

        def inputs(X):
            X = np.atleast_2d(X)
            out = np.empty((X.shape[0], n, m))
            for j, g in enumerate(input_polys):
                for i, p in enumerate(g):
                    out[:, i, j] = p(X)
            return out

        return cls(n, m, drift, inputs, drift_polys, input_polys, name)

    def field(self, X: np.ndarray, U: np.ndarray | None = None) -> np.ndarray:
        X = np.atleast_2d(X)
        F = self.drift(X)
        if U is not None and self.m:
            F = F + np.einsum("tij,tj->ti", self.inputs(X), np.atleast_2d(U))
        return F

    @property
    def is_polynomial(self) -> bool:
        return self.drift_polys is not None and self.input_polys is not None


@dataclass
class TrajectoryDataset:
    """Concatenated trajectories recorded under one input protocol.

    ``X`` and ``Xdot`` are (n, T).  ``segments`` lists the start column of each
    concatenated trajectory.
    """

    input_label: int
    dt: float
    X: np.ndarray
    Xdot: np.ndarray
    segments: list
    m: int
    seed: int | None = None
    truncated: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Xdot = np.asarray(self.Xdot, dtype=float)
        if self.X.shape != self.Xdot.shape:
            raise ValueError("X and Xdot must have identical shape")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Xdot))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def size(self) -> int:
        return self.X.shape[1]

    def times(self) -> np.ndarray:
        t = np.empty(self.size)
        bounds = list(self.segments) + [self.size]
        for s, e in zip(bounds[:-1], bounds[1:]):
            t[s:e] = self.dt * np.arange(e - s)
        return t

    # file format ---------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        """Write ``path`` (CSV) and ``path.json`` (sidecar)."""
        path = Path(path)
        n = self.n
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"dx{i + 1}" for i in range(n)]
        t = self.times()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(self.size):
                w.writerow([repr(float(t[k]))] + [repr(float(v)) for v in self.X[:, k]] + [repr(float(v)) for v in self.Xdot[:, k]])
        meta = {
            "input_label": int(self.input_label),
            "dt": float(self.dt),
            "n": int(n),
            "m": int(self.m),
            "segments": [int(s) for s in self.segments],
            "seed": self.seed,
            "truncated": [int(s) for s in self.truncated],
        }
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryDataset":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = int(meta["n"])
        return cls(
            input_label=meta["input_label"],
            dt=meta["dt"],
            X=data[:, 1 : 1 + n].T.copy(),
            Xdot=data[:, 1 + n : 1 + 2 * n].T.copy(),
            segments=list(meta["segments"]),
            m=meta["m"],
            seed=meta.get("seed"),
            truncated=list(meta.get("truncated", [])),
        )


def _policy_eval(policy, m: int, X: np.ndarray, t: float) -> np.ndarray | None:
    if policy is None or m == 0:
        return None
    if isinstance(policy, (int, np.integer)):
        U = np.zeros((X.shape[0], m))
        if policy > 0:
            U[:, policy - 1] = 1.0
        return U
    if isinstance(policy, np.ndarray):
        return np.broadcast_to(policy, (X.shape[0], m))
    return np.atleast_2d(policy(X, t)).reshape(X.shape[0], m)


def rk4_batch(system: ControlAffineSystem, policy, X0: np.ndarray, dt: float, steps: int, bound: float = DIVERGENCE_BOUND, box=None):
    """Integrate a batch of initial states with classical RK4.

    ``policy`` is ``None`` (zero input), an int ``j`` (unit step on input j,
    1-based; 0 means zero input), a constant array, or a callable
    ``policy(X, t) -> U`` evaluated at every stage.

    Returns ``(traj, valid_len)`` where ``traj`` has shape (steps+1, N, n) and
    ``valid_len[k]`` is the number of leading samples of trajectory ``k`` that
    stay within ``bound`` (and inside ``box`` when given).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    X = np.array(np.atleast_2d(X0), dtype=float)
    N, n = X.shape
    traj = np.empty((steps + 1, N, n))
    traj[0] = X
    alive = np.ones(N, dtype=bool)
    valid_len = np.full(N, steps + 1)

    def out_of_bounds(Y):
        bad = ~np.all(np.isfinite(Y), axis=1) | (np.linalg.norm(Y, axis=1) > bound)
        if box is not None:
            bad |= np.any(Y < box[0], axis=1) | np.any(Y > box[1], axis=1)
        return bad

    bad0 = out_of_bounds(X)
    valid_len[bad0] = 0
    alive &= ~bad0

    def rhs(Y, t):
        return system.field(Y, _policy_eval(policy, system.m, Y, t))

    t = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            k1 = rhs(X, t)
            k2 = rhs(X + 0.5 * dt * k1, t + 0.5 * dt)
            k3 = rhs(X + 0.5 * dt * k2, t + 0.5 * dt)
            k4 = rhs(X + dt * k3, t + dt)
            Xn = X + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = out_of_bounds(Xn) & alive
            valid_len[bad] = k + 1
            alive &= ~bad
            # frozen trajectories keep their last state to avoid overflow
            X = np.where(alive[:, None], Xn, X)
            traj[k + 1] = X
            t += dt
    return traj, valid_len


def finite_difference(X: np.ndarray, dt: float, scheme: str = "backward", segments: Sequence[int] | None = None) -> np.ndarray:
    """Derivative estimate for (n, T) samples, never differencing across segments.

    The first sample of each segment uses a forward difference (and the last a
    backward difference for the central scheme).
    """
    X = np.asarray(X, dtype=float)
    T = X.shape[1]
    starts = [0] if segments is None else list(segments)
    bounds = starts + [T]
    D = np.empty_like(X)
    for s, e in zip(bounds[:-1], bounds[1:]):
        if e - s < 2:
            raise ValueError("each segment needs at least two samples")
        seg = X[:, s:e]
        d = np.empty_like(seg)
        if scheme == "backward":
            d[:, 1:] = (seg[:, 1:] - seg[:, :-1]) / dt
            d[:, 0] = (seg[:, 1] - seg[:, 0]) / dt
        elif scheme == "central":
            d[:, 1:-1] = (seg[:, 2:] - seg[:, :-2]) / (2 * dt)
            d[:, 0] = (seg[:, 1] - seg[:, 0]) / dt
            d[:, -1] = (seg[:, -1] - seg[:, -2]) / dt
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        D[:, s:e] = d
    return D


def _dataset_from_batch(traj, valid_len, label, dt, m, scheme, seed, derivative=None):
    cols, segs, truncated = [], [], []
    start = 0
    for k in range(traj.shape[1]):
        L = int(valid_len[k])
        if L < traj.shape[0]:
            truncated.append(k)
        if L < 2:
            continue
        cols.append(traj[:L, k, :].T)
        segs.append(start)
        start += L
    if not cols:
        raise ValueError("every trajectory diverged before two samples were recorded")
    X = np.concatenate(cols, axis=1)
    if derivative is None:
        Xd = finite_difference(X, dt, scheme, segs)
    else:
        Xd = derivative(X)
    if truncated:
        logger.warning("input %d: %d trajectories truncated (divergence/box exit)", label, len(truncated))
    return TrajectoryDataset(label, dt, X, Xd, segs, m, seed, truncated)


def simulate(system: ControlAffineSystem, policy, x0, dt: float, steps: int, scheme: str = "backward", bound: float = DIVERGENCE_BOUND) -> TrajectoryDataset:
    """Single trajectory as a dataset (steps + 1 samples unless truncated)."""
    traj, valid = rk4_batch(system, policy, np.atleast_2d(x0), dt, steps, bound)
    label = policy if isinstance(policy, (int, np.integer)) else 0
    return _dataset_from_batch(traj, valid, int(label), dt, system.m, scheme, None)


def collect_protocol(
    system: ControlAffineSystem,
    domain_box,
    n_traj: int = 200,
    steps: int = 100,
    dt: float = 0.01,
    seed: int = 0,
    scheme: str = "backward",
    keep_in_box: bool = True,
    analytic: bool = False,
) -> list:
    """Zero-input and unit-step datasets (labels 0..m).

    Initial states are uniform in ``domain_box``; the same initial states are
    reused for every protocol.  With ``keep_in_box`` a trajectory is truncated
    once it leaves the box.  ``analytic=True`` replaces finite differences by
    the exact vector field (oracle studies only).
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    box = np.asarray(domain_box, dtype=float)
    rng = np.random.default_rng(seed)
    X0 = rng.uniform(box[0], box[1], size=(n_traj, system.n))
    out = []
    for label in range(system.m + 1):
        traj, valid = rk4_batch(system, label, X0, dt, steps - 1, box=box if keep_in_box else None)
        U = np.zeros(system.m)
        if label:
            U[label - 1] = 1.0

        def true_field(X, U=U):
            return system.field(X.T, np.broadcast_to(U, (X.shape[1], system.m))).T

        deriv = true_field if analytic else None

        out.append(_dataset_from_batch(traj, valid, label, dt, system.m, scheme, seed, deriv))
    return out
