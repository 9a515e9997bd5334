"""Example systems, run configuration and the staged pipeline used by the CLI."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctrl import ControllerArtifact, certify_density, design_from_model, extract_controller, rollout
from .dynsim import ControlAffineSystem, TrajectoryDataset, collect_protocol
from .gedmd import GeneratorSet, estimate_generators, identify_linear, load_generators, save_generators
from .ocpsynth import OcpSpec, build_program, save_program
from .polybasis import Poly, build_dictionary
from .soscompile import solve_program

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# systems
# ---------------------------------------------------------------------------


def _vars(n):
    return [Poly.variable(i, n) for i in range(n)]


def example1_system() -> ControlAffineSystem:
    x1, x2 = _vars(2)
    f = [-x1 + x2, -0.5 * (x1 + x2) + 0.5 * x1 * x1 * x2]
    g = [[Poly(2), x1]]
    return ControlAffineSystem.from_polys(f, g, name="example1")


def vdp_system() -> ControlAffineSystem:
    x1, x2 = _vars(2)
    f = [x2, (1 - x1 * x1) * x2 - x1]
    g = [[Poly(2), Poly.constant(2, 1.0)]]
    return ControlAffineSystem.from_polys(f, g, name="vdp")


def pendulum_system() -> ControlAffineSystem:
    """``x1' = x2, x2' = -sin x1 - 0.2 x2 + u`` (not polynomial)."""

    def drift(X):
        X = np.atleast_2d(X)
        return np.stack([X[:, 1], -np.sin(X[:, 0]) - 0.2 * X[:, 1]], axis=1)

    def inputs(X):
        X = np.atleast_2d(X)
        out = np.zeros((X.shape[0], 2, 1))
        out[:, 1, 0] = 1.0
        return out

    return ControlAffineSystem(2, 1, drift, inputs, None, None, name="pendulum")


def lorentz_system(sigma: float = 10.0, rho: float = 28.0, eta: float = 8.0 / 3.0) -> ControlAffineSystem:
    x1, x2, x3 = _vars(3)
    f = [sigma * (x2 - x1), x1 * (rho - x3) - x2, x1 * x2 - eta * x3]
    g = [[Poly(3), Poly.constant(3, 1.0), Poly(3)]]
    return ControlAffineSystem.from_polys(f, g, name="lorentz")


SYSTEMS = {
    "example1": example1_system,
    "vdp": vdp_system,
    "pendulum": pendulum_system,
    "lorentz": lorentz_system,
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything a pipeline run needs; serialized as JSON."""

    system: str = "example1"
    basis_kind: str = "legendre"
    basis_order: int = 4
    domain: list = field(default_factory=lambda: [-5.0, 5.0])
    excluded: list = field(default_factory=lambda: [-0.1, 0.1])
    deg_a: int = 1
    deg_c: int = 2
    deg_s: int = 2
    alpha: int = 4
    beta: float = 1.0
    gamma: float = 0.0
    norm: str = "l2"
    R: list | None = None
    n_traj: int = 10000
    steps: int = 2
    dt: float = 0.01
    seed: int = 0
    scheme: str = "backward"
    out: str = "run"
    # local design and SOS knobs
    q_local: float = 1.0
    b_source: str = "lqr"
    h0_floor: float = 1e-3
    positivity: str = "box"
    input_bound: float | None = None
    backend: str = "hsd"
    tol: float = 1e-8
    max_iter: int = 150
    # rollout
    x0: list = field(default_factory=list)
    T: float = 10.0
    rollout_dt: float = 0.01

    @property
    def n(self) -> int:
        return make_system(self).n

    def box(self, which) -> np.ndarray:
        v = np.asarray(which, dtype=float)
        n = self.n
        if v.ndim == 1:
            v = v.reshape(2, 1)
        return np.broadcast_to(v, (2, n)).astype(float).copy()

    def ocp_spec(self, b: Poly) -> OcpSpec:
        sys_ = make_system(self)
        return OcpSpec(
            n=sys_.n, m=sys_.m, gamma=self.gamma, alpha=self.alpha, beta=self.beta,
            R=None if self.R is None else np.atleast_2d(self.R), b=b,
            domain=self.box(self.domain), excluded=self.box(self.excluded),
            deg_a=self.deg_a, deg_c=self.deg_c, deg_s=self.deg_s, norm=self.norm,
            input_bound=self.input_bound, h0_floor=self.h0_floor, positivity=self.positivity,
        )

    def validate(self) -> None:
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; choose from {sorted(SYSTEMS)}")
        if self.b_source not in ("lqr", "identity"):
            raise ValueError("b_source must be 'lqr' (b = x'Px) or 'identity' (b = |x|^2)")
        if self.basis_kind not in ("monomial", "legendre"):
            raise ValueError("basis kind must be monomial or legendre")
        if self.dt <= 0 or self.n_traj < 1 or self.steps < 2:
            raise ValueError("data protocol needs dt > 0, n_traj >= 1, steps >= 2")
        for name in ("deg_a", "deg_c", "deg_s"):
            if getattr(self, name) > self.basis_order:
                raise ValueError(f"{name} exceeds the dictionary order {self.basis_order}")
        # the OCP invariants (b is a placeholder here; the real b is checked before synthesis)
        self.ocp_spec(Poly.quadratic_form(np.eye(self.n))).validate()

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def preset(name: str, **overrides) -> RunConfig:
    """Settings of the four worked examples (2e4 samples per input protocol)."""
    common = dict(alpha=4, beta=1.0, dt=0.01, n_traj=10000, steps=2, basis_kind="legendre", deg_a=1)
    table = {
        "example1": dict(system="example1", basis_order=4, deg_c=2, deg_s=2, norm="l2", gamma=0.0,
                         x0=[[3, 3], [-3, 3], [3, -1], [-3, -3], [1, -3]], T=10.0),
        "vdp": dict(system="vdp", basis_order=6, deg_c=6, deg_s=6, norm="l2", gamma=0.0, q_local=5.0,
                    x0=[[2, 2]], T=15.0),
        "pendulum": dict(system="pendulum", basis_order=7, deg_c=3, deg_s=3, norm="l2", gamma=0.0, q_local=5.0,
                         x0=[[float(np.pi / 2), 0.0]], T=20.0),
        "lorentz": dict(system="lorentz", basis_order=4, deg_c=4, deg_s=4, norm="l1", gamma=0.0,
                        b_source="identity", scheme="central", steps=3, x0=[[1, 1, 1]], T=20.0),
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}")
    cfg = {**common, **table[name], "out": f"run_{name}"}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**cfg)


def make_system(cfg: RunConfig) -> ControlAffineSystem:
    return SYSTEMS[cfg.system]()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _paths(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    return {
        "dir": out,
        "data": [out / f"data_u{j}.csv" for j in range(make_system(cfg).m + 1)],
        "generators": out / "generators.json",
        "program": out / "program.json",
        "controller": out / "controller.json",
        "certificate": out / "certificate.json",
        "rollouts": out / "rollouts",
    }


def _require(stage: str, *paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise StageError(stage, f"missing prerequisite file {p}")


def stage_collect(cfg: RunConfig) -> list:
    cfg.validate()
    p = _paths(cfg)
    p["dir"].mkdir(parents=True, exist_ok=True)
    system = make_system(cfg)
    data = collect_protocol(system, cfg.box(cfg.domain), cfg.n_traj, cfg.steps, cfg.dt, cfg.seed, cfg.scheme)
    for ds, path in zip(data, p["data"]):
        ds.save(path)
    cfg.save(p["dir"] / "config.json")
    return data


def _load_data(cfg: RunConfig, stage: str) -> list:
    p = _paths(cfg)
    _require(stage, *p["data"])
    return [TrajectoryDataset.load(path) for path in p["data"]]


def stage_estimate(cfg: RunConfig) -> GeneratorSet:
    data = _load_data(cfg, "estimate")
    basis = build_dictionary(cfg.basis_kind, make_system(cfg).n, cfg.basis_order, cfg.box(cfg.domain))
    gs = estimate_generators(data, basis)
    save_generators(gs, _paths(cfg)["generators"])
    return gs


def synthesize(cfg: RunConfig, generators: GeneratorSet, data: list):
    """Local design from data, SOS synthesis and controller extraction."""
    model = identify_linear(data)
    local = design_from_model(model, None if cfg.R is None else np.atleast_2d(cfg.R), cfg.q_local)
    # the density denominator; the local law and its blending weight always use P
    b = local.b_poly() if cfg.b_source == "lqr" else Poly.quadratic_form(np.eye(generators.basis.n_vars))
    spec = cfg.ocp_spec(b)
    t0 = time.time()
    prog = build_program(spec, generators)
    sol = solve_program(prog, tol=cfg.tol, max_iter=cfg.max_iter, backend=cfg.backend)
    a = prog.decision_poly("a", sol.decisions)
    cs = [prog.decision_poly(f"c{j + 1}", sol.decisions) for j in range(spec.m)]
    prov = {
        "generator_digest": generators.digest(),
        "solver": sol.summary(),
        "local_method": local.method,
        "b_source": cfg.b_source,
        "linear_model": {"A": model.A.tolist(), "B": model.B.tolist(), "residual": model.residual},
        "synthesis_seconds": time.time() - t0,
        "config": cfg.to_json(),
    }
    ctrl = extract_controller(
        a, cs, local, gamma=cfg.gamma, alpha=cfg.alpha, b=b, domain=spec.domain, excluded=spec.excluded,
        beta=cfg.beta, R=spec.R, norm=cfg.norm, provenance=prov,
    )
    return ctrl, prog, sol


def stage_synthesize(cfg: RunConfig) -> ControllerArtifact:
    p = _paths(cfg)
    _require("synthesize", p["generators"])
    data = _load_data(cfg, "synthesize")
    gs = load_generators(p["generators"])
    ctrl, prog, _ = synthesize(cfg, gs, data)
    save_program(prog, p["program"])
    ctrl.save(p["controller"])
    return ctrl


def stage_rollout(cfg: RunConfig, x0_list=None, zero_control: bool = False) -> list:
    p = _paths(cfg)
    ctrl = None
    if not zero_control:
        _require("rollout", p["controller"])
        ctrl = ControllerArtifact.load(p["controller"])
    system = make_system(cfg)
    x0_list = cfg.x0 if x0_list is None else x0_list
    if not x0_list:
        raise StageError("rollout", "no initial states given")
    p["rollouts"].mkdir(parents=True, exist_ok=True)
    out = []
    for k, x0 in enumerate(x0_list):
        r = rollout(system, ctrl, x0, cfg.rollout_dt, cfg.T, cfg.gamma, None, cfg.beta,
                    None if cfg.R is None else np.atleast_2d(cfg.R), cfg.norm)
        r.save(p["rollouts"] / f"rollout_{k}.csv")
        out.append(r)
    return out


def stage_certify(cfg: RunConfig) -> dict:
    p = _paths(cfg)
    _require("certify", p["controller"], p["generators"])
    ctrl = ControllerArtifact.load(p["controller"])
    gs = load_generators(p["generators"])
    rep = certify_density(ctrl, cfg.box(cfg.domain), cfg.box(cfg.excluded), generators=gs)
    obj = rep.to_json()
    p["certificate"].write_text(json.dumps(obj, indent=1, sort_keys=True))
    return obj


def run_all(cfg: RunConfig) -> dict:
    stage_collect(cfg)
    stage_estimate(cfg)
    ctrl = stage_synthesize(cfg)
    rolls = stage_rollout(cfg)
    cert = stage_certify(cfg)
    return {"controller": ctrl, "rollouts": rolls, "certificate": cert}
