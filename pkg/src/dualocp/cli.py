"""Command-line front end: ``dualocp <stage> [options]``.

Stages read and write files in the run directory so that each one can be
replayed from the outputs of the previous stage::

    dualocp collect    --preset example1 --out runs/ex1
    dualocp estimate   --out runs/ex1
    dualocp synthesize --out runs/ex1
    dualocp rollout    --out runs/ex1 --x0 3,3 --x0 -3,3
    dualocp certify    --out runs/ex1
    dualocp all        --preset vdp --gamma 1 --out runs/vdp_g1
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import presets
from .presets import RunConfig, StageError
from .soscompile import CompileError, SolveError

logger = logging.getLogger("dualocp")

STAGES = ("collect", "estimate", "synthesize", "rollout", "certify", "all")


def _pair(text: str) -> list:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected lo,hi")
    return parts


def _basis(text: str) -> tuple:
    kind, _, order = text.partition(":")
    if kind not in ("monomial", "legendre") or not order.isdigit():
        raise argparse.ArgumentTypeError("expected {monomial,legendre}:<order>")
    return kind, int(order)


def _vector(text: str) -> list:
    return [float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualocp", description="Data-driven density-based optimal control synthesis.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(presets.SYSTEMS), help="worked example settings")
    p.add_argument("--norm", choices=("l1", "l2"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--basis", type=_basis, help="dictionary, e.g. legendre:4")
    p.add_argument("--degree-a", type=int, dest="deg_a")
    p.add_argument("--degree-c", type=int, dest="deg_c")
    p.add_argument("--degree-s", type=int, dest="deg_s")
    p.add_argument("--domain", type=_pair, help="lo,hi of the box X")
    p.add_argument("--exclude", type=_pair, help="lo,hi of the excluded box N")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str, help="run directory")
    p.add_argument("--x0", type=_vector, action="append", help="rollout initial state (repeatable)")
    p.add_argument("--horizon", type=float, dest="T", help="rollout horizon")
    p.add_argument("--zero-control", action="store_true", help="rollout with k = 0")
    p.add_argument("--backend", choices=("hsd", "cvxpy"))
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Precedence: preset < config file < explicit flags.

    Without ``--preset``/``--config`` the ``config.json`` saved in ``--out`` by a
    previous stage is reused, so later stages need only ``--out``.
    """
    base: dict = {}
    if args.preset:
        base = presets.preset(args.preset).to_json()
    if args.config:
        base.update(json.loads(Path(args.config).read_text()))
    elif not args.preset and args.out and (Path(args.out) / "config.json").exists():
        base.update(json.loads((Path(args.out) / "config.json").read_text()))
    flags = {k: getattr(args, k) for k in ("norm", "gamma", "alpha", "beta", "deg_a", "deg_c", "deg_s", "seed", "out", "x0", "T", "backend")}
    flags["domain"] = args.domain
    flags["excluded"] = args.exclude
    if args.basis:
        flags["basis_kind"], flags["basis_order"] = args.basis
    base.update({k: v for k, v in flags.items() if v is not None})
    cfg = RunConfig.from_json(base)
    cfg.validate()
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    stage = args.stage
    try:
        if stage in ("collect", "all"):
            data = presets.stage_collect(cfg)
            print(f"collect: {sum(d.size for d in data)} samples over {len(data)} input protocols")
        else:
            cfg.save(Path(cfg.out) / "config.json")
        if stage in ("estimate", "all"):
            gs = presets.stage_estimate(cfg)
            print(f"estimate: {len(gs.L)} generators on a {gs.basis.size}-function dictionary")
        if stage in ("synthesize", "all"):
            ctrl = presets.stage_synthesize(cfg)
            print(f"synthesize: status {ctrl.provenance['solver']['status']}, c1 = {ctrl.c[0]}")
        if stage in ("rollout", "all"):
            for k, r in enumerate(presets.stage_rollout(cfg, zero_control=args.zero_control)):
                tag = "diverged" if r.diverged else f"|x(T)| = {float((r.X[-1] ** 2).sum()) ** 0.5:.3g}"
                print(f"rollout {k}: {tag}, cost {r.total_cost:.4g}")
        if stage in ("certify", "all"):
            rep = presets.stage_certify(cfg)
            print(f"certify: {'PASS' if rep['passed'] else 'FAIL'} min {rep['min_value']:.3g} on {rep['n_points']} points")
            if not rep["passed"]:
                return 1
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 3
    except SolveError as exc:
        print(f"error [synthesize]: {exc}; diagnostics {json.dumps(exc.diagnostics, default=str)}", file=sys.stderr)
        return 4
    except CompileError as exc:
        print(f"error [synthesize]: {exc}", file=sys.stderr)
        return 4
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
