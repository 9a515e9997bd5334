"""End-to-end acceptance criteria 1-10.

Each criterion prints one ``PASS``/``FAIL`` line (also repeated in the pytest
terminal summary) and fails the test when it is not met.
"""

import time

import numpy as np
import pytest

from dualocp import presets
from dualocp.ctrl import certify_density, local_design
from dualocp.dynsim import collect_protocol
from dualocp.gedmd import estimate_generators
from dualocp.ocpsynth import OcpSpec, build_constraint_poly, moments
from dualocp.polybasis import Poly, build_dictionary
from oracles import midpoint_moments, negative_corpus, sos_status, symbolic_transport
from test_gedmd import _galerkin_oracle, backward_difference_ratio

BOX2 = np.array([[-5.0, -5.0], [5.0, 5.0]])
N2 = np.array([[-0.1, -0.1], [0.1, 0.1]])


class Runs:
    """Preset pipelines (collect, estimate, synthesize, rollout), run once per session."""

    def __init__(self, root):
        self.root = root
        self.cache = {}

    def get(self, name, **over):
        key = (name, tuple(sorted(over.items())))
        if key not in self.cache:
            cfg = presets.preset(name, out=str(self.root / f"{name}_{len(self.cache)}"), **over)
            t0 = time.time()
            try:
                data = presets.stage_collect(cfg)
                gs = presets.stage_estimate(cfg)
                ctrl, prog, sol = presets.synthesize(cfg, gs, data)
                ctrl.save(presets._paths(cfg)["controller"])
                rolls = presets.stage_rollout(cfg)
                self.cache[key] = dict(cfg=cfg, gs=gs, ctrl=ctrl, sol=sol, rolls=rolls, error=None, seconds=time.time() - t0)
            except Exception as exc:  # reported by the criterion that needed the run
                self.cache[key] = dict(cfg=cfg, error=f"{type(exc).__name__}: {exc}", seconds=time.time() - t0)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def _report(log, k, ok, detail):
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    log[k] = line
    print(line)
    assert ok, line


def _normalized_k(ctrl):
    a0 = ctrl.a.coefficient((0,) * ctrl.n)
    return {e: v / a0 for e, v in ctrl.c[0].to_dict().items()}


# ---------------------------------------------------------------------------


def crit1(runs):
    r = runs.get("example1")
    if r["error"]:
        return False, r["error"]
    k = _normalized_k(r["ctrl"])
    lead = k.get((1, 1), 0.0)
    other = max(abs(v) for e, v in k.items() if e != (1, 1))
    ok = lead < 0 and abs(lead) >= 10 * other and r["seconds"] <= 300
    return ok, f"k_x1x2 = {lead:.4f}, largest other |coef| = {other:.2e} (ratio {abs(lead) / other:.0f}), {r['seconds']:.1f} s"


def crit2(runs):
    r = runs.get("example1")
    if r["error"]:
        return False, r["error"]
    finals = [float(np.linalg.norm(ro.X[ro.t <= 10.0 + 1e-9][-1])) for ro in r["rolls"]]
    hits = [ro.first_hit(0.05) for ro in r["rolls"]]
    ok = len(finals) == 5 and all(h <= 10.0 for h in hits)
    return ok, f"first hits of |x| <= 0.05: {[round(h, 2) for h in hits]}, |x(10)| = {[f'{f:.1e}' for f in finals]}"


def crit3(runs):
    r0, r1, rm = runs.get("vdp", gamma=0.0), runs.get("vdp", gamma=1.0), runs.get("vdp", gamma=-5.0)
    errs = [r["error"] for r in (r0, r1, rm) if r["error"]]
    if errs:
        return False, "; ".join(errs)
    h0, h1 = r0["rolls"][0].first_hit(0.5), r1["rolls"][0].first_hit(0.5)
    neg = rm["rolls"][0]
    bounded = not neg.diverged and np.all(np.isfinite(neg.X))
    ok = h1 < h0 and np.isfinite(h1) and bounded
    return ok, (f"hit |x|=0.5: gamma=1 {h1:.2f} s < gamma=0 {h0:.2f} s; gamma=-5 solved, bounded={bounded} "
                f"(max |x| {np.abs(neg.X).max():.1f}, |x(T)| {np.linalg.norm(neg.X[-1]):.2f})")


def crit4(runs):
    out, ok = [], True
    for g in (0.0, 2.0):
        r = runs.get("pendulum", gamma=g)
        if r["error"]:
            return False, r["error"]
        h = r["rolls"][0].first_hit(0.1)
        ok &= h <= 20.0
        out.append(f"gamma={g:g}: hit |x|=0.1 at {h:.2f} s")
    rm = runs.get("pendulum", gamma=-5.0)
    out.append("gamma=-5: " + ("solved" if rm["error"] is None else rm["error"]))
    return ok, "; ".join(out)


def crit5(runs):
    r = runs.get("lorentz")
    if r["error"]:
        return False, r["error"]
    h = r["rolls"][0].first_hit(0.5)
    order = r["cfg"].basis_order
    return h <= 20.0 and order >= 4, f"dictionary order {order}, hit |x|=0.5 at {h:.2f} s, |x(20)| = {np.linalg.norm(r['rolls'][0].X[-1]):.1e}, {r['seconds']:.0f} s"


def crit6(runs):
    import sympy

    system = presets.example1_system()
    x1, x2 = sympy.symbols("x1 x2")
    f = [-x1 + x2, -sympy.Rational(1, 2) * (x1 + x2) + sympy.Rational(1, 2) * x1**2 * x2]
    d = build_dictionary("monomial", 2, 4, BOX2)
    data = collect_protocol(system, BOX2, 10000, 2, 0.01, seed=0, analytic=True)
    L0 = estimate_generators(data, d).L[0]
    ref = _galerkin_oracle(data[0].X.T, f, [x1 ** int(e[0]) * x2 ** int(e[1]) for e in d.exps], (x1, x2))
    rel = np.linalg.norm(L0 - ref) / np.linalg.norm(ref)
    ratio = backward_difference_ratio(system)
    return rel <= 1e-6 and 1.6 <= ratio <= 2.4, f"analytic relative error {rel:.1e}; backward-difference error ratio {ratio:.2f}"


def crit7(runs):
    system = presets.example1_system()
    from dualocp.gedmd import exact_generators

    basis = build_dictionary("legendre", 2, 4, BOX2)
    gs = exact_generators(system.drift_polys, system.input_polys, basis)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        F = rng.normal(size=(2, 2))
        b = Poly.quadratic_form(F @ F.T + np.eye(2))
        alpha, gamma = int(rng.integers(1, 6)), float(rng.uniform(-5, 5))
        sa, sc = basis.support(1), basis.support(2)
        T = build_constraint_poly(gs, b, alpha, gamma, sa, sc)
        v = rng.normal(size=T.n_dec)
        ca, cc = np.zeros(basis.size), np.zeros(basis.size)
        ca[sa], cc[sc] = v[: len(sa)], v[len(sa):]
        ref = symbolic_transport(basis.to_poly(ca), [basis.to_poly(cc)], system.drift_polys, system.input_polys, b, alpha, gamma)
        X = rng.uniform(-5, 5, size=(100, 2))
        want = ref(X)
        worst = max(worst, np.max(np.abs(T.evaluate(X, v) - want)) / np.max(np.abs(want)))
    return worst <= 1e-8, f"worst relative deviation over 10 assignments x 100 points: {worst:.1e}"


def crit8(runs):
    lines, ok = [], True
    for name, over in (("example1", {}), ("vdp", {"gamma": 0.0}), ("vdp", {"gamma": 1.0}), ("vdp", {"gamma": -5.0}),
                       ("pendulum", {"gamma": 0.0}), ("pendulum", {"gamma": 2.0}), ("pendulum", {"gamma": -5.0}), ("lorentz", {})):
        r = runs.get(name, **over)
        if r["error"]:
            continue  # only solver-optimal programs are certified
        cfg = r["cfg"]
        rep = certify_density(r["ctrl"], cfg.box(cfg.domain), cfg.box(cfg.excluded), generators=r["gs"])
        ok &= rep.passed
        lines.append(f"{name}{'' if not over else ' g=' + format(over['gamma'], 'g')}:{'ok' if rep.passed else 'VIOLATED'}({rep.n_points})")
    corpus = [sos_status(p, box) for p, box in negative_corpus()]
    bad = [s for s in corpus if s not in ("rejected", "infeasible")]
    ok &= not bad and len(lines) > 0
    return ok, f"{' '.join(lines)}; negative corpus: {corpus.count('rejected')} rejected, {corpus.count('infeasible')} infeasible, {len(bad)} accepted"


def crit9(runs):
    A = np.array([[-1.0, 1.0], [-0.5, -0.5]])
    b = local_design(A, np.zeros((2, 1))).b_poly()
    spec = OcpSpec(n=2, m=1, b=b, domain=BOX2, excluded=N2)
    basis = build_dictionary("legendre", 2, 4, BOX2)
    d1, d2 = moments(spec, basis)

    def integrand(P):
        w = 1.0 / b(P) ** spec.alpha
        psi = basis.eval(P)
        return np.concatenate([(spec.q(P) * w)[:, None] * psi, w[:, None] * psi], axis=1)

    ref = midpoint_moments(integrand, BOX2, N2)
    got = np.concatenate([d1, d2])
    big = np.abs(ref) > 1e-8 * np.abs(ref).max()
    rel = np.max(np.abs(got[big] - ref[big]) / np.abs(ref[big]))
    return rel <= 1e-4, f"max relative deviation from the midpoint oracle: {rel:.1e} over {int(big.sum())} non-zero moments"


def crit10(runs):
    P = local_design([[-1.0]], [[1.0]]).P[0, 0]
    errs = [abs(P - (np.sqrt(2) - 1))]
    for a, q in ((-2.0, 0.5), (0.0, 1.0), (1.5, 3.0), (4.0, 0.1)):
        K = local_design([[a]], [[1.0]], [[q]]).K[0, 0]
        errs.append(abs(K - (a + np.sqrt(a * a + q))))
    return max(errs) <= 1e-10, f"max deviation from the scalar closed forms: {max(errs):.1e}"


CRITERIA = {1: crit1, 2: crit2, 3: crit3, 4: crit4, 5: crit5, 6: crit6, 7: crit7, 8: crit8, 9: crit9, 10: crit10}


@pytest.mark.slow
@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, runs, acceptance_log):
    ok, detail = CRITERIA[k](runs)
    _report(acceptance_log, k, bool(ok), detail)
