import json

import numpy as np
import pytest

from dualocp import presets
from dualocp.cli import build_parser, resolve_config, run


def _run(capsys, *argv):
    code = run(list(argv))
    return code, capsys.readouterr()


def test_full_pipeline_example1(tmp_path, capsys):
    out = str(tmp_path / "ex1")
    code, cap = _run(capsys, "all", "--preset", "example1", "--out", out)
    assert code == 0, cap.err
    for name in ("data_u0.csv", "data_u1.csv", "generators.json", "program.json", "controller.json", "certificate.json"):
        assert (tmp_path / "ex1" / name).exists()
    assert len(list((tmp_path / "ex1" / "rollouts").glob("rollout_*.csv"))) == 5
    assert "certify: PASS" in cap.out


def test_stages_can_be_replayed(tmp_path, capsys):
    out = str(tmp_path / "r")
    assert _run(capsys, "collect", "--preset", "example1", "--out", out)[0] == 0
    assert _run(capsys, "estimate", "--out", out)[0] == 0
    assert _run(capsys, "synthesize", "--out", out)[0] == 0
    code, cap = _run(capsys, "rollout", "--out", out, "--x0", "2,-2", "--horizon", "5")
    assert code == 0 and "rollout 0" in cap.out and "rollout 1" not in cap.out


def test_collect_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert _run(capsys, "collect", "--preset", "example1", "--seed", "7", "--out", str(tmp_path / d))[0] == 0
    for f in ("data_u0.csv", "data_u1.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_prerequisite_exit_code(tmp_path, capsys):
    code, cap = _run(capsys, "synthesize", "--preset", "example1", "--out", str(tmp_path / "none"))
    assert code == 3 and "missing prerequisite" in cap.err


def test_bad_configuration_exit_code(tmp_path, capsys):
    code, cap = _run(capsys, "collect", "--preset", "example1", "--degree-c", "9", "--out", str(tmp_path))
    assert code == 2 and "error [config]" in cap.err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"system": "example1", "colour": "red"}))
    assert _run(capsys, "collect", "--config", str(bad), "--out", str(tmp_path))[0] == 2


def test_infeasible_synthesis_exit_code(tmp_path, capsys):
    out = str(tmp_path / "inf")
    assert _run(capsys, "collect", "--preset", "example1", "--out", out)[0] == 0
    assert _run(capsys, "estimate", "--out", out)[0] == 0
    # a huge required decay rate cannot be met by a degree-2 numerator
    code, cap = _run(capsys, "synthesize", "--out", out, "--gamma", "200")
    assert code == 4 and "diagnostics" in cap.err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**presets.preset("example1").to_json(), "alpha": 6, "beta": 2.0}))
    args = build_parser().parse_args(["collect", "--preset", "vdp", "--config", str(cfg), "--beta", "3", "--basis", "monomial:4"])
    c = resolve_config(args)
    assert (c.system, c.alpha, c.beta, c.basis_kind, c.basis_order) == ("example1", 6, 3.0, "monomial", 4)


def test_vdp_negative_gamma_synthesizes(tmp_path, capsys):
    code, cap = _run(capsys, "all", "--preset", "vdp", "--gamma", "-5", "--out", str(tmp_path / "v"))
    assert "synthesize: status optimal" in cap.out
    r = np.genfromtxt(tmp_path / "v" / "rollouts" / "rollout_0.csv", delimiter=",", names=True)
    final = np.hypot(r["x1"][-1], r["x2"][-1])
    assert np.isfinite(final) and final > 0.5  # does not converge


def test_lorentz_zero_control_is_chaotic(tmp_path, capsys):
    code, cap = _run(capsys, "rollout", "--preset", "lorentz", "--zero-control", "--out", str(tmp_path / "lz"))
    assert code == 0
    r = np.genfromtxt(tmp_path / "lz" / "rollouts" / "rollout_0.csv", delimiter=",", names=True)
    X = np.stack([r["x1"], r["x2"], r["x3"]], 1)
    assert np.abs(X).max() < 100
    assert np.linalg.norm(X[-1000:], axis=1).min() > 1.0
    assert np.all(r["u1"] == 0)


def test_unknown_preset_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["all", "--preset", "duffing"])
    with pytest.raises(ValueError):
        presets.preset("duffing")
