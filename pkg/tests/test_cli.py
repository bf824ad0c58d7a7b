import hashlib
import json
import math

import pytest

from npe_control.cli import DEFAULT_CONFIG, OUTPUT_ENV, config_hash, load_config, main
from npe_control.errors import ConfigurationError
from npe_control.spectral import load_field, norm0

SMALL = {"lattice": {"N": 14, "K": 4}}


def run(tmp_path, command, cfg=None, *extra, name="out"):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps({**SMALL, **(cfg or {})}))
    out = tmp_path / name
    code = main([command, "--config", str(cfg_path), "--out", str(out), *extra])
    report = json.loads((out / "report.json").read_text())
    assert report["exit_status"] == code
    return code, report, out


def csv_body(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# generated ")
    return lines[1:]


# config ----------------------------------------------------------------------------


def test_load_config_defaults_and_overrides(tmp_path):
    cfg, raw = load_config()
    assert cfg == DEFAULT_CONFIG and raw == {}
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lattice": {"K": 4, "N": 14}, "quadrature": {"growth": 1.1}}))
    cfg, _ = load_config(p)
    assert cfg["lattice"] == {"N": 14, "K": 4}
    assert cfg["quadrature"]["growth"] == 1.1 and cfg["quadrature"]["horizon"] == 30.0


@pytest.mark.parametrize("doc", ['{"lattise": {}}', '{"quadrature": {"h": 1}}', "[1, 2]", "{not json"])
def test_load_config_rejects(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(doc)
    with pytest.raises(ConfigurationError):
        load_config(p)


def test_config_hash_is_canonical():
    a = {"x": 1, "y": [1, 2]}
    b = {"y": [1, 2], "x": 1}
    assert config_hash(a) == config_hash(b) != config_hash({"x": 2, "y": [1, 2]})


# exit codes -------------------------------------------------------------------------


def test_unknown_key_exit_2(tmp_path):
    code, report, _ = run(tmp_path, "certify", {"bogus": 1})
    assert code == 2 and report["error"]["type"] == "ConfigurationError"


def test_missing_config_exit_2(tmp_path):
    out = tmp_path / "o"
    assert main(["certify", "--config", str(tmp_path / "nope.json"), "--out", str(out)]) == 2
    assert (out / "report.json").exists()


def test_bad_lattice_exit_2(tmp_path):
    code, _, _ = run(tmp_path, "build-control", {"lattice": {"N": 12, "K": 4}})
    assert code == 2


def test_box_too_small_for_resolution_exit_2(tmp_path):
    code, _, _ = run(tmp_path, "build-control", {"box": {"lower": [0, 0, 0], "upper": [1, 1, 1]}})
    assert code == 2


def test_build_control(tmp_path):
    code, report, out = run(tmp_path, "build-control", {}, "--k-doubling")
    assert code == 0
    assert report["control"]["norm0"] == pytest.approx(1.0, abs=1e-12)
    u = load_field(out / "u.npef")
    assert norm0(u) == pytest.approx(1.0, abs=1e-12)
    assert (out / "u_K8.npef").exists()
    rows = csv_body(out / "convergence.csv")
    assert rows[0].split(",")[:2] == ["K", "N"] and len(rows) == 3


def test_certify_default_searches(tmp_path):
    code, report, out = run(tmp_path, "certify")
    assert code == 0
    assert report["certificate"]["passed"] and report["certificate"]["beta_hat"] > 0
    assert report["certificate"]["amplitudes"] == [-1.0, -2.0, 0.0]
    assert report["amplitude_search"]["stage"] == "grid"
    assert csv_body(out / "certificate.csv")[0] == "t,psi,ratio,threshold,margin"


def test_certify_zero_amplitudes_exit_3(tmp_path):
    code, report, _ = run(tmp_path, "certify", {"amplitudes": [0, 0, 0]})
    assert code == 3 and report["error"]["type"] == "InvariantError"


def test_certify_negated_exit_4(tmp_path):
    code, report, _ = run(tmp_path, "certify", {}, "--negate")
    assert code == 4
    assert report["certificate"]["sign"] == -1 and not report["certificate"]["passed"]
    assert report["error"]["type"] == "CertificationFailure"


def test_certify_without_search_exit_4(tmp_path):
    code, _, _ = run(tmp_path, "certify", {"search_amplitudes": False})
    assert code == 4


def test_simulate_single_mode(tmp_path):
    code, report, out = run(tmp_path, "simulate", {"datum": {"kind": "single_mode", "k": [0, 0, 1], "component": 0}})
    assert code == 0
    assert report["trajectory"]["alpha"] == pytest.approx(1.0, rel=1e-13)
    rows = csv_body(out / "trajectory.csv")
    assert rows[0] == "t,norm0,denominator,envelope,status"
    assert len(rows) == 102


def test_simulate_blowup_exit_5(tmp_path):
    code, report, out = run(tmp_path, "simulate", {}, "--oracle")
    assert code == 5
    t_star = report["trajectory"]["blowup_time"]
    assert 0.1 < t_star < 0.2
    assert report["oracle"]["t_end"] == pytest.approx(0.9 * t_star)
    assert report["oracle"]["max_deviation"] < 1e-4
    header = csv_body(out / "trajectory.csv")[0].split(",")
    assert header[-2:] == ["oracle_norm0", "oracle_deviation"]


def test_simulate_quadrature_failure_exit_6(tmp_path):
    cfg = {"datum": {"kind": "random_smooth", "seed": 3, "norm": 5.0}, "quadrature": {"tail_tolerance": 1e-300}}
    code, report, _ = run(tmp_path, "simulate", cfg)
    assert code == 6 and report["error"]["type"] == "QuadratureFailure"


def test_simulate_missing_file_exit_2(tmp_path):
    code, _, _ = run(tmp_path, "simulate", {"datum": {"kind": "file", "path": str(tmp_path / "none.npef")}})
    assert code == 2


def test_simulate_from_file(tmp_path):
    _, _, out = run(tmp_path, "build-control", name="build")
    code, report, _ = run(tmp_path, "simulate", {"datum": {"kind": "file", "path": str(out / "u.npef")}})
    assert code == 0 and report["trajectory"]["status"] == "Completed"


@pytest.mark.parametrize(
    "datum,verdict",
    [
        ({"kind": "random_smooth", "seed": 1, "norm": 1e-3}, "Stability"),
        ({"kind": "control_multiple", "mu": 2.0, "relative": True}, "Explosion"),
        ({"kind": "control_multiple", "mu": 1.0, "relative": True}, "Growing"),
        ({"kind": "control_multiple", "mu": -1.0, "relative": True}, "Stability"),
    ],
)
def test_classify(tmp_path, datum, verdict):
    code, report, out = run(tmp_path, "classify", {"datum": datum})
    assert code == 0
    assert report["classification"]["verdict"] == verdict
    assert json.loads((out / "classification.json").read_text())["verdict"] == verdict


def test_stabilize_demo_and_falsification(tmp_path):
    cfg = {"synthesis": {"n_samples_c1": 4, "n_samples_c": 8}}
    code, report, out = run(tmp_path, "stabilize", cfg, name="ok")
    assert code == 0
    assert report["evaluation"]["ok"]
    assert report["uncontrolled"]["status"] == "BlowUp"
    plan = json.loads((out / "plan.json").read_text())
    for f in ("uncontrolled.csv", "controlled.csv"):
        assert csv_body(out / f)[0] == "t,norm0,denominator,envelope,status"
    code, report, _ = run(tmp_path, "stabilize", cfg, "--lambda-override", str(plan["lam"] / 100), name="weak")
    assert code == 7 and not report["evaluation"]["envelope_ok"]


def test_stabilize_stable_datum_gets_zero_lambda(tmp_path):
    cfg = {"datum": {"kind": "random_smooth", "seed": 2, "norm": 1e-3},
           "synthesis": {"n_samples_c1": 2, "n_samples_c": 2}}
    code, report, _ = run(tmp_path, "stabilize", cfg)
    assert code == 0
    assert report["plan"]["lam"] == 0.0


def test_sweep_mu(tmp_path):
    code, _, out = run(tmp_path, "sweep", {"sweep": {"axis": "mu", "values": [0.5, 2.0]}})
    assert code == 0
    rows = [r.split(",") for r in csv_body(out / "sweep.csv")]
    assert rows[0] == ["axis", "value", "metric", "metric_value"]
    verdicts = {float(r[1]): r[3] for r in rows[1:] if r[2] == "verdict"}
    assert verdicts == {0.5: "Stability", 2.0: "Explosion"}


def test_sweep_k(tmp_path):
    code, _, out = run(tmp_path, "sweep", {"sweep": {"axis": "K", "values": [4, 8]}})
    assert code == 0
    rows = [r.split(",") for r in csv_body(out / "sweep.csv")[1:]]
    betas = [float(r[3]) for r in rows if r[2] == "beta_hat"]
    assert len(betas) == 2 and abs(betas[1] - betas[0]) <= 0.01 * betas[0]


def test_sweep_lambda_margin_monotone(tmp_path):
    cfg = {"sweep": {"axis": "lambda", "values": [0.5, 1, 2]}, "synthesis": {"n_samples_c1": 2, "n_samples_c": 4}}
    code, _, out = run(tmp_path, "sweep", cfg)
    assert code == 0
    rows = [r.split(",") for r in csv_body(out / "sweep.csv")[1:]]
    margins = [float(r[3]) for r in rows if r[2] == "psi_bound_margin"]
    assert margins == sorted(margins)


def test_sweep_empty_exit_2(tmp_path):
    code, _, _ = run(tmp_path, "sweep", {"sweep": {"axis": "mu", "values": []}})
    assert code == 2


# report contract ------------------------------------------------------------------


def test_report_hash_and_checksums(tmp_path):
    code, report, out = run(tmp_path, "certify")
    assert report["config_hash"] == config_hash(report["config"])
    cfg, _ = load_config(tmp_path / "out.json")
    assert report["config_hash"] == config_hash(cfg)
    names = {f["path"] for f in report["files"]}
    assert names == {"certificate.csv"}
    for f in report["files"]:
        assert hashlib.sha256((out / f["path"]).read_bytes()).hexdigest() == f["sha256"]
    assert report["wall_clock_s"] >= 0 and math.isfinite(report["wall_clock_s"])
    assert not list(out.glob(".*.tmp"))


def test_csv_bodies_deterministic(tmp_path):
    cfg = {"datum": {"kind": "random_smooth", "seed": 4}}
    _, _, a = run(tmp_path, "simulate", cfg, "--seed", "7", name="a")
    _, _, b = run(tmp_path, "simulate", cfg, "--seed", "7", name="b")
    assert csv_body(a / "trajectory.csv") == csv_body(b / "trajectory.csv")


def test_output_dir_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "env_out"
    monkeypatch.setenv(OUTPUT_ENV, str(target))
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(SMALL))
    assert main(["build-control", "--config", str(cfg_path)]) == 0
    assert (target / "u.npef").exists() and (target / "report.json").exists()
