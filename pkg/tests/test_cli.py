import json
import math

import numpy as np
import pytest

from robust_transport import experiments as ex
from robust_transport.cli import main
from robust_transport.measures import read_csv


def write_cfg(tmp_path, name="cfg.json", **kw):
    cfg = {"distribution": {"kind": "gaussian", "d": 3}, "n": 60, "eps_grid": [0.1],
           "rho_grid": [0.0], "trials": 1, "master_seed": 5,
           "sliced": {"restarts": 2, "steps": 30, "batch_size": 32},
           "output_dir": str(tmp_path / "out")}
    cfg.update(kw)
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


# ------------------------------------------------------------------ config


def test_config_rejects_bad_input(tmp_path):
    bad = [
        {"n": 10},
        {"distribution": {"kind": "gaussian", "d": 2}, "colour": 1},
        {"distribution": {"kind": "weird", "d": 2}},
        {"distribution": {"kind": "heavy_tail", "d": 2, "q": 2.0}},
        {"distribution": {"kind": "gaussian", "d": 5}, "n": 3},
        {"distribution": {"kind": "gaussian", "d": 2}, "eps_grid": []},
        {"distribution": {"kind": "gaussian", "d": 2}, "eps_grid": [0.6]},
        {"distribution": {"kind": "gaussian", "d": 2}, "k_list": [3]},
        {"distribution": {"kind": "gaussian", "d": 2}, "suite": "nope"},
    ]
    for raw in bad:
        with pytest.raises(ex.ConfigError):
            ex.ExperimentConfig.from_dict(raw)
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.load(p)


def test_config_defaults_and_warning(caplog):
    cfg = ex.ExperimentConfig.from_dict({"distribution": {"kind": "gaussian", "d": 20},
                                         "n": 100})
    assert cfg.ks() == [1, 2, 5, 20]
    assert "below d log(d)" in caplog.text
    s = cfg.sliced_config(3)
    assert s.restarts == 32 and s.seed == 3
    assert cfg.sliced_config(3, evaluation=False).restarts == 16
    assert cfg.filter_config(0.1, 0.0, 1).sigma == 2.0
    custom = ex.ExperimentConfig.from_dict({"distribution": {"kind": "gaussian", "d": 2},
                                            "filter_preset": {"sigma": 3, "big_c": 7}})
    f = custom.filter_config(0.1, 0.0, 0)
    assert (f.sigma, f.big_c) == (3.0, 7.0)


def test_samplers():
    ht = ex.ExperimentConfig.from_dict({"distribution": {"kind": "heavy_tail", "d": 3, "q": 6},
                                        "n": 40000})
    cov = np.cov(ex.sample_clean(ht, 0).points.T)
    assert np.allclose(np.diag(cov), 1.0, atol=0.1)
    lr = ex.ExperimentConfig.from_dict(
        {"distribution": {"kind": "linear_regression", "d": 4, "noise": 0.1}, "n": 500})
    z = ex.sample_clean(lr, 0).points
    assert np.std(z[:, -1] - z[:, 0]) == pytest.approx(0.1, rel=0.15)


# ---------------------------------------------------------------- simulate


def test_simulate_identity_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, eps_grid=[0.0, 0.1], rho_grid=[0.0, 0.2])
    assert main(["simulate", "--config", str(cfg)]) == 0
    t = tmp_path / "out" / "trial_000"
    assert (t / "cell_00" / "corrupted.csv").read_bytes() == (t / "clean.csv").read_bytes()
    first = {p.name + str(p.parent.name): p.read_bytes() for p in t.rglob("*.*")}
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    t2 = tmp_path / "again" / "trial_000"
    second = {p.name + str(p.parent.name): p.read_bytes() for p in t2.rglob("*.*")}
    assert first == second
    # Budgets of every cell re-certified from the files.
    assert main(["verify", "--config", str(cfg), "--suite", "budgets",
                 "--data-dir", str(tmp_path / "out")]) == 0


def test_verify_budgets_detects_tampering(tmp_path, capsys):
    cfg = write_cfg(tmp_path, rho_grid=[0.1])
    main(["simulate", "--config", str(cfg)])
    path = tmp_path / "out" / "trial_000" / "cell_00" / "corrupted.csv"
    m = read_csv(path)
    pts = np.array(m.points)
    plan = json.loads((path.parent / "plan.json").read_text())
    keep = sorted(set(range(60)) - set(plan["tv_indices"]))
    pts[keep[0]] += 5.0
    from robust_transport.measures import DiscreteMeasure, write_csv
    write_csv(DiscreteMeasure(pts), path, with_weights=False)
    assert main(["verify", "--config", str(cfg), "--suite", "budgets",
                 "--data-dir", str(tmp_path / "out")]) == 1
    assert "FAIL" in capsys.readouterr().out


# ------------------------------------------------------------------ verify


@pytest.mark.parametrize("suite", ["lemma_sandwich", "lemma_decompose", "wdro_equiv", "resilience"])
def test_verify_suites_pass(tmp_path, suite, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["verify", "--config", str(cfg), "--suite", suite,
                 "--out", str(tmp_path / "v")]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    report = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert all(c["passed"] or c["informational"] for c in report)


def test_verify_unknown_suite_is_usage_error(tmp_path):
    cfg = write_cfg(tmp_path)
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--config", str(cfg), "--suite", "nope"])
    assert exc.value.code == 2
    assert main(["verify", "--config", str(cfg)]) == 2


def test_missing_config_is_usage_error(tmp_path):
    assert main(["sweep", "--config", str(tmp_path / "missing.json")]) == 2


# ------------------------------------------------------------------ filter


def test_filter_command(tmp_path):
    cfg = write_cfg(tmp_path, n=400, distribution={"kind": "gaussian", "d": 4}, eps_grid=[0.05])
    main(["simulate", "--config", str(cfg)])
    data = tmp_path / "out" / "trial_000" / "cell_00" / "corrupted.csv"
    assert main(["filter", "--config", str(cfg), "--input", str(data),
                 "--out", str(tmp_path / "f")]) == 0
    est = read_csv(tmp_path / "f" / "estimate.csv")
    rep = json.loads((tmp_path / "f" / "report.json").read_text())
    assert est.size == rep["final_size"] <= 400
    assert rep["status"] == "threshold"


def test_filter_parse_error_reports_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,x2\n1,2\n1,zz\n")
    assert main(["filter", "--config", str(cfg), "--input", str(bad)]) == 2
    assert ":3:" in capsys.readouterr().err
    assert main(["filter", "--config", str(cfg)]) == 2


# ------------------------------------------------------------------- sweep


def test_sweep_identity_cell(tmp_path):
    cfg = write_cfg(tmp_path, eps_grid=[0.0], rho_grid=[0.0])
    assert main(["sweep", "--config", str(cfg), "--no-figure"]) == 0
    rows = ex.read_rows(tmp_path / "out" / "results.csv")
    assert [r["k"] for r in rows] == ["1", "2", "3"]
    for r in rows:
        assert float(r["w1k_filtered_vs_clean"]) <= float(r["w1k_corrupted_vs_clean"]) + 1e-9
        assert float(r["w1k_filtered_vs_clean"]) == pytest.approx(0.0, abs=1e-12)


def test_sweep_outputs_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, trials=2, eps_grid=[0.05, 0.1], rho_grid=[0.0, 0.1])
    assert main(["sweep", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    header = (out / "results.csv").read_text().splitlines()[0]
    assert header.split(",") == ex.SWEEP_HEADER
    assert (out / "results.png").stat().st_size > 0
    script = (out / "plot.gp").read_text()
    assert "results.csv" in script and "set datafile separator ','" in script
    first = (out / "results.csv").read_bytes()
    assert main(["sweep", "--config", str(cfg), "--no-figure"]) == 0
    assert (out / "results.csv").read_bytes() == first
    par = write_cfg(tmp_path, "par.json", trials=2, eps_grid=[0.05, 0.1],
                    rho_grid=[0.0, 0.1], workers=2, output_dir=str(tmp_path / "par"))
    assert main(["sweep", "--config", str(par), "--no-figure"]) == 0
    assert (tmp_path / "par" / "results.csv").read_bytes() == first


def test_sweep_rows_rederivable_from_trial_seed(tmp_path):
    cfg_path = write_cfg(tmp_path, trials=3)
    main(["sweep", "--config", str(cfg_path), "--no-figure"])
    rows = ex.read_rows(tmp_path / "out" / "results.csv")
    cfg = ex.ExperimentConfig.load(cfg_path)
    again = ex.sweep_trial(cfg, 2)
    mine = [r for r in rows if r["trial"] == "2"]
    assert [[ex.fmt(v) for v in row] for row in again] == [list(r.values()) for r in mine]


def test_seed_override_changes_output(tmp_path):
    cfg = write_cfg(tmp_path)
    main(["sweep", "--config", str(cfg), "--no-figure"])
    a = (tmp_path / "out" / "results.csv").read_bytes()
    main(["sweep", "--config", str(cfg), "--no-figure", "--seed", "99"])
    assert (tmp_path / "out" / "results.csv").read_bytes() != a


# --------------------------------------------------------------------- dro


def test_dro_command(tmp_path):
    cfg = write_cfg(tmp_path, n=400, trials=2, eps_grid=[0.05],
                    distribution={"kind": "linear_regression", "d": 4, "noise": 0.5},
                    dro={"sqrt_eps_coef": 1.0})
    assert main(["dro", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    rows = ex.read_rows(out / "risk.csv")
    assert len(rows) == 2
    for r in rows:
        assert float(r["tau"]) == pytest.approx(float(r["w11_filtered_vs_clean"])
                                                + math.sqrt(0.05), rel=1e-12)
        assert float(r["excess_risk"]) >= -1e-9
    fit = json.loads((out / "fit.json").read_text())
    assert fit["sqrt_eps_coef"] == 1.0 and len(fit["fits"]) == 2
    assert (out / "risk.png").stat().st_size > 0


def test_dro_fixed_tau_and_calibration(tmp_path):
    cfg = ex.ExperimentConfig.from_dict(
        {"distribution": {"kind": "linear_regression", "d": 3}, "n": 300, "eps_grid": [0.05],
         "sliced": {"restarts": 2, "steps": 30}, "dro": {"tau": 0.25, "sqrt_eps_coef": 0.0}})
    rows, _ = ex.dro_trial(cfg, 0, 0.0)
    assert rows[0][4] == 0.25
    coef = ex.calibrate_sqrt_eps_coef(cfg, trials=1, eps_grid=(0.05, 0.1))
    assert coef > 0
