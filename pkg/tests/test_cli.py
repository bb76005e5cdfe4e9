import csv
import json

import numpy as np
import pytest

from olt.cli import main


def _scenario(tmp_path, name="small.json", **over):
    d = {
        "name": "small",
        "seed": 3,
        "tx": {"symbol_rate": 128e9, "oversampling": 2, "n_symbols": 4096, "launch_power_dbm": 3.0},
        "link": {
            "spans": [
                {"length_km": 10.0},
                {"length_km": 10.0, "elements": [{"type": "amplifier", "gain_db": 2.0, "noise_figure_db": 5.0}]},
            ]
        },
        "simulation": {"step_km": 0.5, "n_realizations": 2},
        "estimator": {"delta_z_km": 1.0},
        "analysis": {"edge_guard_km": 1.0, "correlation": {"z_km": 5.0, "dz_values": [0.0, 0.1, 0.2, 0.3, 0.4]}},
    }
    for k, v in over.items():
        d[k] = v
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_outputs_and_manifest(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(_scenario(tmp_path)), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    names = {f["path"] for f in man["files"]}
    assert {"estimate.csv", "truth.csv", "anomalies.csv", "snr.txt", "estimates/estimate_000.csv"} <= names
    assert man["seed"] == 3 and man["command"] == "run"
    assert len(_rows(out / "estimate.csv")) == 20
    assert not list(tmp_path.glob(".olt-stage-*"))


def test_same_seed_gives_identical_manifest(tmp_path):
    cfg = str(_scenario(tmp_path))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "4"]) == 0
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    assert a == (tmp_path / "b" / "manifest.json").read_bytes()
    assert a != (tmp_path / "c" / "manifest.json").read_bytes()


def test_simulate_then_estimate_matches_run(tmp_path):
    cfg = str(_scenario(tmp_path))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")]) == 0
    sim = tmp_path / "sim"
    rx = [str(sim / r["rx_file"]) for r in _rows(sim / "captures.csv")]
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "est"), "--tx", str(sim / "tx.oltw"), "--rx", *rx]) == 0
    assert (tmp_path / "est" / "estimate.csv").read_bytes() == (tmp_path / "run" / "estimate.csv").read_bytes()


def test_config_error_exits_2_without_outputs(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"tx": {"oversampling": 1}, "link": {"spans": [{"length_km": 10}]}}')
    out = tmp_path / "out"
    assert main(["run", "--config", str(p), "--out", str(out)]) == 2
    assert "tx.oversampling" in capsys.readouterr().err
    assert not out.exists()
    assert main(["run", "--out", str(out)]) == 2


def test_numerical_failure_exits_3_without_outputs(tmp_path, capsys):
    # at 64 GBd a 20 km link cannot resolve 0.5 km cells: the normal matrix is singular
    cfg = _scenario(tmp_path, tx={"symbol_rate": 64e9, "oversampling": 2, "n_symbols": 4096}, estimator={"delta_z_km": 0.5})
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 3
    assert "singular" in capsys.readouterr().err
    assert not out.exists()
    assert not list(tmp_path.glob(".olt-stage-*"))


def test_snr_needs_two_estimates(tmp_path):
    cfg = str(_scenario(tmp_path))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    run = tmp_path / "run"
    one = [str(run / "estimates/estimate_000.csv")]
    assert main(["snr", "--out", str(tmp_path / "s1"), "--truth", str(run / "truth.csv"), "--estimates", *one]) == 2
    two = one + [str(run / "estimates/estimate_001.csv")]
    assert main(["snr", "--out", str(tmp_path / "s2"), "--truth", str(run / "truth.csv"), "--estimates", *two]) == 0
    assert "polarization averaged" in (tmp_path / "s2" / "snr.txt").read_text()


def test_correlation_curve_starts_at_one_and_falls(tmp_path):
    out = tmp_path / "corr"
    assert main(["correlation", "--config", str(_scenario(tmp_path)), "--out", str(out)]) == 0
    rho = np.array([float(r["rho"]) for r in _rows(out / "correlation.csv")])
    assert rho[0] == pytest.approx(1.0)
    assert np.all(np.diff(rho) <= 1e-12)


def test_detect_and_sweep_subcommands(tmp_path):
    cfg = _scenario(tmp_path, dimensions={"sop_sweep": {"grid_theta": 2, "grid_phi": 1}})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    prof = tmp_path / "run" / "estimates" / "estimate_000.csv"
    assert main(["detect", "--config", str(cfg), "--out", str(tmp_path / "det"), "--profile", str(prof)]) == 0
    assert (tmp_path / "det" / "anomalies.txt").exists()
    assert main(["sop-sweep", "--config", str(cfg), "--out", str(tmp_path / "sw")]) == 0
    assert len(_rows(tmp_path / "sw" / "sop_sweep.csv")) == 2 * 20


def test_temporal_and_spectral_subcommands(tmp_path):
    cfg = _scenario(tmp_path, dimensions={"n_captures": 3, "window": 3, "dispersion_values": [16.5, 17.0]})
    assert main(["temporal", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    assert len(_rows(tmp_path / "t" / "temporal_map.csv")) == 3 * 20
    assert main(["spectral", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
    assert {r["axis_value"] for r in _rows(tmp_path / "f" / "spectral_map.csv")} == {"16.5", "17.0"}


def test_plots_are_written_on_request(tmp_path):
    out = tmp_path / "p"
    assert main(["run", "--config", str(_scenario(tmp_path)), "--out", str(out), "--format", "csv+plots"]) == 0
    assert (out / "estimate.svg").read_text().lstrip().startswith("<?xml")
