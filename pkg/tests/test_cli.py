import json

import pytest

from kinslab import cli
from kinslab import collision as col

SMALL = {
    "velocity": {"n_per_axis": 6},
    "slab": {"nx": 8},
    "n": 2,
    "validate": {"oracle_samples": 50_000, "oracle_probes": 3, "oracle_rtol": 0.05},
}


def _run(tmp_path, command, cfg, *extra):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    return cli.main([command, "--config", str(p), "--out", str(out), *extra]), out


def test_defaults_are_schema_valid():
    import jsonschema

    jsonschema.validate(cli.DEFAULTS, cli.CONFIG_SCHEMA)
    cfg = cli.load_config(text="{}")
    assert cfg == cli.DEFAULTS


def test_theta_out_of_range_exit_1(tmp_path, capsys):
    code, _ = _run(tmp_path, "decay-lemmas", {"theta": 0.3})
    assert code == cli.EXIT_CONFIG
    assert "theta outside (0, 1/4)" in capsys.readouterr().err


def test_schema_violation_exit_1(tmp_path):
    code, _ = _run(tmp_path, "decay-lemmas", {"velocity": {"n_per_axis": "twelve"}})
    assert code == cli.EXIT_CONFIG
    code, _ = _run(tmp_path, "decay-lemmas", {"unknown_key": 1})
    assert code == cli.EXIT_CONFIG


def test_unreadable_config_and_bad_args(tmp_path):
    assert cli.main(["decay-lemmas", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    assert cli.main(["no-such-command"]) == cli.EXIT_CONFIG
    assert cli.main(["decay-lemmas", "--threads", "0", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["--help"]) == cli.EXIT_OK


def test_aliasing_order_exit_1(tmp_path):
    code, _ = _run(tmp_path, "diffusion", {**SMALL, "n": 4})
    assert code == cli.EXIT_CONFIG


def test_odd_grid_exit_1(tmp_path):
    code, _ = _run(tmp_path, "validate-operators", {**SMALL, "velocity": {"n_per_axis": 7}})
    assert code == cli.EXIT_CONFIG


def test_validate_operators_ok(tmp_path):
    code, out = _run(tmp_path, "validate-operators", SMALL)
    assert code == cli.EXIT_OK
    rep = json.loads((out / "validate_operators.json").read_text())
    assert rep["passed"] and all(c["passed"] for c in rep["checks"].values())
    man = json.loads((out / "manifest_validate-operators.json").read_text())
    assert man["status"] == "ok" and "velocity_grid_hash" in man and man["config"]["n"] == 2
    assert (out / "config_schema.json").exists()


def test_corrupted_kernel_constants_exit_2(tmp_path, capsys):
    c1, c2 = col.calibrate_kernel_constants()
    code, out = _run(tmp_path, "validate-operators", {**SMALL, "kernel_constants": [c1, 1.2 * c2]})
    assert code == cli.EXIT_VALIDATION
    assert "null relation" in capsys.readouterr().err
    man = json.loads((out / "manifest_validate-operators.json").read_text())
    assert man["status"] == "failed" and man["partial_outputs"]


def test_diffusion_then_spectrum_cross_check(tmp_path):
    cfg = {**SMALL, "spectrum": {"ks": [0.0125, 0.025, 0.05, 0.1]}}
    code, out = _run(tmp_path, "diffusion", cfg)
    assert code == cli.EXIT_OK
    d = json.loads((out / "diffusion.json").read_text())
    assert d["passed"] and d["discrepancy"] < 1e-6
    assert (out / "G1.bin").stat().st_size == 16 * 8 * 216 // 2
    code, out = _run(tmp_path, "spectrum", cfg)
    assert code == cli.EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["fit_basis"] == "even" and s["passed"]
    assert (out / "spectrum.gp").read_text().startswith("set terminal")


def test_cycles_reproducible(tmp_path):
    cfg = {"cycles": {"T0": [5.0], "C1": [0.2, 0.3], "samples": 20_000}}
    code, out = _run(tmp_path, "cycles", cfg, "--seed", "7")
    assert code == cli.EXIT_OK
    first = (out / "persistence.csv").read_bytes()
    code, out = _run(tmp_path, "cycles", cfg, "--seed", "7", "--threads", "2")
    assert code == cli.EXIT_OK
    assert (out / "persistence.csv").read_bytes() == first


def test_cycles_insufficient_samples_exit_3(tmp_path, capsys):
    code, _ = _run(tmp_path, "cycles", {"cycles": {"T0": [20.0], "C1": [0.3], "samples": 1000}})
    assert code == cli.EXIT_NUMERICAL
    assert "insufficient samples" in capsys.readouterr().err


def test_decay_lemmas_ok(tmp_path):
    code, out = _run(tmp_path, "decay-lemmas", {})
    assert code == cli.EXIT_OK
    res = json.loads((out / "decay_lemmas.json").read_text())
    assert [r["q"] for r in res] == [1.0, 1.5, 2.0] and all(r["passed"] for r in res)


@pytest.mark.slow
def test_evolve_small(tmp_path):
    cfg = {
        **SMALL,
        "evolve": {"k_max": 1.2, "dk": 0.1, "T": 8.0, "window": [2.0, 8.0], "samples": 4},
    }
    code, out = _run(tmp_path, "evolve", cfg)
    assert code == cli.EXIT_OK
    e = json.loads((out / "evolve.json").read_text())
    assert e["slope_l2"] < 0
    assert (out / "trajectory.csv").read_text().startswith("t,l2_norm")


def test_evolve_under_resolved_k_grid_exit_3(tmp_path, capsys):
    cfg = {**SMALL, "evolve": {"k_max": 0.1, "dk": 0.05, "window": [1.0, 8.0]}}
    code, _ = _run(tmp_path, "evolve", cfg)
    assert code == cli.EXIT_NUMERICAL
    assert "under-resolved k grid" in capsys.readouterr().err
