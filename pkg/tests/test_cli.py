import json
import math
from pathlib import Path

import pytest

from srperm import __version__
from srperm.main import main, parse_assignment
from srperm.exceptions import ConfigurationError, NumericalFailure
from srperm.services import kernel as kernel_service

UNIT_BETA = f"beta={1 / (4 * math.pi)!r}"


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("SRPERM_SEED", "SRPERM_WORKERS", "SRPERM_DP_BUDGET", "SRPERM_MEMORY_CAP_MB"):
        monkeypatch.delenv(name, raising=False)


def _records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_hn_writes_header_records_and_manifest(tmp_path, capsys):
    out = tmp_path / "hn.jsonl"
    assert main(["hn", "--set", "N_max=10", "--seed", "3", "--out", str(out)]) == 0
    records = _records(out)
    header = records[0]
    assert header["record"] == "run_header"
    assert header["command"] == "hn"
    assert header["seed"] == 3
    assert header["code_version"] == __version__
    assert header["parameters"]["N_max"] == 10
    assert [r["fields"]["n"] for r in records if r["record"] == "h"] == list(range(11))
    checks = [r for r in records if r["record"] == "check"]
    assert checks and all(r["passed"] for r in checks)

    manifest = json.loads((tmp_path / "hn.jsonl.manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["config_digest"] == header["config_digest"]
    assert manifest["outputs"] == [str(out)]
    assert "hn" in capsys.readouterr().out


def test_runs_are_byte_identical(tmp_path):
    args = ["sample-fourier", "--set", UNIT_BETA, "--set", "L=2.0", "--set", "N=12", "--set", "draws=5",
            "--set", "eps_cut=10.0", "--seed", "11"]
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(args + ["--out", str(first)]) == 0
    assert main(args + ["--out", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()
    assert sum(1 for r in _records(first) if r["record"] == "spectrum") == 5


def test_print_config(capsys):
    assert main(["rho-c", "--set", "alpha=0.5", "--set", "L_grid=[4.0]", "--print-config"]) == 0
    config = json.loads(capsys.readouterr().out)
    assert config["alpha"] == 0.5
    assert config["L_grid"] == [4.0]


def test_config_file_and_overrides(tmp_path, capsys):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"regime": "logarithmic", "gamma": 1.0, "N_max": 30}))
    assert main(["hn", "--config", str(path), "--set", "N_max=12", "--print-config"]) == 0
    config = json.loads(capsys.readouterr().out)
    assert config["regime"] == "logarithmic"
    assert config["N_max"] == 12


def test_unknown_key_exits_with_configuration_code():
    assert main(["hn", "--set", "colour=blue"]) == ConfigurationError.exit_code


def test_missing_beta_exits_with_configuration_code(tmp_path):
    out = tmp_path / "rho.jsonl"
    assert main(["rho-c", "--out", str(out)]) == 2
    manifest = json.loads((tmp_path / "rho.jsonl.manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "beta" in manifest["error_message"]


def test_missing_config_file_exits_with_configuration_code(tmp_path):
    assert main(["hn", "--config", str(tmp_path / "absent.json")]) == 2


def test_budget_refusal_exit_code(tmp_path):
    out = tmp_path / "refused.jsonl"
    args = ["sample-fourier", "--set", UNIT_BETA, "--set", "L=2.0", "--set", "N=50", "--set", "dp_budget=1",
            "--out", str(out)]
    assert main(args) == 4


def test_giant_cycle_needs_logarithmic_weights(tmp_path):
    assert main(["giant-cycle", "--set", "sampler=nonspatial", "--out", str(tmp_path / "g.jsonl")]) == 2


def test_verify_pd_nonspatial(tmp_path):
    out = tmp_path / "pd.jsonl"
    args = ["verify-pd", "--set", "sampler=nonspatial", "--set", "N=500", "--set", "draws=200",
            "--set", "reference_draws=2000", "--out", str(out)]
    assert main(args) == 0
    report = next(r for r in _records(out) if r["record"] == "pd_fit")
    assert report["fields"]["theta"] == pytest.approx(1.0)
    assert len(report["fields"]["ks_pvalues"]) == 3
    assert len(report["fields"]["beta_pvalues"]) == 3


@pytest.mark.parametrize("text, expected", [
    ("N=12", {"N": 12}),
    ("L_grid=[4, 8]", {"L_grid": [4, 8]}),
    ("sampler=marginal", {"sampler": "marginal"}),
])
def test_parse_assignment(text, expected):
    assert parse_assignment(text) == expected


def test_parse_assignment_needs_key():
    with pytest.raises(ConfigurationError):
        parse_assignment("=3")


CONFIGS = Path(__file__).resolve().parents[1] / "configs"
ZETA_3_2 = 2.612375348685488


def test_rho_c_gaussian_config(tmp_path):
    out = tmp_path / "rho.jsonl"
    assert main(["rho-c", "--config", str(CONFIGS / "rho_c_gaussian.json"), "--out", str(out)]) == 0
    records = _records(out)
    fields = next(r for r in records if r["record"] == "rho_c")["fields"]
    assert fields["rho_c"] == pytest.approx(ZETA_3_2, rel=1e-10)
    assert fields["geometric_bound"] == pytest.approx(ZETA_3_2, rel=1e-6)
    rows = [r["fields"] for r in records if r["record"] == "finite_volume"]
    assert [row["L"] for row in rows] == [8.0, 16.0, 32.0]
    errors = [row["rel_error"] for row in rows]
    assert errors[0] > errors[1] > errors[2]
    manifest = json.loads((tmp_path / "rho.jsonl.manifest.json").read_text())
    assert manifest["status"] == "completed"


def test_rho_c_power_law_config(tmp_path):
    out = tmp_path / "rho.jsonl"
    assert main(["rho-c", "--config", str(CONFIGS / "rho_c_power_law.json"), "--out", str(out)]) == 0
    records = _records(out)
    fields = next(r for r in records if r["record"] == "rho_c")["fields"]
    assert fields["rho_c"] == pytest.approx(math.exp(-0.5) * fields["geometric_bound"], rel=1e-8)
    rows = [r["fields"] for r in records if r["record"] == "finite_volume"]
    assert [row["L"] for row in rows] == [64.0]
    assert 0 < rows[0]["rho_c_L"]


def test_power_law_growth_overstatement_exits_with_configuration_code(tmp_path):
    args = ["rho-c", "--config", str(CONFIGS / "rho_c_power_law.json"), "--set", "a=5.0",
            "--out", str(tmp_path / "rho.jsonl")]
    assert main(args) == ConfigurationError.exit_code


def test_floating_point_errors_map_to_numerical_code(tmp_path, monkeypatch):
    def overflow(*args, **kwargs):
        raise OverflowError("math range error")

    monkeypatch.setattr(kernel_service, "critical_density_series", overflow)
    out = tmp_path / "rho.jsonl"
    assert main(["rho-c", "--set", UNIT_BETA, "--out", str(out)]) == NumericalFailure.exit_code
    manifest = json.loads((tmp_path / "rho.jsonl.manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "math range error" in manifest["error_message"]


SCAN = ["scan-density", "--set", UNIT_BETA, "--set", "N=27", "--set", "rho_grid=[0.5, 2.0]", "--set", "draws=20",
        "--set", "reference_draws=200"]


def test_scan_density_rows(tmp_path):
    out = tmp_path / "scan.jsonl"
    assert main(SCAN + ["--seed", "5", "--out", str(out)]) == 0
    rows = [r["fields"] for r in _records(out) if r["record"] == "scan_row"]
    assert [row["rho_over_rho_c"] for row in rows] == [0.5, 2.0]
    assert rows[0]["nu_theory"] == 0.0
    assert rows[1]["nu_theory"] == pytest.approx(0.5)
    assert all(0.0 <= row["nu_hat"] <= 1.0 for row in rows)
    assert rows[1]["nu_hat"] > rows[0]["nu_hat"]
    for row in rows:
        assert row["L"] == pytest.approx((27 / (row["rho_over_rho_c"] * ZETA_3_2)) ** (1 / 3))


@pytest.mark.parametrize("args", [
    ["hn", "--set", "N_max=12"],
    ["rho-c", "--set", UNIT_BETA, "--set", "L_grid=[4.0, 8.0]"],
    ["sample-spatial", "--set", UNIT_BETA, "--set", "N=6", "--set", "rho=1.0", "--set", "sweeps=30",
     "--set", "burn_in=5", "--set", "audit_interval=10"],
    ["verify-pd", "--set", "sampler=nonspatial", "--set", "N=200", "--set", "draws=50",
     "--set", "reference_draws=200"],
    ["giant-cycle", "--set", "sampler=nonspatial", "--set", "regime=logarithmic", "--set", "gamma=1.0",
     "--set", "N=200", "--set", "draws=50"],
    SCAN,
], ids=lambda args: args[0])
def test_each_command_is_deterministic(tmp_path, args):
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(args + ["--seed", "9", "--out", str(first)]) == 0
    assert main(args + ["--seed", "9", "--out", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()
    assert _records(first)[0]["command"] == args[0]


@pytest.mark.slow
def test_selftest_passes(tmp_path):
    out = tmp_path / "selftest.jsonl"
    assert main(["selftest", "--seed", "0", "--out", str(out)]) == 0
    checks = [r for r in _records(out) if r["record"] == "check"]
    assert checks and all(r["passed"] for r in checks)
