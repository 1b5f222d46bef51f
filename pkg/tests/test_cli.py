import json
from pathlib import Path
from types import SimpleNamespace

import pytest

from nublado_lyapunov.cli import COEFFS_FILE, EXIT_FAIL, EXIT_PASS, EXIT_USAGE, COMMANDS, main, output_dir
from nublado_lyapunov.conf.app_settings import OUTPUT_DIR_ENV
from nublado_lyapunov.reports import read_csv

from .support.configs import (
    QUADRATIC_OSCILLATOR_2,
    ROTATOR_2,
    ROTATOR_2_COEFFS,
    TWO_WELL_OSCILLATOR,
    write_config,
)

TREND = "nublado_lyapunov.lyapunov_rotor.nonincreasing_trend"
QUICK_CALIBRATION = "\n[calibration]\nsamples = 60\nh_hi = 100.0\nmax_rounds = 0\n"


def run(tmp_path, command, text, *args):
    config = write_config(tmp_path, text)
    return main([command, "--config", str(config), "--out", str(tmp_path / "out"), *args])


class TestParser:
    def test_commands(self):
        assert set(COMMANDS) == {
            "validate",
            "simulate",
            "simulate-sde",
            "calibrate",
            "verify-lyapunov",
            "matrosov-build",
            "matrosov-certify",
            "equilibria",
            "order-stats",
            "decay-scan",
            "generator-check",
        }

    def test_unknown_command(self, tmp_path):
        assert run(tmp_path, "calibrate-all", ROTATOR_2) == EXIT_USAGE

    def test_config_required(self):
        assert main(["validate"]) == EXIT_USAGE

    def test_version(self, capsys):
        assert main(["--version"]) == EXIT_PASS
        assert "nublado-lyapunov" in capsys.readouterr().out


class TestPrepare:
    def test_missing_config(self, tmp_path):
        assert main(["validate", "--config", str(tmp_path / "absent.toml"), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_config(self, tmp_path):
        assert run(tmp_path, "validate", ROTATOR_2.replace("N = 2", "N = 5")) == EXIT_USAGE

    def test_unknown_setting(self, tmp_path):
        assert run(tmp_path, "validate", ROTATOR_2 + "\n[nublado_lyapunov]\nKAPA = 1.0\n") == EXIT_USAGE

    @pytest.mark.parametrize("flags", [["--seed", "-1"], ["--seed", str(2**64)], ["--wall-clock", "0"], ["--threads", "0"]])
    def test_bad_flags(self, tmp_path, flags):
        assert run(tmp_path, "validate", ROTATOR_2, *flags) == EXIT_USAGE

    def test_environment_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
        config = write_config(tmp_path, ROTATOR_2)
        assert main(["validate", "--config", str(config)]) == EXIT_PASS
        assert (tmp_path / "env" / "validate.csv").exists()

    def test_output_dir_precedence(self, tmp_path, monkeypatch):
        monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
        config = SimpleNamespace(output_dir="from-file")
        assert output_dir(SimpleNamespace(out=tmp_path), config) == tmp_path
        assert output_dir(SimpleNamespace(out=None), config) == Path("from-file")
        assert output_dir(SimpleNamespace(out=None), SimpleNamespace(output_dir=None)) == Path("reports")
        monkeypatch.setenv(OUTPUT_DIR_ENV, "from-env")
        assert output_dir(SimpleNamespace(out=None), config) == Path("from-env")


class TestValidate:
    def test_rotator(self, tmp_path):
        assert run(tmp_path, "validate", ROTATOR_2) == EXIT_PASS
        comment, header, rows = read_csv(tmp_path / "out" / "validate.csv")
        assert comment.startswith("# validate config=")
        assert len(rows) == 1
        assert (tmp_path / "out" / "validate.txt").read_text().startswith("validate: PASS")

    def test_degenerate_rotator_fails(self, tmp_path):
        text = ROTATOR_2.replace("c0 = 2.0\ncos = [1.0]", "cos = [1.0, 0.25]")
        assert run(tmp_path, "validate", text) == EXIT_FAIL

    def test_oscillator(self, tmp_path):
        assert run(tmp_path, "validate", TWO_WELL_OSCILLATOR) == EXIT_PASS

    def test_seed_changes_digest(self, tmp_path):
        run(tmp_path, "validate", ROTATOR_2)
        first, _, _ = read_csv(tmp_path / "out" / "validate.csv")
        run(tmp_path, "validate", ROTATOR_2, "--seed", "43")
        second, _, _ = read_csv(tmp_path / "out" / "validate.csv")
        assert first.split()[2] != second.split()[2]


class TestCalibrate:
    def test_failure_writes_report(self, tmp_path, mocker):
        mocker.patch(TREND, return_value=(False, None))
        assert run(tmp_path, "calibrate", ROTATOR_2 + QUICK_CALIBRATION) == EXIT_FAIL
        _, header, rows = read_csv(tmp_path / "out" / "calibrate.csv")
        assert header[0] == "round"
        assert len(rows) == 2
        assert not (tmp_path / "out" / COEFFS_FILE).exists()

    def test_success_saves_coefficients(self, tmp_path, mocker):
        mocker.patch(TREND, return_value=(True, None))
        assert run(tmp_path, "calibrate", ROTATOR_2 + QUICK_CALIBRATION) == EXIT_PASS
        saved = json.loads((tmp_path / "out" / COEFFS_FILE).read_text())
        assert saved["N"] == 2
        assert len(saved["a"]) == 3

    def test_oscillator_rejected(self, tmp_path):
        assert run(tmp_path, "calibrate", QUADRATIC_OSCILLATOR_2) == EXIT_USAGE

    def test_bad_split(self, tmp_path):
        assert run(tmp_path, "calibrate", ROTATOR_2 + '\n[calibration]\nsplit = "even"\n') == EXIT_USAGE


class TestVerify:
    def test_needs_coefficients(self, tmp_path):
        assert run(tmp_path, "verify-lyapunov", ROTATOR_2) == EXIT_USAGE

    def test_needs_C1(self, tmp_path):
        text = ROTATOR_2 + "\n[coeffs]\na = [512000.0, 800.0, 10.0]\n"
        assert run(tmp_path, "verify-lyapunov", text) == EXIT_USAGE

    def test_wrong_coefficient_count(self, tmp_path):
        text = ROTATOR_2 + "\n[coeffs]\na = [1.0, 1.0, 1.0, 1.0, 1.0]\nC1 = 1.0\n"
        assert run(tmp_path, "verify-lyapunov", text) == EXIT_USAGE

    def test_writes_report(self, tmp_path):
        text = ROTATOR_2_COEFFS + "\n[verification]\nsamples = 200\nh_hi = 1000.0\n"
        assert run(tmp_path, "verify-lyapunov", text) in (EXIT_PASS, EXIT_FAIL)
        _, header, rows = read_csv(tmp_path / "out" / "verify-lyapunov.csv")
        assert header == ("check", "value", "bound", "passed")
        assert any(row[0] == "dual-path discrepancy" and row[3] == "true" for row in rows)


class TestSimulate:
    def test_oscillator_from_state(self, tmp_path):
        text = QUADRATIC_OSCILLATOR_2 + "\n[state]\np = [1.0, 0.0]\nq = [0.5, 0.0]\n\n[simulate]\nt_end = 1.0\nsamples = 11\n"
        assert run(tmp_path, "simulate", text) == EXIT_PASS
        _, header, rows = read_csv(tmp_path / "out" / "simulate.csv")
        assert header == ("t", "H", "W", "ledger")
        assert len(rows) == 11

    def test_rotator_records_W(self, tmp_path):
        text = ROTATOR_2_COEFFS + "\n[simulate]\nt_end = 0.5\nsamples = 6\nH0 = 20.0\n"
        assert run(tmp_path, "simulate", text) == EXIT_PASS
        _, _, rows = read_csv(tmp_path / "out" / "simulate.csv")
        assert all(row[2] != "" for row in rows)

    def test_sde(self, tmp_path):
        text = ROTATOR_2.replace("N = 2", "N = 2\ntemperatures = [1.0, 0.0]") + "\n[sde]\nt_end = 0.1\ndt = 0.001\n"
        assert run(tmp_path, "simulate-sde", text) == EXIT_PASS
        assert (tmp_path / "out" / "simulate-sde.txt").read_text().startswith("simulate-sde")


class TestOscillatorCommands:
    def test_equilibria(self, tmp_path):
        assert run(tmp_path, "equilibria", TWO_WELL_OSCILLATOR + "\n[equilibria]\nbudget = 64\n") == EXIT_PASS
        _, header, rows = read_csv(tmp_path / "out" / "equilibria.csv")
        assert header == ("root", "q_1", "q_2", "residual")
        assert len(rows) == 3

    def test_brute_force(self, tmp_path):
        text = TWO_WELL_OSCILLATOR + "\n[equilibria]\nbrute_force = true\npoints = 101\n"
        assert run(tmp_path, "equilibria", text) == EXIT_PASS

    def test_order_stats_needs_certified_chain(self, tmp_path):
        text = QUADRATIC_OSCILLATOR_2.replace("[[chain.interaction]]\npoly = [0.0, 0.0, 0.5]", "[[chain.interaction]]\npoly = [0.0, 0.0, -0.5]")
        assert run(tmp_path, "order-stats", text) == EXIT_USAGE

    def test_certify_needs_tables(self, tmp_path):
        assert run(tmp_path, "matrosov-certify", QUADRATIC_OSCILLATOR_2) == EXIT_USAGE

    def test_bad_envelope_grid(self, tmp_path):
        text = QUADRATIC_OSCILLATOR_2 + "\n[envelopes]\nQ = 1.0\neps = 0.5\nw_max = 1.2\n"
        assert run(tmp_path, "matrosov-build", text) == EXIT_USAGE


class TestDecayScan:
    def test_empty_windows_pass(self, tmp_path):
        text = ROTATOR_2_COEFFS + "\n[decay]\nH0 = [10.0, 20.0]\n"
        assert run(tmp_path, "decay-scan", text) == EXIT_PASS
        _, _, rows = read_csv(tmp_path / "out" / "decay-scan.csv")
        assert [row[2] for row in rows] == ["WindowEmpty"] * 4

    def test_unknown_family(self, tmp_path):
        text = ROTATOR_2_COEFFS + '\n[decay]\nfamilies = ["slow"]\n'
        assert run(tmp_path, "decay-scan", text) == EXIT_USAGE

    def test_needs_coefficients(self, tmp_path):
        assert run(tmp_path, "decay-scan", ROTATOR_2) == EXIT_USAGE


class TestGeneratorCheck:
    def test_bad_observable(self, tmp_path):
        assert run(tmp_path, "generator-check", ROTATOR_2 + '\n[generator]\nobservable = "E"\n') == EXIT_USAGE

    def test_energy(self, tmp_path):
        text = (
            ROTATOR_2.replace("N = 2", "N = 2\ntemperatures = [1.0, 0.0]")
            + "\n[state]\np = [1.0, 0.5]\nq = [0.3, 0.1]\n\n[generator]\nensemble = 2000\n"
        )
        assert run(tmp_path, "generator-check", text, "--seed", "5") == EXIT_PASS
        _, header, rows = read_csv(tmp_path / "out" / "generator-check.csv")
        assert header == ("dt", "estimate", "analytic", "bias", "stderr")
        assert len(rows) == 3
