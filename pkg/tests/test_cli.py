from __future__ import annotations

import csv
import io
import subprocess
import sys

import pytest

from miniquic.cli import main
from miniquic.scenarios import RESULT_COLUMNS
from miniquic.trace import read_csv


def csv_rows(text: str) -> list[list[str]]:
    return list(csv.reader(io.StringIO(text)))


class TestRun:
    def test_header_and_row(self, capsys):
        assert main(["run", "handshake_fresh", "--seed", "1"]) == 0
        rows = csv_rows(capsys.readouterr().out)
        assert tuple(rows[0]) == RESULT_COLUMNS
        assert rows[1][0] == "1"

    def test_trace_written(self, tmp_path, capsys):
        path = tmp_path / "t.csv"
        assert main(["run", "fec", "--trace", str(path)]) == 0
        text = path.read_text()
        assert text.startswith("# seed=0")
        assert any(r.kind == "fec_recovered" for r in read_csv(text))

    def test_same_flags_same_output(self, capsys):
        main(["run", "hol", "--seed", "4"])
        first = capsys.readouterr().out
        main(["run", "hol", "--seed", "4"])
        assert capsys.readouterr().out == first

    def test_failure_exit(self, tmp_path, capsys):
        # A budget too short for the transfer is an honest failure, not a usage error.
        cfg = tmp_path / "short.cfg"
        cfg.write_text("budget_us=1000\n")
        assert main(["run", "migration", "--config", str(cfg)]) == 1
        assert "FAIL:" in capsys.readouterr().err


class TestConfigFile:
    def test_file_values_used(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\nstreams = 3\nbytes=2048\n")
        assert main(["run", "handshake_fresh", "--config", str(cfg)]) == 0
        row = csv_rows(capsys.readouterr().out)[1]
        assert len(row[1].split(";")) == 3

    def test_flags_override_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("streams=3\n")
        assert main(["run", "handshake_fresh", "--config", str(cfg), "--streams", "2"]) == 0
        assert len(csv_rows(capsys.readouterr().out)[1][1].split(";")) == 2

    def test_scenario_options(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("fec_drops=2\n")
        assert main(["run", "fec", "--config", str(cfg)]) == 0
        row = csv_rows(capsys.readouterr().out)[1]
        assert int(row[2]) >= 2 and row[3] == "0"

    @pytest.mark.parametrize("text", ["colour=blue\n", "novalue\n", "loss=lots\n", "loss=1.5\n"])
    def test_bad_file(self, tmp_path, capsys, text):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(text)
        assert main(["run", "fec", "--config", str(cfg)]) == 2
        assert "error" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert main(["run", "fec", "--config", "/nonexistent/x.cfg"]) == 2


class TestUsage:
    @pytest.mark.parametrize(
        "argv",
        [[], ["run"], ["run", "warp"], ["run", "fec", "--seed", "x"], ["compare-rtt", "--rtt-us", "3"], ["bogus"]],
    )
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 2

    def test_help(self, capsys):
        assert main(["--help"]) == 0


class TestCompare:
    def test_table(self, capsys):
        assert main(["compare-rtt", "--rtt-us", "40000"]) == 0
        rows = dict(csv_rows(capsys.readouterr().out)[1:])
        assert rows == {"TCP": "2", "TCP+TLS1.3": "3", "TCP+TLS1.2": "4", "QUIC fresh": "1", "QUIC repeat": "0"}

    def test_module_entry_point(self):
        out = subprocess.run(
            [sys.executable, "-m", "miniquic", "compare-rtt"], capture_output=True, text=True, check=True
        )
        assert out.stdout.splitlines()[0] == "protocol,rtts_to_first_data"
