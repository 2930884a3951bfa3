from __future__ import annotations

import csv
import io
import subprocess
import sys

import pytest

from opma.cli import ConfigError, RunConfig, format_table, main, parse_args, read_config_file, run_convergence


def run(argv, tmp_path, name="out.txt"):
    out = tmp_path / name
    code = main(list(argv) + ["--out", str(out)])
    return code, out.read_text() if out.exists() else ""


def test_quadratic_study_is_exact(tmp_path):
    code, text = run(["--example", "quadratic", "--levels", "4", "--format", "csv"], tmp_path)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [float(r["h"]) for r in rows] == [1.0, 0.5, 0.25, 0.125]
    for r in rows:
        for col in ("Linf", "H1", "W21", "W22"):
            assert float(r[col]) <= 1e-8


def test_csv_reruns_are_byte_identical(tmp_path):
    argv = ["--example", "1", "--levels", "4", "--format", "csv"]
    _, a = run(argv, tmp_path, "a.csv")
    _, b = run(argv + ["--workers", "2"], tmp_path, "b.csv")
    assert a == b and a


def cells(line):
    return [c.strip() for c in line.split("|")[1:-1]]


def test_markdown_matches_csv(tmp_path):
    _, text_csv = run(["--levels", "4", "--format", "csv"], tmp_path, "a.csv")
    _, text_md = run(["--levels", "4"], tmp_path, "a.md")
    rows = list(csv.reader(io.StringIO(text_csv)))
    lines = text_md.splitlines()
    md = [cells(line) for line in lines[2:]]
    assert rows[0] == cells(lines[0])
    assert [r[0] for r in md] == ["1", "1/2", "1/4", "1/8"]
    for full, short in zip(rows[1:], md):
        for k in (1, 3, 5, 7):
            assert short[k] == f"{float(full[k]):.2e}"
        for k in (2, 4, 6, 8):
            assert short[k] == (f"{float(full[k]):.2f}" if full[k] else "")


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nexample = 2\nlevels = 3  # short\nh-list = 1/4,1/8\nformat = csv\n")
    command, rc = parse_args(["--config", str(cfg), "--levels", "5"])
    assert command == "convergence"
    assert rc.example == "2" and rc.levels == 5 and rc.format == "csv"
    assert rc.hs() == [0.25, 0.125]
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    with pytest.raises(ConfigError, match="unknown key"):
        read_config_file(str(bad))
    assert main(["--config", str(bad)]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["--levels", "0"],
        ["--example", "9"],
        ["--tol", "2"],
        ["--mesh", "random"],
        ["--h-list", "1/8,1/4"],
        ["--eps", "0,0.5"],
        ["--offset", "0.1"],
        ["--no-such-flag"],
    ],
)
def test_configuration_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "configuration error" in capsys.readouterr().err


def test_nonconvergence_exits_2_with_partial_table(tmp_path, capsys):
    code, text = run(["--levels", "3", "--max-iter", "1"], tmp_path)
    assert code == 2
    assert text.startswith("| h |")
    err = capsys.readouterr().err
    assert "did not converge" in err and "last residuals" in err


def test_dump_mesh(tmp_path):
    off = tmp_path / "mesh.off"
    code, _ = run(["--levels", "2", "--dump-mesh", str(off)], tmp_path)
    assert code == 0
    lines = off.read_text().split("\n")
    assert lines[0] == "OFF"
    nv, nf, _ = map(int, lines[1].split())
    # h = 1/2 on the square: 25 nodes, 32 triangles
    assert (nv, nf) == (25, 32)


def test_diagnostics_command(tmp_path):
    code, text = run(["diagnostics", "--h-list", "1/4,1/8", "--format", "csv"], tmp_path)
    assert code == 0
    head, decay = text.split("\n\n")
    rows = list(csv.DictReader(io.StringIO(head)))
    assert len(rows) == 8
    assert all(r["measure_ok"] == "yes" and r["containment_ok"] == "yes" for r in rows)
    assert all(r["second_diff_violations"] == "0" for r in rows)
    drows = list(csv.DictReader(io.StringIO(decay)))
    assert [float(r["h"]) for r in drows] == [0.25, 0.125]


def test_variants_run():
    for variant in ("ninepoint", "weighted"):
        for h1 in ("norm", "seminorm"):
            report, _ = run_convergence(RunConfig(levels=3, norm_variant=variant, h1=h1))
            assert len(report.rows) == 3
            assert all(r.w22 > 0 for r in report.rows)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "opma", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "convergence" in res.stdout


def test_format_table_empty_rates():
    report, _ = run_convergence(RunConfig(levels=2))
    text = format_table(report, "markdown")
    assert text.splitlines()[2].endswith("|  |")
