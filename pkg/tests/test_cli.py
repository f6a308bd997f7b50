import csv
import json
import math

import pytest

from cotrace.cli import (CSV_COLUMNS, EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, ConfigError, load_config,
                         main, parse_list)

BASE = """\
[system]
name = harmonic
driver = momentum
hbar = 0.1

[sweep]
E = 0.5
Eprime = 0.5
tau = linspace(0.9, 1.1, 3)
epsilon = 0.1

[numerics]
pathways = all
grid_points = 256
grid_box = -7, 7
n_levels = 60
j_max = 0

[output]
directory = {out}
prefix = demo
figures = yes
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_list():
    assert parse_list("1, 2 3") == [1.0, 2.0, 3.0]
    assert parse_list("linspace(0, 1, 3)") == [0.0, 0.5, 1.0]


def test_unknown_key_reports_line(tmp_path):
    text = BASE.format(out=tmp_path).replace("epsilon = 0.1", "epsilon = 0.1\nepsilom = 0.2")
    with pytest.raises(ConfigError, match=r"run\.ini:11: unknown key 'epsilom'"):
        load_config(write(tmp_path, text))


def test_unknown_section_reports_line(tmp_path):
    text = BASE.format(out=tmp_path) + "\n[extras]\nx = 1\n"
    with pytest.raises(ConfigError, match=r"unknown section \[extras\]"):
        load_config(write(tmp_path, text))


def test_system_coefficients_accepted(tmp_path):
    text = BASE.format(out=tmp_path).replace("hbar = 0.1", "hbar = 0.1\nomega = 2.0")
    cfg = load_config(write(tmp_path, text))
    assert cfg.spec.hamiltonian.value([[1.0, 0.0]])[0] == pytest.approx(2.0)


@pytest.mark.parametrize("old,new,msg", [
    ("hbar = 0.1\n", "", "hbar is required"),
    ("epsilon = 0.1", "epsilon = 0.1, 0.2", "epsilon is global"),
    ("epsilon = 0.1", "epsilon = -0.1", "epsilon must be positive"),
    ("name = harmonic", "name = pendulum", "system name"),
    ("pathways = all", "pathways = eigen, magic", "unknown pathway"),
])
def test_bad_configs(tmp_path, old, new, msg):
    with pytest.raises(ConfigError, match=msg):
        load_config(write(tmp_path, BASE.format(out=tmp_path).replace(old, new)))


def test_bad_config_exit_code(tmp_path, capsys):
    p = write(tmp_path, BASE.format(out=tmp_path).replace("hbar = 0.1\n", ""))
    assert main(["simulate", "--config", str(p)]) == EXIT_CONFIG
    assert "hbar is required" in capsys.readouterr().err


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    p = write(d, BASE.format(out=d / "out"))
    assert main(["simulate", "--config", str(p)]) == EXIT_OK
    return d, p


def test_simulate_outputs(simulated):
    d, _ = simulated
    rows = list(csv.DictReader(open(d / "out" / "demo.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS
    kinds = {r["pathway"] for r in rows}
    assert kinds == {"eigen_sum", "double_ft", "semiclassical", "classical_background"}
    assert len(rows) == 3 * 4
    by = {}
    for r in rows:
        by.setdefault(r["tau"], {})[r["pathway"]] = float(r["value"])
    for v in by.values():
        assert v["double_ft"] == pytest.approx(v["eigen_sum"], rel=1e-6)
    lines = (d / "out" / "demo.jsonl").read_text().splitlines()
    head = json.loads(lines[0])
    assert head["format"] == "cotrace-results" and head["version"] == 1
    sc = [json.loads(x) for x in lines[1:] if json.loads(x)["pathway"] == "semiclassical"]
    assert sc and all("terms" in r for r in sc)
    ev = [json.loads(x) for x in lines[1:] if json.loads(x)["pathway"] == "eigen_sum"]
    assert all(r["warnings"] == [] for r in ev)
    assert (d / "out" / "demo-slice0.png").exists()


def test_simulate_is_reproducible(simulated, tmp_path):
    d, p = simulated
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == EXIT_OK
    for name in ("demo.csv", "demo.jsonl", "demo-slice0.png"):
        assert (tmp_path / name).read_bytes() == (d / "out" / name).read_bytes()


def test_unconverged_levels_fail_points(tmp_path):
    text = BASE.format(out=tmp_path).replace("grid_points = 256", "grid_points = 96") \
        .replace("pathways = all", "pathways = eigen")
    p = write(tmp_path, text)
    assert main(["simulate", "--config", str(p)]) == EXIT_PARTIAL
    recs = [json.loads(x) for x in (tmp_path / "demo.jsonl").read_text().splitlines()[1:]]
    assert all(r["value"] is None and "CoverageError" in r["errors"][0] for r in recs)


def test_compare_writes_figures(simulated, tmp_path):
    d, _ = simulated
    rc = main(["compare", str(d / "out" / "demo.csv"), "--out", str(tmp_path), "--prefix", "cmp"])
    assert rc == EXIT_OK
    summary = json.loads((tmp_path / "cmp.json").read_text())
    assert summary["n_points"] == 3 and summary["n_excluded"] == 0
    assert (tmp_path / "cmp.csv").exists() and (tmp_path / "cmp-slice0.png").exists()


def test_compare_excludes_failed_points(simulated, tmp_path):
    d, _ = simulated
    text = (d / "out" / "demo.csv").read_text().splitlines()
    k = next(i for i, line in enumerate(text) if ",semiclassical," in line)
    parts = text[k].split(",")
    parts[6] = "nan"
    text[k] = ",".join(parts)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(text) + "\n")
    assert main(["compare", str(bad), "--out", str(tmp_path)]) == EXIT_PARTIAL
    summary = json.loads((tmp_path / "compare.json").read_text())
    assert summary["n_excluded"] == 1 and summary["n_points"] == 2


def test_compare_grid_mismatch(simulated, tmp_path):
    d, _ = simulated
    lines = (d / "out" / "demo.csv").read_text().splitlines()
    other = tmp_path / "other.csv"
    other.write_text("\n".join(lines[:5]) + "\n")
    assert main(["compare", str(d / "out" / "demo.csv"), str(other), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_orbits_command(tmp_path):
    text = BASE.format(out=tmp_path).replace("tau = linspace(0.9, 1.1, 3)", "tau = 1.0, 3.0")
    p = write(tmp_path, text)
    assert main(["orbits", "--config", str(p)]) == EXIT_OK
    recs = [json.loads(x) for x in (tmp_path / "demo-orbits.jsonl").read_text().splitlines()]
    points = [r for r in recs if r.get("kind") == "point"]
    assert [r["n_orbits"] for r in points] == [8, 0]
    assert points[1]["note"] == "no classical transition"
    orbs = [r for r in recs if r.get("kind") == "orbit"]
    assert len(orbs) == 8 and all(math.isfinite(o["S_energy"]) for o in orbs)


def test_orbits_two_dof(tmp_path):
    text = BASE.format(out=tmp_path).replace("name = harmonic", "name = harmonic_product") \
        .replace("tau = linspace(0.9, 1.1, 3)", "tau = 1.0").replace("j_max = 0", "seeds = 0.01, -0.02")
    p = write(tmp_path, text)
    assert main(["orbits", "--config", str(p), "--seed-section", "q1=0,+"]) == EXIT_OK
    recs = [json.loads(x) for x in (tmp_path / "demo-orbits.jsonl").read_text().splitlines()]
    fp = [r for r in recs if r.get("kind") == "fixed_point"]
    assert len(fp) == 1 and fp[0]["residual"] < 1e-6
    assert fp[0]["t"] == pytest.approx(4 * math.pi / 3, abs=1e-6)
