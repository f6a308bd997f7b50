"""Command line: ``simulate``, ``orbits`` and ``compare``.

Configuration is an INI-style file with sections ``[system]``, ``[sweep]``,
``[numerics]`` and ``[output]``; unknown sections or keys are rejected with
their line numbers.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import inspect
import io
import json
import logging
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import DRIVERS, SYSTEMS, SystemSpec, make_system, query, validate_system
from .orbits import SectionPlane, compound_orbits, product_section_fixed_point
from .quantum import (CoverageError, Grid, TransitionFactory, double_ft_density, drive_operator,
                      eigen_density, eigensolve)
from .report import compare_slice, render_series, render_slice
from .semiclassics import PREFACTORS, classical_background, sc_density

log = logging.getLogger("cotrace")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
CSV_COLUMNS = ("E", "Eprime", "tau", "epsilon", "hbar", "pathway", "value", "n_orbits", "n_warnings")
RECORD_VERSION = 1
PATHWAYS = ("eigen_sum", "double_ft", "semiclassical")
AXES = ("E", "Eprime", "tau")
PATHWAY_ALIASES = {"eigen": "eigen_sum", "eigen_sum": "eigen_sum", "double_ft": "double_ft",
                   "dft": "double_ft", "sc": "semiclassical", "semiclassical": "semiclassical"}


class ConfigError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

SCHEMA = {
    "system": {"name", "driver", "driver_coefficient", "driver_axis", "hbar"},
    "sweep": {"E", "Eprime", "tau", "epsilon"},
    "numerics": {"pathways", "grid_points", "grid_box", "n_levels", "j_max", "damping_cutoff",
                 "T_max", "n_steps", "background_spacing", "prefactor", "seed_section", "seeds",
                 "spectrum_cache"},
    "output": {"directory", "prefix", "figures"},
}


@dataclass
class SweepGrid:
    E: list[float]
    E_prime: list[float]
    tau: list[float]
    epsilon: float
    hbar: float
    pathways: tuple[str, ...] = PATHWAYS
    j_max: int | None = None
    damping_cutoff: float = 1e-6
    T_max: float | None = None
    n_steps: int | None = None

    def __post_init__(self):
        if not (self.E and self.E_prime and self.tau):
            raise ConfigError("sweep lists must be nonempty")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not self.hbar > 0:
            raise ConfigError("hbar must be positive")

    def points(self):
        for E in self.E:
            for Ep in self.E_prime:
                for tau in self.tau:
                    yield E, Ep, tau


@dataclass
class RunConfig:
    spec: SystemSpec
    sweep: SweepGrid
    grid: Grid = Grid()
    n_levels: int | None = None
    background_spacing: float | None = None
    prefactor: str = "trace"
    seed_section: SectionPlane = SectionPlane()
    seeds: list = field(default_factory=list)
    spectrum_cache: str | None = None
    directory: str = "out"
    prefix: str = "run"
    figures: bool = True


def _key_lines(text: str) -> dict:
    """Map ``(section, key)`` to the 1-based line where it is defined."""
    where, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = n
        elif s and not s.startswith(("#", ";")) and section is not None:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            where.setdefault((section, k), n)
    return where


def parse_list(text: str) -> list[float]:
    """``a, b, c`` or ``linspace(start, stop, n)``."""
    s = text.strip()
    m = re.fullmatch(r"linspace\(\s*([^,]+),\s*([^,]+),\s*(\d+)\s*\)", s)
    if m:
        return [float(v) for v in np.linspace(float(m.group(1)), float(m.group(2)), int(m.group(3)))]
    return [float(v) for v in s.replace(",", " ").split()]


def _plane(text: str) -> SectionPlane:
    # "q1=0,+" style: axis (1-based), value, crossing direction
    m = re.fullmatch(r"\s*q(\d+)\s*=\s*([-+0-9.eE]+)\s*(?:,\s*([+-]))?\s*", text)
    if not m:
        raise ConfigError(f"bad section plane {text!r}; expected e.g. 'q1=0,+'")
    return SectionPlane(int(m.group(1)) - 1, float(m.group(2)), -1 if m.group(3) == "-" else 1)


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    text = Path(path).read_text()
    lines = _key_lines(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{path}:{lines.get((sec, None), '?')}: unknown section [{sec}]")
    sysname = cp.get("system", "name", fallback=None)
    if sysname not in SYSTEMS:
        raise ConfigError(f"{path}:{lines.get(('system', 'name'), lines.get(('system', None), '?'))}: "
                          f"system name must be one of {sorted(SYSTEMS)}")
    coef_names = set(inspect.signature(SYSTEMS[sysname][0]).parameters)
    for sec in cp.sections():
        allowed = SCHEMA[sec] | (coef_names if sec == "system" else set())
        for key in cp[sec]:
            if key not in allowed:
                raise ConfigError(f"{path}:{lines.get((sec, key), '?')}: unknown key {key!r} in [{sec}]")

    def get(sec, key, conv, default=None):
        if not cp.has_option(sec, key) or cp.get(sec, key).strip() in ("", "auto"):
            return default
        try:
            return conv(cp.get(sec, key))
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}:{lines.get((sec, key), '?')}: bad value for {key}: {exc}") from None

    driver = get("system", "driver", str, "momentum").strip()
    if driver not in DRIVERS:
        raise ConfigError(f"{path}:{lines.get(('system', 'driver'), '?')}: driver must be one of {DRIVERS}")
    hbar = get("system", "hbar", float)
    if hbar is None:
        raise ConfigError(f"{path}: [system] hbar is required")
    coeffs = {k: get("system", k, float) for k in coef_names if cp.has_option("system", k)}
    spec = make_system(sysname, hbar, driver, get("system", "driver_coefficient", float, 1.0),
                       get("system", "driver_axis", int, 0), **coeffs)
    rep = validate_system(spec)
    if not rep.ok:
        raise ConfigError(f"{path}: system validation failed: {'; '.join(rep.failures)}")

    def pathways(text):
        names = [p.strip() for p in text.split(",") if p.strip()]
        if names == ["all"]:
            return PATHWAYS
        try:
            return tuple(dict.fromkeys(PATHWAY_ALIASES[n] for n in names))
        except KeyError as exc:
            raise ConfigError(f"unknown pathway {exc.args[0]!r}") from None

    overrides = overrides or {}
    for key in ("E", "Eprime", "tau", "epsilon"):
        if not cp.has_option("sweep", key):
            raise ConfigError(f"{path}: [sweep] {key} is required")
    eps_list = get("sweep", "epsilon", parse_list)
    if len(eps_list) != 1:
        raise ConfigError(f"{path}:{lines.get(('sweep', 'epsilon'))}: epsilon is global per run")
    sweep = SweepGrid(
        get("sweep", "E", parse_list), get("sweep", "Eprime", parse_list), get("sweep", "tau", parse_list),
        eps_list[0], hbar,
        pathways=overrides.get("pathways") or get("numerics", "pathways", pathways, PATHWAYS),
        j_max=overrides.get("j_max", get("numerics", "j_max", int)),
        damping_cutoff=get("numerics", "damping_cutoff", float, 1e-6),
        T_max=get("numerics", "T_max", float), n_steps=get("numerics", "n_steps", int),
    )
    box = get("numerics", "grid_box", parse_list, [-10.0, 10.0])
    prefactor = get("numerics", "prefactor", str, "trace").strip()
    if prefactor not in PREFACTORS:
        raise ConfigError(f"{path}:{lines.get(('numerics', 'prefactor'))}: prefactor must be one of {PREFACTORS}")
    seeds = get("numerics", "seeds", lambda s: [parse_list(chunk) for chunk in s.split(";")], [])
    plane = overrides.get("seed_section") or get("numerics", "seed_section", _plane, SectionPlane())
    return RunConfig(
        spec=spec, sweep=sweep,
        grid=Grid(get("numerics", "grid_points", int, 512), (float(box[0]), float(box[1]))),
        n_levels=get("numerics", "n_levels", int), background_spacing=get("numerics", "background_spacing", float),
        prefactor=prefactor, seed_section=plane, seeds=seeds,
        spectrum_cache=get("numerics", "spectrum_cache", str),
        directory=overrides.get("out") or get("output", "directory", str, "out"),
        prefix=get("output", "prefix", str, "run").strip(),
        figures=get("output", "figures", lambda s: s.strip().lower() in ("1", "yes", "true", "on"), True),
    )


# ---------------------------------------------------------------------------
# per-point work (pure; runs in worker processes)

def _classical_point(args):
    spec, E, Ep, tau, eps, j_max, cutoff, spacing, prefactor = args
    q = query(E, Ep, tau, eps)
    out = {"orbits": [], "error": None, "background": math.nan, "sc": None}
    try:
        orbs = compound_orbits(q, spec, j_max=j_max, damping_cutoff=cutoff)
        out["orbits"] = [o.to_record() for o in orbs]
        bg = classical_background(q, spec, spacing=spacing)
        r = sc_density(q, orbs, spec, background=bg, prefactor_kind=prefactor)
        out["background"] = bg
        out["sc"] = {"value": r.value, "n_orbits": r.extra["n_orbits"], "diagnostics": r.diagnostics,
                     "terms": [t.to_record() for t in r.terms]}
    except Exception as exc:  # recorded per point; the sweep continues
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def _orbit_point(args):
    spec, E, Ep, tau, eps, j_max, cutoff = args
    try:
        orbs = compound_orbits(query(E, Ep, tau, eps), spec, j_max=j_max, damping_cutoff=cutoff)
        return {"orbits": [o.to_record() | {"warnings": o.warnings} for o in orbs], "error": None}
    except Exception as exc:
        return {"orbits": [], "error": f"{type(exc).__name__}: {exc}"}


def _map(fn, items, jobs):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return repr(float(v))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _dump(rec) -> str:
    return json.dumps(rec, sort_keys=True, default=_json_default, allow_nan=True)


# ---------------------------------------------------------------------------
# verbs

def run_simulate(cfg: RunConfig, jobs: int = 1) -> tuple[Path, Path, int]:
    """Evaluate the selected pathways on the sweep; returns (csv, jsonl, n_failed)."""
    sw = cfg.sweep
    spec = cfg.spec
    points = list(sw.points())
    outdir = Path(cfg.directory)
    outdir.mkdir(parents=True, exist_ok=True)
    results = {p: [None] * len(points) for p in PATHWAYS}
    errors: dict[int, list[str]] = {i: [] for i in range(len(points))}
    diagnostics = {(i, p): [] for i in range(len(points)) for p in PATHWAYS}
    n_orbits = [0] * len(points)
    background = [math.nan] * len(points)
    terms: dict[int, list] = {}

    if spec.dof != 1 and "semiclassical" in sw.pathways:
        raise ConfigError("the semiclassical pathway requires one degree of freedom")
    if {"eigen_sum", "double_ft"} & set(sw.pathways):
        spectrum = eigensolve(spec, cfg.grid, cfg.n_levels, cache_dir=cfg.spectrum_cache)
        factory = TransitionFactory(spectrum, drive_operator(spec, cfg.grid))
        cache = {}
        for i, (E, Ep, tau) in enumerate(points):
            q = query(E, Ep, tau, sw.epsilon)
            if tau not in cache:
                cache[tau] = factory(tau)
            T = cache[tau]
            for name in ("eigen_sum", "double_ft"):
                if name not in sw.pathways:
                    continue
                try:
                    if name == "eigen_sum":
                        r = eigen_density(q, spectrum, T)
                    else:
                        r = double_ft_density(q, spectrum, T, T_max=sw.T_max, n_steps=sw.n_steps)
                    results[name][i] = r.value
                    diagnostics[i, name].extend(r.diagnostics)
                except CoverageError as exc:
                    errors[i].append(f"{name}: CoverageError: {exc}")
    if "semiclassical" in sw.pathways:
        args = [(spec, E, Ep, tau, sw.epsilon, sw.j_max, sw.damping_cutoff, cfg.background_spacing,
                 cfg.prefactor) for E, Ep, tau in points]
        for i, r in enumerate(_map(_classical_point, args, jobs)):
            if r["error"]:
                errors[i].append(f"semiclassical: {r['error']}")
                continue
            results["semiclassical"][i] = r["sc"]["value"]
            background[i] = r["background"]
            n_orbits[i] = r["sc"]["n_orbits"]
            diagnostics[i, "semiclassical"].extend(r["sc"]["diagnostics"])
            terms[i] = r["sc"]["terms"]

    csv_path = outdir / f"{cfg.prefix}.csv"
    rec_path = outdir / f"{cfg.prefix}.jsonl"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    records = [{"format": "cotrace-results", "version": RECORD_VERSION, "package_version": __version__,
                "system": spec.name, "hbar": spec.hbar, "epsilon": sw.epsilon,
                "pathways": list(sw.pathways), "prefactor": cfg.prefactor, "n_points": len(points)}]
    failed = 0
    for i, (E, Ep, tau) in enumerate(points):
        if errors[i]:
            failed += 1
        for name in sw.pathways:
            val = results[name][i]
            no = n_orbits[i] if name == "semiclassical" else 0
            notes = diagnostics[i, name]
            errs = [e for e in errors[i] if e.startswith(name)]
            w.writerow([_fmt(E), _fmt(Ep), _fmt(tau), _fmt(sw.epsilon), _fmt(spec.hbar), name,
                        _fmt(val), no, len(notes) + len(errs)])
            rec = {"E": E, "Eprime": Ep, "tau": tau, "epsilon": sw.epsilon, "hbar": spec.hbar,
                   "pathway": name, "value": val, "n_orbits": no, "warnings": notes, "errors": errs}
            if name == "semiclassical" and i in terms:
                rec["terms"] = terms[i]
            records.append(rec)
        if "semiclassical" in sw.pathways:
            bgv = background[i]
            w.writerow([_fmt(E), _fmt(Ep), _fmt(tau), _fmt(sw.epsilon), _fmt(spec.hbar),
                        "classical_background", _fmt(None if math.isnan(bgv) else bgv), 0, 0])
            records.append({"E": E, "Eprime": Ep, "tau": tau, "epsilon": sw.epsilon, "hbar": spec.hbar,
                            "pathway": "classical_background",
                            "value": None if math.isnan(bgv) else bgv, "n_orbits": 0})
    csv_path.write_text(buf.getvalue())
    rec_path.write_text("".join(_dump(r) + "\n" for r in records))
    if cfg.figures:
        series = {name: results[name] for name in sw.pathways}
        if "semiclassical" in sw.pathways:
            series["classical_background"] = background
        _render_sweep(points, series, outdir, cfg.prefix)
    return csv_path, rec_path, failed


def _slices(keys):
    """Group ``(E, Eprime, tau)`` keys into 1-D slices along the last varying axis."""
    coords = np.array(keys, dtype=float).reshape(-1, 3)
    varying = [i for i in range(3) if len(np.unique(coords[:, i])) > 1]
    axis = varying[-1] if varying else 2
    slices = {}
    for n, k in enumerate(keys):
        slices.setdefault(tuple(v for i, v in enumerate(k) if i != axis), []).append(n)
    fixed_names = [AXES[i] for i in range(3) if i != axis]
    return axis, [(dict(zip(fixed_names, f)), sorted(ix, key=lambda n: keys[n][axis]))
                  for f, ix in sorted(slices.items())]


def _render_sweep(points, series, outdir, prefix):
    axis, slices = _slices(points)
    for n, (fixed, ix) in enumerate(slices):
        if len(ix) < 2:
            continue
        x = [points[k][axis] for k in ix]
        ys = {name: [math.nan if v[k] is None else v[k] for k in ix] for name, v in series.items()}
        render_series(x, ys, outdir / f"{prefix}-slice{n}.png", AXES[axis], fixed)


def run_orbits(cfg: RunConfig, jobs: int = 1) -> tuple[Path, int]:
    """Write the compound-orbit catalogue of every sweep point."""
    sw = cfg.sweep
    spec = cfg.spec
    outdir = Path(cfg.directory)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"{cfg.prefix}-orbits.jsonl"
    points = list(sw.points())
    records = [{"format": "cotrace-orbits", "version": RECORD_VERSION, "package_version": __version__,
                "system": spec.name, "hbar": spec.hbar, "epsilon": sw.epsilon, "n_points": len(points)}]
    failed = 0
    if spec.dof == 1:
        args = [(spec, E, Ep, tau, sw.epsilon, sw.j_max, sw.damping_cutoff) for E, Ep, tau in points]
        res = _map(_orbit_point, args, jobs)
        for (E, Ep, tau), r in zip(points, res):
            n_near = sum(1 for o in r["orbits"] if o["near_caustic"])
            summary = {"kind": "point", "E": E, "Eprime": Ep, "tau": tau, "n_orbits": len(r["orbits"]),
                       "n_near_caustic": n_near, "error": r["error"]}
            if not r["orbits"] and not r["error"]:
                summary["note"] = "no classical transition"
            failed += bool(r["error"])
            records.append(summary)
            records.extend({"kind": "orbit"} | o for o in r["orbits"])
    else:
        if not cfg.seeds:
            raise ConfigError("orbit search for N >= 2 needs seeds in [numerics] seeds")
        for E, Ep, tau in points:
            q = query(E, Ep, tau, sw.epsilon)
            for k, seed in enumerate(cfg.seeds):
                rec = {"kind": "fixed_point", "E": E, "Eprime": Ep, "tau": tau, "seed": k}
                try:
                    fp = product_section_fixed_point(q, spec, np.asarray(seed), cfg.seed_section)
                    rec |= {"point": fp.point, "residual": fp.residual, "det_IminusM": fp.det_one_minus_m,
                            "t": fp.t, "tprime": fp.t_prime, "S_energy": fp.action,
                            "iterations": fp.iterations, "warnings": fp.warnings}
                except Exception as exc:
                    rec["error"] = f"{type(exc).__name__}: {exc}"
                    failed += 1
                records.append(rec)
    path.write_text("".join(_dump(r) + "\n" for r in records))
    return path, failed


def _read_csv(path) -> dict:
    rows = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
            raise GridMismatchError(f"{path}: unexpected columns {rd.fieldnames}")
        for r in rd:
            key = (float(r["E"]), float(r["Eprime"]), float(r["tau"]))
            rows.setdefault(r["pathway"], {})[key] = float(r["value"])
    return rows


def run_compare(file_a, file_b=None, reference: str = "eigen_sum", candidate: str = "semiclassical",
                outdir="out", prefix: str = "compare", figures: bool = True,
                detrend_width: float | None = None) -> tuple[Path, dict]:
    """Deviations and extremum matching between two series.

    With two files the same pathway (``reference``) is compared across them;
    with one file ``candidate`` is compared against ``reference`` within it.
    """
    A = _read_csv(file_a)
    if file_b is not None:
        B = _read_csv(file_b)
        ra, rb = A.get(reference), B.get(reference)
        labels = (f"{Path(file_a).name}:{reference}", f"{Path(file_b).name}:{reference}")
    else:
        ra, rb = A.get(reference), A.get(candidate)
        labels = (reference, candidate)
    if ra is None or rb is None:
        raise GridMismatchError(f"pathway missing: need {labels}")
    if set(ra) != set(rb):
        raise GridMismatchError("the two series are sampled on different (E, Eprime, tau) grids")
    keys = sorted(ra)
    ok = [k for k in keys if math.isfinite(ra[k]) and math.isfinite(rb[k])]
    excluded = len(keys) - len(ok)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    axis, slices = _slices(ok) if ok else (2, [])
    summary_slices = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("E", "Eprime", "tau", "reference", "candidate", "abs_dev", "rel_dev"))
    all_abs, all_rel = [], []
    for n, (fixed, ix) in enumerate(slices):
        ks = [ok[j] for j in ix]
        x = [k[axis] for k in ks]
        sc = compare_slice(AXES[axis], fixed, x, [ra[k] for k in ks], [rb[k] for k in ks], detrend_width)
        for k, a, d, r in zip(ks, sc.reference, sc.abs_dev, sc.rel_dev):
            w.writerow([_fmt(k[0]), _fmt(k[1]), _fmt(k[2]), _fmt(a), _fmt(rb[k]), _fmt(d), _fmt(r)])
        all_abs.extend(sc.abs_dev.tolist())
        all_rel.extend(x for x in sc.rel_dev.tolist() if math.isfinite(x))
        figure = None
        if figures and len(x) > 2:
            figure = f"{prefix}-slice{n}.png"
            render_slice(sc, outdir / figure, *labels)
        summary_slices.append({
            "axis": AXES[axis], "fixed": sc.fixed, "n_points": len(x), "figure": figure,
            "extrema": [{"kind": m.reference.kind, "x_reference": m.reference.x,
                         "x_candidate": m.candidate.x if m.candidate else None,
                         "period": m.period, "offset_periods": m.offset} for m in sc.matches],
        })
    summary = {
        "format": "cotrace-comparison", "version": RECORD_VERSION, "reference": labels[0],
        "candidate": labels[1], "n_points": len(ok), "n_excluded": excluded,
        "max_abs_dev": max(all_abs) if all_abs else None,
        "mean_abs_dev": float(np.mean(all_abs)) if all_abs else None,
        "max_rel_dev": max(all_rel) if all_rel else None,
        "slices": summary_slices,
    }
    (outdir / f"{prefix}.csv").write_text(buf.getvalue())
    path = outdir / f"{prefix}.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True, default=_json_default) + "\n")
    return path, summary


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cotrace", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cotrace {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="configuration file")
        sp.add_argument("--out", help="output directory (overrides [output] directory)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("--jmax", type=int, help="winding cutoff (default: from damping)")

    s = sub.add_parser("simulate", help="evaluate densities on the sweep grid")
    common(s)
    s.add_argument("--pathways", help="comma list of eigen, double_ft, sc, or all")
    o = sub.add_parser("orbits", help="write the compound-orbit catalogue")
    common(o)
    o.add_argument("--seed-section", help="section plane for N=2, e.g. 'q1=0,+'")
    c = sub.add_parser("compare", help="compare two result series")
    c.add_argument("files", nargs="+", help="one or two result CSV files")
    c.add_argument("--out", default="out")
    c.add_argument("--prefix", default="compare")
    c.add_argument("--reference", default="eigen_sum")
    c.add_argument("--candidate", default="semiclassical")
    c.add_argument("--detrend", type=float, help="running-mean width removed before locating extrema")
    c.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.verb == "compare":
            if len(args.files) > 2:
                raise ConfigError("compare takes one or two result files")
            ref = PATHWAY_ALIASES.get(args.reference, args.reference)
            cand = PATHWAY_ALIASES.get(args.candidate, args.candidate)
            path, summary = run_compare(args.files[0], args.files[1] if len(args.files) == 2 else None,
                                        ref, cand, args.out, args.prefix, not args.no_figures, args.detrend)
            print(f"wrote {path} ({summary['n_points']} points, {summary['n_excluded']} excluded)")
            return EXIT_PARTIAL if summary["n_excluded"] else EXIT_OK
        overrides = {"out": args.out}
        if args.jmax is not None:
            overrides["j_max"] = args.jmax
        if getattr(args, "pathways", None):
            names = [n.strip() for n in args.pathways.split(",")]
            try:
                overrides["pathways"] = PATHWAYS if names == ["all"] else \
                    tuple(dict.fromkeys(PATHWAY_ALIASES[n] for n in names))
            except KeyError as exc:
                raise ConfigError(f"unknown pathway {exc.args[0]!r}") from None
        if getattr(args, "seed_section", None):
            overrides["seed_section"] = _plane(args.seed_section)
        cfg = load_config(args.config, overrides)
        if args.verb == "simulate":
            csv_path, rec_path, failed = run_simulate(cfg, args.jobs)
            print(f"wrote {csv_path} and {rec_path}; {failed} point(s) with failures")
        else:
            path, failed = run_orbits(cfg, args.jobs)
            print(f"wrote {path}; {failed} point(s) with failures")
        return EXIT_PARTIAL if failed else EXIT_OK
    except (ConfigError, GridMismatchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
