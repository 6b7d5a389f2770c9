"""Command-line experiment runner.

Usage::

    polytherm <simulate|compare|bounds|weaklab|check> --config FILE [--out DIR] [--seed N]

A config file is INI-style. Every value is a Python literal (numbers,
strings in quotes, tuples, lists, ``True``/``False``/``None``); bare words
are read as strings. Sections:

``[experiment]``
    ``kind`` (defaults to the command), ``seed``.
``[model]``
    Any :class:`~polytherm.constitutive.EnergyModel` field.
``[grid]``
    ``dims = (n1, n2, n3)``.
``[solver]``
    ``t_end``, ``cfl``, ``snapshots``, ``dt``, ``mu``, ``mu_form``, ``k``,
    ``k_form``, ``heat_supply``, ``wave_speed``, ``mu0``, ``k0``,
    ``write_snapshots``.
``[initial]`` / ``[perturbation]``
    ``displacement``, ``velocity``, ``theta_modes``: lists of
    ``(component, amplitude, (k1, k2, k3), "sin" | "cos")``; ``theta_mean``.
``[compare]``
    ``amplitudes``, ``mu_ladder``, ``growth_factor``, ``slack_tolerance``,
    ``constant_tolerance``.
``[bounds]``
    ``regions = [(M, delta), ...]``, ``samples``, ``lemmas``, ``R``,
    ``r_bound``, ``theta_support``, ``support_sweep``.
``[weaklab]``
    ``demos``: names from :data:`WEAKLAB_DEMOS`.

Exit codes: 0 success, 1 a checked invariant or criterion failed, 2 config
error, 3 numerical failure (CFL, temperature floor, coefficient or energy
bound), 4 loss of smoothness in a reference run, 5 degenerate sampling.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from polytherm import __version__
from polytherm import augmented as aug
from polytherm import constitutive as cm
from polytherm import relent, solver
from polytherm import weak_limits as wl
from polytherm.constitutive import EnergyModel
from polytherm.grid import Grid, catalog_by_name, read_snapshot, write_snapshot
from polytherm.minors import cofactor, demo_motion, determinant, piola_residual

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_SMOOTHNESS = 4
EXIT_SAMPLING = 5

COMMANDS = ("simulate", "compare", "bounds", "weaklab", "check")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip()


def load_config(path) -> dict[str, dict]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return {name: {k: _literal(v) for k, v in parser[name].items()} for name in parser.sections()}


def _take(section: dict, allowed, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"[{where}] has unknown keys: {', '.join(sorted(unknown))}")
    return dict(section)


def build_model(cfg: dict) -> EnergyModel:
    names = [f.name for f in fields(EnergyModel)]
    try:
        return EnergyModel(**_take(cfg.get("model", {}), names, "model"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from exc


def build_grid(cfg: dict) -> Grid:
    section = _take(cfg.get("grid", {}), ("dims",), "grid")
    try:
        return Grid(tuple(int(n) for n in section.get("dims", (16, 16, 16))))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[grid]: {exc}") from exc


def _modes(entries, where) -> tuple[solver.Mode, ...]:
    out = []
    for entry in entries or ():
        try:
            component, amplitude, wavevector, *kind = entry
            out.append(solver.Mode(int(component), float(amplitude), tuple(int(k) for k in wavevector),
                                   kind[0] if kind else "sin"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{where}] bad mode {entry!r}: {exc}") from exc
    return tuple(out)


def build_initial(cfg: dict, where: str = "initial") -> solver.InitialData:
    section = _take(cfg.get(where, {}), ("displacement", "velocity", "theta_mean", "theta_modes"), where)
    return solver.InitialData(
        displacement=_modes(section.get("displacement"), where),
        velocity=_modes(section.get("velocity"), where),
        theta_mean=float(section.get("theta_mean", 1.0 if where == "initial" else 0.0)),
        theta_modes=_modes(section.get("theta_modes"), where),
    )


SOLVER_KEYS = ("t_end", "cfl", "snapshots", "dt", "mu", "mu_form", "k", "k_form", "heat_supply",
               "wave_speed", "mu0", "k0", "write_snapshots", "energy_tolerance")


def build_solver(cfg: dict, model: EnergyModel, grid: Grid) -> tuple[solver.SolverConfig, bool]:
    s = _take(cfg.get("solver", {}), SOLVER_KEYS, "solver")
    try:
        config = solver.SolverConfig(
            model, grid, float(s.get("t_end", 1.0)),
            mu=solver.Coefficient(float(s.get("mu", 0.0)), s.get("mu_form", "constant")),
            k=solver.Coefficient(float(s.get("k", 0.0)), s.get("k_form", "constant")),
            heat_supply=float(s.get("heat_supply", 0.0)),
            cfl=float(s.get("cfl", 0.5)),
            snapshots=int(s.get("snapshots", 10)),
            dt=None if s.get("dt") is None else float(s["dt"]),
            wave_speed=None if s.get("wave_speed") is None else float(s["wave_speed"]),
            mu0=None if s.get("mu0") is None else float(s["mu0"]),
            k0=None if s.get("k0") is None else float(s["k0"]),
            energy_tolerance=float(s.get("energy_tolerance", 1e-8)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[solver]: {exc}") from exc
    return config, bool(s.get("write_snapshots", True))


# ---------------------------------------------------------------------------
# output


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    return str(value)


def write_csv(path: Path, rows, columns) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c, "")) for c in columns])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config_path, seed, exit_code: int, summary: dict,
                   started: float) -> None:
    # only files written by this run; reruns into an old directory leave stale files alone
    files = sorted(p for p in out.rglob("*")
                   if p.is_file() and p.name != "manifest.json" and p.stat().st_mtime >= started - 1.0)
    config_digest = _sha256(Path(config_path)) if config_path else None
    manifest = {
        "command": command,
        "code_version": __version__,
        "config": str(config_path) if config_path else None,
        "config_sha256": config_digest,
        "seed": seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "exit_code": exit_code,
        "summary": summary,
        "files": [{"path": str(p.relative_to(out)), "sha256": _sha256(p), "bytes": p.stat().st_size}
                  for p in files],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=format_value) + "\n")


def _json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=format_value) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out: Path, seed: int, log) -> tuple[int, dict]:
    model, grid = build_model(cfg), build_grid(cfg)
    scfg, snapshots = build_solver(cfg, model, grid)
    try:
        initial = build_initial(cfg)
        state = initial.build(grid, model)
    except ValueError as exc:
        raise ConfigError(f"[initial]: {exc}") from exc
    traj = solver.run(scfg, state)
    write_csv(out / "diagnostics.csv", traj.diagnostics.rows, solver.DIAGNOSTIC_COLUMNS)
    if snapshots:
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for i, s in enumerate(traj.snapshots):
            write_snapshot(snap_dir / f"state_{i:04d}.ptf", s.stacked(), grid, s.t)
    E = traj.diagnostics.column("energy")
    S = traj.diagnostics.column("entropy")
    summary = {"dt": traj.dt, "steps": int(round(scfg.t_end / traj.dt)), "energy_change": float(E[-1] - E[0]),
               "entropy_change": float(S[-1] - S[0]), "theta_min": float(traj.diagnostics.column("theta_min").min())}
    log(f"simulate: {len(traj.snapshots)} snapshots, dt = {traj.dt:.6g}, energy change {summary['energy_change']:.3e}")
    return EXIT_OK, summary


def build_compare(cfg: dict) -> relent.WeakStrongConfig:
    model, grid = build_model(cfg), build_grid(cfg)
    s = _take(cfg.get("solver", {}), ("t_end", "cfl", "snapshots", "heat_supply"), "solver")
    c = _take(cfg.get("compare", {}), ("amplitudes", "mu_ladder", "growth_factor", "slack_tolerance",
                                       "constant_tolerance"), "compare")
    try:
        return relent.WeakStrongConfig(
            model, grid, float(s.get("t_end", 0.5)), build_initial(cfg), build_initial(cfg, "perturbation"),
            amplitudes=tuple(float(a) for a in c.get("amplitudes", (1e-2, 1e-3))),
            mu_ladder=tuple(float(m) for m in c.get("mu_ladder", (1e-2, 1e-3, 1e-4))),
            heat_supply=float(s.get("heat_supply", 0.0)),
            snapshots=int(s.get("snapshots", 10)), cfl=float(s.get("cfl", 0.5)),
            growth_factor=float(c.get("growth_factor", 10.0)),
            slack_tolerance=float(c.get("slack_tolerance", 0.05)),
            constant_tolerance=float(c.get("constant_tolerance", 0.20)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[compare]: {exc}") from exc


def cmd_compare(cfg: dict, out: Path, seed: int, log) -> tuple[int, dict]:
    wcfg = build_compare(cfg)
    try:
        for data in (wcfg.initial, relent.perturbed_initial(wcfg.initial, wcfg.perturbation, max(wcfg.amplitudes, default=0.0))):
            data.build(wcfg.grid, wcfg.model)
    except ValueError as exc:
        raise ConfigError(f"[initial]: {exc}") from exc
    report = relent.weak_strong_experiment(wcfg)
    series_cols = ["t", "lipschitz"] + list(report.series)
    write_csv(out / "relative_entropy.csv", list(report.rows()), series_cols)
    fit_rows = [{"candidate": k, "C1": f.C1, "C2": f.C2, "slack": f.slack, "points": f.used,
                 "initial": report.initial[k]} for k, f in report.fits.items()]
    write_csv(out / "gronwall_fits.csv", fit_rows, ("candidate", "C1", "C2", "slack", "points", "initial"))
    ladder_rows = [{"mu0": m, "k0": m, "integral_I_final": v} for m, v in sorted(report.ladder_final.items(), reverse=True)]
    write_csv(out / "viscosity_ladder.csv", ladder_rows, ("mu0", "k0", "integral_I_final"))
    summary = {"criteria": report.criteria, "observed_ratios": report.observed_ratios, "passed": report.passed}
    _json(out / "relative_entropy_summary.json", summary)
    for k, v in report.criteria.items():
        log(f"compare: {k}: {'PASS' if v else 'FAIL'}")
    return (EXIT_OK if report.passed else EXIT_INVARIANT), summary


BOUND_COLUMNS = ("lemma", "M", "delta", "R", "samples", "constant", "value", "doubling_change")


def cmd_bounds(cfg: dict, out: Path, seed: int, log) -> tuple[int, dict]:
    model = build_model(cfg)
    b = _take(cfg.get("bounds", {}), ("regions", "samples", "lemmas", "R", "r_bound", "theta_support",
                                      "support_sweep"), "bounds")
    try:
        regions = [relent.RegionGamma(float(M), float(d)) for M, d in b.get("regions", [(2.0, 0.5)])]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[bounds] regions: {exc}") from exc
    samples = int(b.get("samples", 10_000))
    lemmas = tuple(b.get("lemmas", ("lemma1", "lemma2", "lemma3")))
    unknown = set(lemmas) - {"lemma1", "lemma2", "lemma3"}
    if unknown:
        raise ConfigError(f"[bounds] unknown lemmas: {sorted(unknown)}")
    R = b.get("R")
    rows, worst_rows, passes = [], [], {}
    for region in regions:
        for lemma in lemmas:
            if lemma == "lemma3":
                report = relent.lemma3_check(model, region, r_bound=float(b.get("r_bound", 1.0)),
                                             theta_support=float(b.get("theta_support", 0.1)), R=R,
                                             samples=samples, seed=seed)
            else:
                report = getattr(relent, f"{lemma}_check")(model, region, R=R, samples=samples, seed=seed)
            rows.extend(report.rows())
            for name, point in report.worst.items():
                worst_rows.append({"lemma": lemma, "M": region.M, "delta": region.delta, "constant": name,
                                   "point": " ".join(format_value(x) for x in point)})
            key = f"{lemma}@M={region.M:g},delta={region.delta:g}"
            passes[key] = report.passed
            log(f"bounds: {key}: {'PASS' if report.passed else 'FAIL'} "
                + " ".join(f"{k}={v:.4g}" for k, v in report.constants.items()))
    write_csv(out / "bounds.csv", rows, BOUND_COLUMNS)
    write_csv(out / "worst_points.csv", worst_rows, ("lemma", "M", "delta", "constant", "point"))
    sweep = b.get("support_sweep")
    if sweep:
        sweep_rows = []
        region = regions[-1]
        for floor in sweep:
            report = relent.lemma3_check(model, region, r_bound=float(b.get("r_bound", 1.0)),
                                         theta_support=float(floor), R=R, samples=samples, seed=seed)
            sweep_rows.append({"theta_support": float(floor), "C5": report.constants["C5"],
                               "doubling_change": report.stability["C5"], "passed": report.passed})
            passes[f"lemma3@theta_support={float(floor):g}"] = report.passed
            log(f"bounds: support sweep theta_support={float(floor):g}: C5={report.constants['C5']:.4g}")
        write_csv(out / "support_sweep.csv", sweep_rows, ("theta_support", "C5", "doubling_change", "passed"))
    summary = {"passed": passes}
    return (EXIT_OK if all(passes.values()) else EXIT_INVARIANT), summary


# weaklab demos: name -> function(section) -> (rows, columns, verdict, expected_fail)


def _demo_transport(section):
    rows = []
    for n in section.get("transport_sizes", (16, 32)):
        grid = Grid.cube(int(n))
        times = np.linspace(0.0, 0.5, int(n) // 2 + 1)
        x1, x2, x3 = grid.coords()
        u = np.zeros((len(times),) + grid.dims + (3,))
        for k, t in enumerate(times):
            u[k, ..., 1] = 0.05 * np.sin(2 * np.pi * (x1 - 0.7 * t))
            u[k, ..., 0] = 0.03 * np.cos(2 * np.pi * (x2 + x3 + 0.5 * t))
            u[k, ..., 2] = 0.02 * np.sin(2 * np.pi * (x1 + x2 - t))
        r = wl.transport_identity_residual(u, times, grid)
        rows.append({"n": int(n), "F": r[0], "det": r[1], "cof": r[2]})
    orders = [math.log2(a / b) for a, b in zip((rows[0][k] for k in ("F", "det", "cof")),
                                                  (rows[-1][k] for k in ("F", "det", "cof")))]
    ratio = int(rows[-1]["n"]) / int(rows[0]["n"])
    orders = [o / math.log2(ratio) for o in orders]
    for row in rows:
        row["order_F"], row["order_det"], row["order_cof"] = orders
    verdict = "PASS" if min(orders) >= 1.9 else "FAIL"
    return rows, ("n", "F", "det", "cof", "order_F", "order_det", "order_cof"), verdict


def _table_rows(table: wl.WeakLimitTable):
    return list(table.rows()), ("family", "parameter", "minors_gap", "det_gap", "cof_gap", "contrast_gap",
                                "divergence_route_gap")


def _demo_minors(section):
    table = wl.minors_weak_limit_test(wl.oscillatory_family(Grid(tuple(section.get("minors_grid", (64, 16, 16))))))
    rows, cols = _table_rows(table)
    return rows, cols, table.verdict


def _demo_p2(section):
    table = wl.minors_weak_limit_test(wl.concentrating_family(Grid.cube(int(section.get("p2_grid", 64)))))
    rows, cols = _table_rows(table)
    return rows, cols, table.det_verdict


def _demo_duty_cycle(section):
    seq = wl.duty_cycle_family(Grid(tuple(section.get("duty_grid", (96, 8, 8)))))
    est = wl.estimate_young_measure(seq)
    rows = []
    for c in range(est.ncells):
        weights, atoms = est.histogram(c)
        for w, a in zip(weights, atoms):
            rows.append({"cell": c, "v1": a[9], "weight": w})
    kinetic = lambda a: np.sum(a[:, wl.V_COMPONENTS] ** 2, axis=1)
    test = catalog_by_name("gauss_center")
    via_measure = est.pair(kinetic, test)
    direct = wl.direct_weak_limit(seq, kinetic, test)
    low = [r["weight"] for r in rows if r["v1"] == 1.0]
    ok = all(abs(w - 1 / 3) <= 0.02 for w in low) and abs(via_measure - direct) <= 0.02 * abs(direct)
    for r in rows:
        r["kinetic_via_measure"], r["kinetic_direct"] = via_measure, direct
    return rows, ("cell", "v1", "weight", "kinetic_via_measure", "kinetic_direct"), "PASS" if ok else "FAIL"


def _demo_recession(section):
    model = EnergyModel()
    energy = wl.total_energy_observable(model)
    cases = [
        ("energy", "velocity", energy, (np.zeros((3, 3)), np.array([1.0, 0.0, 0.0]), 0.0), 0.5),
        ("one", "mixed", lambda F, v, th: 1.0, (np.eye(3), np.ones(3), 1.0), 0.0),
        ("speed", "velocity", lambda F, v, th: float(np.linalg.norm(v)), (np.zeros((3, 3)), np.array([0.0, 1.0, 0.0]), 0.0), 0.0),
    ]
    rows, ok = [], True
    for name, direction, f, z, expected in cases:
        res = wl.recession(f, z)
        good = res.converged and abs(res.value - expected) <= 1e-4
        ok &= good
        rows.append({"observable": name, "direction": direction, "value": res.value, "expected": expected,
                     "converged": res.converged})
    return rows, ("observable", "direction", "value", "expected", "converged"), "PASS" if ok else "FAIL"


def _demo_concentration(section):
    model = EnergyModel()
    n = int(section.get("concentration_grid", 64))
    grid = Grid.cube(n)
    mass = wl.gaussian_kinetic_mass()
    single = wl.estimate_concentration(wl.bump_family(grid), model)
    pair = wl.estimate_concentration(
        wl.bump_family(grid, centers=((0.375, 0.625, 0.625), (0.875, 0.625, 0.625))), model)
    osc = wl.estimate_concentration(wl.oscillatory_family(Grid((64, 16, 16))), model)
    rows = []
    for label, est, expected in (("single bump", single, mass), ("two bumps", pair, 2 * mass),
                                 ("oscillation", osc, 0.0)):
        for row in est.rows():
            row.update({"family": label, "extrapolated": est.extrapolated, "expected": expected,
                        "peak_fraction": est.peak_fraction})
            rows.append(row)
    ok = (abs(single.extrapolated / mass - 1) <= 0.05 and abs(pair.extrapolated / (2 * mass) - 1) <= 0.05
          and osc.total[-1] <= 1e-12 * abs(osc.energy[-1]) and single.peak_fraction >= 0.95)
    cols = ("family", "parameter", "threshold", "energy", "representable", "gamma", "extrapolated", "expected",
            "peak_fraction")
    return rows, cols, "PASS" if ok else "FAIL"


def _demo_averaged(section):
    model = EnergyModel()
    grid = Grid.cube(int(section.get("averaged_grid", 64)))
    times = np.linspace(0.0, 1.0, 17)
    rows, ok = [], True
    for n in section.get("focus_ladder", (4, 8, 16)):
        res = wl.averaged_equations_check(wl.focusing_levels(grid, model, float(n), times), model,
                                          tests=[catalog_by_name("one")])
        rows.append({"focus": n, "gap_with_gamma": res.energy_gap_with_gamma / res.energy_scale,
                     "gap_without_gamma": res.energy_gap_without_gamma / res.energy_scale,
                     "gamma_term": res.gamma_term / res.energy_scale})
        ok &= res.closes_with_gamma and not res.closes_without_gamma
    return rows, ("focus", "gap_with_gamma", "gap_without_gamma", "gamma_term"), "PASS" if ok else "FAIL"


WEAKLAB_DEMOS = {
    "transport": _demo_transport,
    "minors": _demo_minors,
    "p2_counter": _demo_p2,
    "duty_cycle": _demo_duty_cycle,
    "recession": _demo_recession,
    "concentration": _demo_concentration,
    "averaged_energy": _demo_averaged,
}
EXPECTED_FAIL_DEMOS = {"p2_counter"}


def cmd_weaklab(cfg: dict, out: Path, seed: int, log) -> tuple[int, dict]:
    section = dict(cfg.get("weaklab", {}))
    demos = tuple(section.pop("demos", tuple(WEAKLAB_DEMOS)))
    unknown = set(demos) - set(WEAKLAB_DEMOS)
    if unknown:
        raise ConfigError(f"[weaklab] unknown demos: {sorted(unknown)}")
    results = {}
    for name in demos:
        rows, cols, verdict = WEAKLAB_DEMOS[name](section)
        write_csv(out / f"weaklab_{name}.csv", rows, cols)
        if name in EXPECTED_FAIL_DEMOS:
            # the hypothesis p >= 4 is violated on purpose, so the gap must persist
            verdict = "EXPECTED-FAIL" if verdict in ("FAIL", "EXPECTED-FAIL") else "UNEXPECTED-PASS"
        results[name] = verdict
        log(f"weaklab: {name}: {verdict}")
    write_csv(out / "weaklab_summary.csv", [{"demo": k, "verdict": v} for k, v in results.items()],
              ("demo", "verdict"))
    ok = all(v in ("PASS", "EXPECTED-FAIL") for v in results.values())
    return (EXIT_OK if ok else EXIT_INVARIANT), {"verdicts": results}


# check suite: name -> function() -> (value, tolerance, passed)


def _check_cofactor():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((2000, 3, 3)) * 3.0
    err = np.abs(F @ np.swapaxes(cofactor(F), -1, -2) - determinant(F)[:, None, None] * np.eye(3))
    scale = 1.0 + np.abs(F).max(axis=(1, 2)) ** 3
    value = float((err.max(axis=(1, 2)) / scale).max())
    return value, 1e-12, value <= 1e-12


def _check_piola():
    r = [float(np.abs(piola_residual(demo_motion(Grid.cube(n)), Grid.cube(n))).max()) for n in (16, 32)]
    order = math.log2(r[0] / r[1])
    return order, 1.9, order >= 1.9


def _check_thermo():
    model = EnergyModel()
    rng = np.random.default_rng(1)
    F = np.eye(3) + 0.3 * rng.standard_normal((200, 3, 3))
    from polytherm.minors import minors_vector

    xi = minors_vector(F)
    theta = 0.5 + rng.random(200)
    h = 1e-6
    eta_fd = -(cm.free_energy(model, xi, theta + h) - cm.free_energy(model, xi, theta - h)) / (2 * h)
    err_eta = np.abs(eta_fd - cm.entropy(model, xi, theta)).max()
    err_e = np.abs(cm.internal_energy(model, xi, theta)
                   - cm.free_energy(model, xi, theta) - theta * cm.entropy(model, xi, theta)).max()
    value = float(max(err_eta, err_e))
    return value, 1e-7, value <= 1e-7


def _check_entropy_pair():
    model = EnergyModel()
    rng = np.random.default_rng(2)
    F = np.eye(3) + 0.3 * rng.standard_normal((100, 3, 3))
    U = aug.state_from_fields(F, 0.5 * rng.standard_normal((100, 3)), 0.5 + rng.random(100))
    rH, rq = aug.check_entropy_pair(U, model)
    value = float(max(rH.max(), rq.max()))
    return value, 1e-6, value <= 1e-6


def _check_symmetric_convexity():
    model = EnergyModel()
    rng = np.random.default_rng(3)
    F = np.eye(3) + 0.3 * rng.standard_normal((5, 3, 3))
    U = aug.state_from_fields(F, rng.standard_normal((5, 3)), 0.5 + rng.random(5))
    value = float(aug.symmetric_hessian_min_eig(aug.conserved(U, model), model).min())
    return value, 0.0, value > 0


def _check_relative_entropy():
    model = EnergyModel()
    rng = np.random.default_rng(4)
    F = np.eye(3) + 0.3 * rng.standard_normal((1000, 3, 3))
    v = rng.standard_normal((1000, 3))
    th = 0.5 + rng.random(1000)
    same = np.abs(relent.rel_entropy_I(F, v, th, F, v, th, model)).max()
    vb = rng.standard_normal((1000, 3))
    vel = np.abs(relent.rel_entropy_I(F, v, th, F, vb, th, model) - 0.5 * np.sum((v - vb) ** 2, axis=1)).max()
    Fb = np.eye(3) + 0.3 * rng.standard_normal((1000, 3, 3))
    positive = relent.rel_entropy_I(F, v, th, Fb, vb, 0.5 + rng.random(1000), model).min()
    value = float(max(same, vel))
    return value, 1e-12, value <= 1e-12 and positive > 0


def _check_lemma1():
    report = relent.lemma1_check(EnergyModel(), relent.RegionGamma(1.0, 0.5), samples=2000, seed=0)
    return report.constants["K1_half"], 0.0, report.passed


def _check_energy_conservation():
    model = EnergyModel()
    grid = Grid.cube(8)
    init = solver.InitialData(displacement=(solver.Mode(0, 0.02, (1, 0, 0)), solver.Mode(1, 0.02, (0, 1, 1), "cos")),
                              velocity=(solver.Mode(2, 0.05, (0, 1, 0)),))
    traj = solver.run(solver.SolverConfig(model, grid, 0.2, cfl=0.25, snapshots=4), init)
    E = traj.diagnostics.column("energy")
    value = float(np.abs(E / E[0] - 1).max())
    return value, 1e-6, value <= 1e-6


def _check_entropy_growth():
    model = EnergyModel()
    grid = Grid((32, 1, 1))
    init = solver.InitialData(displacement=(solver.Mode(0, 0.02, (1, 0, 0)),),
                              theta_modes=(solver.Mode(0, 0.1, (1, 0, 0), "cos"),))
    cfg = solver.SolverConfig(model, grid, 0.2, mu=solver.Coefficient(1e-2), k=solver.Coefficient(1e-2), snapshots=8)
    S = solver.run(cfg, init).diagnostics.column("entropy")
    value = float(np.diff(S).min())
    return value, -1e-8 * abs(S[0]), value >= -1e-8 * abs(S[0])


def _check_transport():
    # 16 nodes per axis so the sampled Gaussian test gradients sum to round-off
    times = np.linspace(0.0, 0.2, 5)
    grid = Grid.cube(16)
    u = np.array([np.broadcast_to(t * np.array([0.1, 0.2, 0.3]), grid.dims + (3,)) for t in times])
    value = float(max(wl.transport_identity_residual(u, times, grid)))
    return value, 1e-10, value <= 1e-10


def _check_duty_cycle():
    est = wl.estimate_young_measure(wl.duty_cycle_family(Grid((48, 4, 4)), frequencies=(1, 2, 4)))
    weights, atoms = est.histogram(0)
    value = float(weights[np.argmax(atoms[:, 9])])
    return value, 1 / 3, abs(value - 1 / 3) <= 0.02 and np.allclose(est.weight_sums(), 1.0)


def _check_snapshot(tmp: Path):
    grid = Grid((4, 5, 6))
    values = np.arange(grid.size * 7, dtype=float).reshape(grid.dims + (7,)) / 7.0
    write_snapshot(tmp / "roundtrip.ptf", values, grid, 0.25)
    back, g2, t = read_snapshot(tmp / "roundtrip.ptf")
    (tmp / "roundtrip.ptf").unlink()
    ok = g2 == grid and t == 0.25 and np.array_equal(back, values)
    return 0.0 if ok else 1.0, 0.0, ok


CHECKS = {
    "cofactor_identity": _check_cofactor,
    "piola_order": _check_piola,
    "thermodynamic_consistency": _check_thermo,
    "entropy_pair": _check_entropy_pair,
    "symmetric_entropy_convexity": _check_symmetric_convexity,
    "relative_entropy_identities": _check_relative_entropy,
    "lemma1_small": _check_lemma1,
    "inviscid_energy_conservation": _check_energy_conservation,
    "viscous_entropy_growth": _check_entropy_growth,
    "transport_translation": _check_transport,
    "duty_cycle_weights": _check_duty_cycle,
    "snapshot_roundtrip": _check_snapshot,
}


def cmd_check(cfg: dict, out: Path, seed: int, log) -> tuple[int, dict]:
    rows, first_failure = [], None
    for name, fn in CHECKS.items():
        value, tol, ok = fn(out) if name == "snapshot_roundtrip" else fn()
        rows.append({"invariant": name, "value": value, "tolerance": tol, "status": "PASS" if ok else "FAIL"})
        log(f"check: {name}: {'PASS' if ok else 'FAIL'} ({format_value(value)})")
        if not ok and first_failure is None:
            first_failure = name
    write_csv(out / "check.csv", rows, ("invariant", "value", "tolerance", "status"))
    if first_failure:
        log(f"check: first failing invariant: {first_failure}")
    return (EXIT_INVARIANT if first_failure else EXIT_OK), {"first_failure": first_failure}


HANDLERS = {
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "bounds": cmd_bounds,
    "weaklab": cmd_weaklab,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="polytherm", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="experiment config file (optional for check)")
    parser.add_argument("--out", default=None, help="output directory (default: polytherm_out/<command>)")
    parser.add_argument("--seed", type=int, default=None, help="sampling seed, overrides [experiment] seed")
    args = parser.parse_args(argv)

    def log(message):
        print(message, file=sys.stderr)

    started = time.time()
    out = Path(args.out) if args.out else Path("polytherm_out") / args.command
    try:
        cfg = load_config(args.config) if args.config else {}
        if args.config is None and args.command != "check":
            raise ConfigError(f"{args.command} needs --config")
        experiment = _take(cfg.get("experiment", {}), ("kind", "seed", "title"), "experiment")
        kind = experiment.get("kind", args.command)
        if kind != args.command:
            raise ConfigError(f"config is for '{kind}', not '{args.command}'")
        seed = args.seed if args.seed is not None else int(experiment.get("seed", 0))
        if seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        out.mkdir(parents=True, exist_ok=True)
        code, summary = HANDLERS[args.command](cfg, out, seed, log)
    except ConfigError as exc:
        log(f"config error: {exc}")
        return EXIT_CONFIG
    except relent.SmoothnessLoss as exc:
        log(f"numerical failure [{exc.invariant}]: {exc}")
        code, summary, seed = EXIT_SMOOTHNESS, {"failure": str(exc), "invariant": exc.invariant}, locals().get("seed")
    except solver.NumericalFailure as exc:
        log(f"numerical failure [{exc.invariant}]: {exc}")
        code, summary, seed = EXIT_NUMERICAL, {"failure": str(exc), "invariant": exc.invariant}, locals().get("seed")
    except relent.DegenerateSampling as exc:
        log(f"degenerate sampling: {exc}")
        code, summary, seed = EXIT_SAMPLING, {"failure": str(exc)}, locals().get("seed")
    write_manifest(out, args.command, args.config, seed, code, summary, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
