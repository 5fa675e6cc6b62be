"""Command line entry point.

Runs are described by plain ``key=value`` files (one key per line, ``#``
starts a comment).  Every key can also be given as ``--key value`` after the
subcommand, overriding the file.  Example::

    gaugeflow coulomb fixture=abelian-c05 n=65
    gaugeflow flow -c run.cfg --t_max 2 --scheme semi-implicit

Exit codes: 0 ok, 2 bad configuration, 3 numerical failure, 4 failed check.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coulomb, domain, fixtures, flow, gauge, singular
from .group import J2, InjectivityError, RetractionError

SUBCOMMANDS = ("flow", "coulomb", "scan", "blowup", "generalized", "selftest")
FIXTURES = ("abelian-c05", "random-so3-small", "planted-bump", "planted-two-bumps", "planted-bubble")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _optional(conv):
    def parse(text: str):
        return None if text.lower() in ("none", "") else conv(text)

    parse.__name__ = f"optional {conv.__name__}"
    return parse


# key -> (converter, default); FlowConfig keys are added below
_RUN_KEYS = {
    "subcommand": (str, None),
    "topology": (str, "Square"),
    "n": (int, 65),
    "r": (int, 2),
    "source": (str, "fixture"),
    "fixture": (str, "abelian-c05"),
    "path": (_optional(str), None),
    "seed": (_optional(int), None),
    "amplitude": (float, 0.2),
    "max_mode": (int, 1),
    "lam": (float, 0.05),
    "output": (str, "gaugeflow-out"),
    "scan_radius": (_optional(float), None),
    "window": (float, 8.0),
    "inject_time": (float, 0.02),
    "delta_max": (_optional(float), None),
    "planted_energy": (_optional(float), None),
}

_FLOW_KEYS = {
    "dt_factor": (float, 0.5),
    "t_max": (float, 10.0),
    "residual_tol": (float, 1e-8),
    "drift_tol": (float, 1e-6),
    "eps0": (float, 4.0 * math.pi),
    "sigma": (_optional(float), None),
    "record_every": (int, 100),
    "snapshot_every": (int, 0),
    "scheme": (str, "explicit"),
    "dt_max": (_optional(float), None),
    "max_steps": (_optional(int), None),
    "max_halvings": (int, 20),
}

KEYS = {**_RUN_KEYS, **_FLOW_KEYS}


@dataclass
class RunConfig:
    subcommand: str
    topology: str = "Square"
    n: int = 65
    r: int = 2
    source: str = "fixture"
    fixture: str = "abelian-c05"
    path: str | None = None
    seed: int | None = None
    amplitude: float = 0.2
    max_mode: int = 1
    lam: float = 0.05
    output: str = "gaugeflow-out"
    scan_radius: float | None = None
    window: float = 8.0
    inject_time: float = 0.02
    delta_max: float | None = None
    planted_energy: float | None = None
    flow: flow.FlowConfig = field(default_factory=flow.FlowConfig)

    def echo(self) -> str:
        """Canonical ``key=value`` text; parsing it gives back this config."""
        lines = []
        for key in _RUN_KEYS:
            lines.append(f"{key}={_format(getattr(self, key))}")
        for key in _FLOW_KEYS:
            lines.append(f"{key}={_format(getattr(self.flow, key))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_BUBBLE = re.compile(r"planted-bubble\(([^)]*)\)$")


def parse_config(text: str, overrides=()) -> RunConfig:
    """Parse ``key=value`` lines and then ``overrides`` (pairs of key, value).

    Raises
    ------
    ConfigError
        For unknown keys, malformed lines, values of the wrong type, a missing
        ``subcommand`` and inconsistent settings; the message names the line
        (``--key`` for overrides).
    """
    values, where = {}, {}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((f"line {lineno}", key, value))
    entries += [(f"--{k}", k, v) for k, v in overrides]
    for loc, key, value in entries:
        if key not in KEYS:
            raise ConfigError(f"{loc}: unknown key {key!r}")
        conv = KEYS[key][0]
        try:
            values[key] = conv(value)
        except ValueError:
            raise ConfigError(f"{loc}: {key} expects {getattr(conv, '__name__', 'a value')}, got {value!r}") from None
        where[key] = loc
    if "subcommand" not in values:
        raise ConfigError("line 0: missing required key 'subcommand'")
    m = _BUBBLE.match(values.get("fixture", ""))
    if m:
        try:
            values["lam"] = float(m.group(1))
        except ValueError:
            raise ConfigError(f"{where['fixture']}: bad bubble scale {m.group(1)!r}") from None
        values["fixture"] = "planted-bubble"
    run = {k: values.get(k, d) for k, (_, d) in _RUN_KEYS.items()}
    flow_kw = {k: values[k] for k in _FLOW_KEYS if k in values}

    def fail(key, message):
        raise ConfigError(f"{where.get(key, 'line 0')}: {message}")

    if run["subcommand"] not in SUBCOMMANDS:
        fail("subcommand", f"subcommand must be one of {', '.join(SUBCOMMANDS)}")
    if run["topology"] not in ("Square", "Torus"):
        fail("topology", "topology must be Square or Torus")
    if run["n"] < 8:
        fail("n", "n must be at least 8")
    if run["r"] < 2:
        fail("r", "r must be at least 2")
    if run["source"] not in ("fixture", "file", "random"):
        fail("source", "source must be fixture, file or random")
    if run["source"] == "fixture" and run["fixture"] not in FIXTURES:
        fail("fixture", f"unknown fixture {run['fixture']!r}; known: {', '.join(FIXTURES)}")
    if run["source"] == "random" and run["seed"] is None:
        fail("source", "source=random needs a seed")
    if run["source"] == "file":
        if run["path"] is None:
            fail("source", "source=file needs a path")
        if not Path(run["path"]).exists():
            fail("path", f"path {run['path']!r} does not exist")
    if run["amplitude"] < 0:
        fail("amplitude", "amplitude must be >= 0")
    try:
        cfg = flow.FlowConfig(**flow_kw)
    except ValueError as exc:
        named = [k for k in _FLOW_KEYS if k in str(exc) and k in where]
        fail(named[0] if named else "subcommand", str(exc))
    return RunConfig(**run, flow=cfg)


# ---------------------------------------------------------------------------
# problems


@dataclass
class Problem:
    grid: domain.Grid
    S0: np.ndarray
    A: np.ndarray
    A0: np.ndarray
    plant: object = None
    note: str = ""


def _compatible_start(A, grid):
    if grid.is_square:
        return coulomb.build_initial(A, max(0.1, 4.0 * grid.h), grid)
    return fixtures.identity_field(grid, A.shape[-1])


def _planted_energy(cfg: RunConfig) -> float:
    return cfg.planted_energy if cfg.planted_energy is not None else 1.5 * cfg.flow.eps0


def build_problem(cfg: RunConfig) -> Problem:
    """Grid, start field and connections described by ``cfg``."""
    grid = domain.make_grid(cfg.topology, cfg.n)
    if cfg.source == "file":
        file_grid, r, values = domain.read_gfdump(cfg.path)
        if file_grid.n != grid.n or file_grid.topology is not grid.topology:
            raise ConfigError(f"--path: {cfg.path} holds a {file_grid.topology.value} grid with n={file_grid.n}")
        if values.shape[-1] != 2 * r * r:
            raise ConfigError(f"--path: {cfg.path} must hold a connection with 2 r^2 components")
        if not np.all(np.isfinite(values)):
            raise ConfigError(f"--path: {cfg.path} holds non-finite values")
        A = np.moveaxis(values.reshape(grid.shape + (2, r, r)), 2, 0).copy()
        A0 = np.zeros_like(A)
        return Problem(grid, _compatible_start(A, grid), A, A0, note=f"connection from {cfg.path}")
    if cfg.source == "random":
        rng = np.random.default_rng(cfg.seed)
        A = fixtures.smooth_form(grid, cfg.r, rng, cfg.amplitude, cfg.max_mode)
        return Problem(grid, _compatible_start(A, grid), A, np.zeros_like(A), note=f"random seed={cfg.seed}")
    name = cfg.fixture
    if name == "abelian-c05":
        A = fixtures.abelian_form(grid, fixtures.ABELIAN_C)
        return Problem(grid, _compatible_start(A, grid), A, np.zeros_like(A), note="A = 0.5 dx^1 J")
    seed = 0 if cfg.seed is None else cfg.seed
    rng = np.random.default_rng(seed)
    A = fixtures.smooth_form(grid, 3, rng, cfg.amplitude, cfg.max_mode)
    A0 = np.zeros_like(A)
    S0 = _compatible_start(A, grid)
    if name == "random-so3-small":
        return Problem(grid, S0, A, A0, note=f"random so(3) seed={seed}")
    energy = _planted_energy(cfg)
    if name == "planted-bump":
        def plant(S):
            return fixtures.plant_bump(S, grid, (0.5, 0.5), 0.1, energy)
    elif name == "planted-two-bumps":
        def plant(S):
            S = fixtures.plant_bump(S, grid, (0.25, 0.25), 0.1, energy)
            return fixtures.plant_bump(S, grid, (0.75, 0.7), 0.1, energy)
    else:
        lam = cfg.lam

        def plant(S):
            return fixtures.plant_bubble(grid, (0.5, 0.5), lam)

        zero = np.zeros_like(A)
        return Problem(grid, plant(S0), zero, zero, plant, note=f"bubble lambda={lam}")
    return Problem(grid, S0, A, A0, plant, note=f"{name} energy={energy}")


# ---------------------------------------------------------------------------
# subcommands


class CheckFailed(AssertionError):
    pass


def _check(ok: bool, name: str) -> None:
    if not ok:
        raise CheckFailed(name)


def _write_summary(out: Path, items: dict) -> None:
    with open(out / "summary.txt", "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={_format(v) if not isinstance(v, float) else repr(v)}\n")


def _write_flow_outputs(out: Path, state: flow.FlowState, grid, prefix: str = "") -> None:
    gauge.write_energy_csv(out / f"{prefix}energy.csv", state.energy_series, with_drift=True)
    flow.write_events(out / f"{prefix}events.log", state.events)
    for snap in state.snapshots:
        domain.write_gfdump(out / f"{prefix}snapshot_{snap.step:07d}.gfdump", snap.S, grid)
    domain.write_gfdump(out / f"{prefix}S_final.gfdump", state.S, grid)


def _monotone(state: flow.FlowState) -> bool:
    slack = flow.MONOTONE_SLACK * state.energy0
    return all(e1 <= e0 + slack for _, _, e0, e1, _ in state.step_log)


def run_flow(cfg: RunConfig, out: Path) -> dict:
    p = build_problem(cfg)
    state = flow.run(p.S0, p.A, p.A0, p.grid, cfg.flow)
    _write_flow_outputs(out, state, p.grid)
    summary = {
        "status": state.status.value, "steps": state.step, "t": state.t, "energy": state.energy,
        "residual_l2": state.residual_l2, "residual_linf": state.residual_linf, "drift": state.post_drift,
        "dissipation_defect": state.dissipation_defect(),
    }
    _check(_monotone(state), "energy is non-increasing")
    _check(state.post_drift <= cfg.flow.drift_tol, "group constraint after retraction")
    return summary


def run_coulomb(cfg: RunConfig, out: Path) -> dict:
    p = build_problem(cfg)
    if not p.grid.is_square:
        raise ConfigError("line 0: coulomb needs topology=Square")
    res = coulomb.decompose(p.A, p.grid, cfg.flow)
    row = res.summary_row()
    with open(out / "decomposition.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow({k: ("%.17g" % v if isinstance(v, float) else v) for k, v in row.items()})
    domain.write_gfdump(out / "S.gfdump", res.S, p.grid)
    domain.write_gfdump(out / "xi.gfdump", res.xi, p.grid)
    domain.write_gfdump(out / "omega_tilde.gfdump", np.moveaxis(res.omega_tilde, 0, 2), p.grid, r=p.A.shape[-1])
    _write_flow_outputs(out, res.flow_state, p.grid)
    summary = dict(row)
    summary["steps"] = res.flow_state.step
    if p.A.shape[-1] == 2 and cfg.source == "fixture" and cfg.fixture == "abelian-c05":
        theta = fixtures.abelian_angle(res.S)
        x1 = p.grid.coords[0]
        err = theta + fixtures.ABELIAN_C * x1
        summary["theta_error"] = float(np.max(np.abs(err - np.mean(err))))
    _check(res.status is coulomb.DecompositionStatus.CONVERGED, "flow converged")
    _check(bool(np.all(res.xi[p.grid.boundary_mask != domain.PointKind.INTERIOR] == 0.0)), "xi vanishes on the boundary")
    return summary


def _scan_field(cfg: RunConfig, p: Problem) -> np.ndarray:
    return p.S0 if p.plant is None else (p.S0 if cfg.fixture == "planted-bubble" else p.plant(p.S0))


def _scan_radius(cfg: RunConfig, grid) -> float:
    return cfg.scan_radius if cfg.scan_radius is not None else max(0.1, 4.0 * grid.h)


def _write_scan(out: Path, report: singular.ConcentrationReport) -> None:
    flagged = {p[0] for p in report.flagged}
    with open(out / "scan.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "radius", "local_energy", "flagged"])
        for c, rad, e in report.points:
            w.writerow(["%.17g" % c[0], "%.17g" % c[1], "%.17g" % rad, "%.17g" % e, int(c in flagged)])


def run_scan(cfg: RunConfig, out: Path) -> dict:
    p = build_problem(cfg)
    S = _scan_field(cfg, p)
    report = singular.concentration_scan(S, p.A, p.A0, p.grid, _scan_radius(cfg, p.grid), cfg.flow.eps0)
    _write_scan(out, report)
    total = gauge.energy(S, p.A, p.A0, p.grid).total
    _check(report.count <= 2.0 * total / cfg.flow.eps0 + 1e-12, "flagged count within 2E/eps0")
    return {"flagged": report.count, "candidates": len(report.points), "energy": total}


def run_blowup(cfg: RunConfig, out: Path) -> dict:
    p = build_problem(cfg)
    S = _scan_field(cfg, p)
    radius = _scan_radius(cfg, p.grid)
    report = singular.concentration_scan(S, p.A, p.A0, p.grid, radius, cfg.flow.eps0)
    _write_scan(out, report)
    centers = [c for c, _, _ in report.flagged]
    if not centers:
        g = singular.gradient_norm(S, p.grid)
        i, j = np.unravel_index(int(np.argmax(g)), p.grid.shape)
        centers = [(i * p.grid.h, j * p.grid.h)]
    summary = {"flagged": report.count}
    for k, c in enumerate(centers):
        c = singular.blowup_center(S, p.grid, c, radius)
        frame = singular.extract_blowup(S, p.grid, c, cfg.window)
        singular.write_frame(out / f"frame_{k}.gfdump", frame)
        summary[f"frame_{k}_lambda"] = frame.lam
        summary[f"frame_{k}_max_gradient"] = frame.max_gradient
        summary[f"frame_{k}_rho"] = frame.rho
        summary[f"frame_{k}_harmonic_residual"] = singular.harmonic_residual(frame.w, frame.spacing)
        _check(0.9 <= frame.max_gradient <= 1.0 + 1e-9, f"frame {k}: rescaled gradient in [0.9, 1]")
    return summary


def run_generalized(cfg: RunConfig, out: Path) -> dict:
    p = build_problem(cfg)
    inject = None
    if p.plant is not None and cfg.fixture != "planted-bubble":
        inject = (cfg.inject_time, p.plant)

    def dump(name, S):
        domain.write_gfdump(out / f"{name}.gfdump", S, p.grid)

    res = singular.generalized_run(
        p.S0, p.A, p.A0, p.grid, cfg.flow, scan_radius=_scan_radius(cfg, p.grid), inject=inject,
        delta_max=cfg.delta_max, dump=dump,
    )
    singular.write_restart_ledger(out / "restarts.csv", res.restarts)
    for k, seg in enumerate(res.segments):
        _write_flow_outputs(out, seg, p.grid, prefix=f"segment{k}_")
    summary = {
        "status": res.status.value, "restarts": len(res.restarts), "residual_linf": res.residual_linf,
        "coulomb_residual": res.coulomb_residual, "energy": res.state.energy,
    }
    for rs in res.restarts:
        summary[f"restart_{rs.k}"] = f"t={rs.t!r} N={rs.count} drop={rs.drop!r}"
    _check(all(_monotone(s) for s in res.segments), "energy is non-increasing within segments")
    return summary


def run_selftest(cfg: RunConfig, out: Path) -> dict:
    """Abelian oracles at small size: closed-form solutions of the flow."""
    results = {}
    # 1. Coulomb gauge of a constant abelian connection on the square
    grid = domain.make_grid("Square", 33)
    A = fixtures.abelian_form(grid, fixtures.ABELIAN_C)
    res = coulomb.decompose(A, grid, flow.FlowConfig(scheme="semi-implicit"))
    theta = fixtures.abelian_angle(res.S)
    err = theta + fixtures.ABELIAN_C * grid.coords[0]
    results["coulomb_theta_error"] = float(np.max(np.abs(err - np.mean(err))))
    # 2. torus with A = A0: the identity is already critical
    torus = domain.make_grid("Torus", 32)
    A = fixtures.abelian_form(torus, 0.3, -0.2)
    state = flow.run(fixtures.identity_field(torus, 2), A, A, torus, flow.FlowConfig())
    results["torus_critical_steps"] = state.step
    # 3. the abelian flow is the heat equation for the angle
    x1, x2 = torus.coords
    theta0 = 0.1 * np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2)
    zero = fixtures.zero_form(torus, 2)
    cfg3 = flow.FlowConfig(t_max=0.002, record_every=10**6)
    state = flow.run(fixtures.abelian_gauge(theta0), zero, zero, torus, cfg3)
    k2 = 2 * (2 * np.pi) ** 2
    exact = theta0 * np.exp(-k2 * state.t)
    results["heat_error"] = float(np.max(np.abs(fixtures.abelian_angle(state.S) - exact)))
    # 4. the residual of exp(theta J) with w = 0 is -Lap(theta) J
    R = gauge.flow_residual(fixtures.abelian_gauge(theta0), zero, zero, torus)
    lap = -k2 * theta0
    results["residual_error"] = float(np.max(np.abs(R - (-lap)[..., None, None] * J2())))
    with open(out / "selftest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "value"])
        for k, v in results.items():
            w.writerow([k, "%.17g" % v])
    _check(res.status is coulomb.DecompositionStatus.CONVERGED, "selftest: coulomb flow converged")
    _check(results["coulomb_theta_error"] <= 5.0 * grid.h**2, "selftest: coulomb angle within 5h^2")
    _check(results["torus_critical_steps"] <= 2, "selftest: critical start converges at once")
    _check(results["heat_error"] <= 1e-4, "selftest: abelian flow is the heat equation")
    _check(results["residual_error"] <= 0.05 * k2 * 0.1, "selftest: abelian residual is -Lap theta")
    return results


RUNNERS = {
    "flow": run_flow,
    "coulomb": run_coulomb,
    "scan": run_scan,
    "blowup": run_blowup,
    "generalized": run_generalized,
    "selftest": run_selftest,
}


def run_subcommand(cfg: RunConfig, out: Path | None = None) -> int:
    """Run ``cfg`` writing into ``out``; returns the exit status."""
    out = Path(os.environ.get("GAUGEFLOW_OUT") or cfg.output) if out is None else Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.echo())
    status, failure = EXIT_OK, ""
    try:
        summary = RUNNERS[cfg.subcommand](cfg, out)
    except ConfigError as exc:
        status, failure, summary = EXIT_CONFIG, f"config error: {exc}", {}
    except AssertionError as exc:
        status, failure, summary = EXIT_CHECK, f"check failed: {exc}", {}
    except (ArithmeticError, RuntimeError, InjectivityError, RetractionError) as exc:
        status, failure, summary = EXIT_NUMERIC, f"numerical failure: {type(exc).__name__}: {exc}", {}
    summary = {"subcommand": cfg.subcommand, **summary, "exit": status}
    if failure:
        summary["failure"] = failure
        print(failure, file=sys.stderr)
    _write_summary(out, summary)
    return status


def _split_overrides(rest: list[str]):
    pairs, free = [], []
    it = iter(rest)
    for tok in it:
        if tok.startswith("--"):
            key = tok[2:]
            if "=" in key:
                key, value = key.split("=", 1)
            else:
                value = next(it, None)
                if value is None:
                    raise ConfigError(f"--{key}: missing value")
            pairs.append((key.replace("-", "_"), value))
        elif "=" in tok:
            key, value = tok.split("=", 1)
            pairs.append((key, value))
        else:
            free.append(tok)
    return pairs, free


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gaugeflow",
        usage="gaugeflow [SUBCOMMAND] [-c CONFIG] [-o OUT] [key=value | --key value ...]",
        description=f"gauge-transformation heat flow; subcommands: {', '.join(SUBCOMMANDS)}",
        allow_abbrev=False,
    )
    parser.add_argument("-c", "--config", help="key=value configuration file")
    parser.add_argument("-o", "--out", help="output directory (GAUGEFLOW_OUT takes precedence)")
    args, rest = parser.parse_known_args(argv)
    try:
        pairs, free = _split_overrides(rest)
        if free and free[0] in SUBCOMMANDS:
            pairs.insert(0, ("subcommand", free.pop(0)))
        if free:
            raise ConfigError(f"unexpected arguments: {' '.join(free)}")
        text = Path(args.config).read_text() if args.config else ""
        if args.out:
            pairs.append(("output", args.out))
        cfg = parse_config(text, pairs)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_subcommand(cfg)


if __name__ == "__main__":
    sys.exit(main())
