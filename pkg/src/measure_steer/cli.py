"""Command-line runner: ``measure-steer <solve|simulate|check-pmp|ingest>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MeasureSteerError, SolverError, ValidationError
from .fmp import fmp_iterate
from .io import (
    load_raster,
    read_control_csv,
    write_control_csv,
    write_empirical_csv,
    write_grid_csv,
    write_rows,
)
from .measures import EmpiricalMeasure, GridMeasure, image_to_measure, moment_first
from .pmp import pmp_residual
from .scenario import Scenario, load_scenario

log = logging.getLogger("measure_steer")


def _write_measure(path_stem: Path, m) -> Path:
    if isinstance(m, GridMeasure):
        return write_grid_csv(path_stem.with_suffix(".csv"), m.spec, m)
    return write_empirical_csv(path_stem.with_suffix(".csv"), m)


def _mean_summary(measures, names) -> dict:
    out = {}
    for name, m in zip(names, measures):
        mean, _ = moment_first(m)
        out[name] = [float(v) for v in mean]
    return out


class Run:
    """Collects artifacts and writes the manifest."""

    def __init__(self, command: str, scenario: Scenario, out: Path, backend: str, extra: dict):
        self.command = command
        self.scenario = scenario
        self.out = out
        self.backend = backend
        self.extra = extra
        self.artifacts: list[str] = []
        self.results: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def add(self, path: Path) -> None:
        self.artifacts.append(Path(path).relative_to(self.out).as_posix())

    def manifest(self) -> Path:
        sc = self.scenario
        a = sc.algorithm
        data = {
            "command": self.command,
            "version": __version__,
            "scenario": sc.name,
            "scenario_sha256": sc.sha256,
            "parameters": {
                "backend": self.backend,
                "seed": sc.seed,
                "particles": sc.n_particles,
                "horizon": sc.horizon,
                "tau": sc.time_grid.tau,
                "steps": sc.time_grid.n_steps,
                "grid": None if sc.grid is None else {
                    "domain_min": list(sc.grid.domain_min),
                    "domain_max": list(sc.grid.domain_max),
                    "cells": [int(c) for c in sc.grid.cells],
                },
                "eps1": a.eps1, "eps2": a.eps2, "alpha": list(a.alphas),
                "explore": list(a.explores), "max_outer": a.max_outer,
                "intervals": a.intervals, "scheme": a.scheme,
                **self.extra,
            },
            "warnings": list(sc.warnings),
            "results": self.results,
            "artifacts": sorted(self.artifacts),
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path


def _control(args, sc: Scenario):
    if args.control:
        signal = read_control_csv(args.control)
        if signal.m != sc.control_set.m:
            raise ValidationError(f"control file has {signal.m} components, scenario needs {sc.control_set.m}")
        if not all(sc.control_set.contains(v) for v in signal.values):
            raise ValidationError("control file leaves the control box U")
        return signal
    return sc.initial_signal()


def cmd_solve(args, sc: Scenario, run: Run) -> None:
    backend = sc.make_backend(run.backend)
    u0 = _control(args, sc)
    report = fmp_iterate(backend, u0, sc.algorithm)
    run.add(write_rows(run.out / "ledger.csv",
                       ["iter", "accepted", "cost", "alpha", "diam_pi", "mass_loss_mu", "mass_loss_nu"],
                       report.ledger_rows()))
    run.add(write_control_csv(run.out / "control.csv", report.final_control))
    names = [p.name for p in sc.populations]
    final, losses = backend.final(report.final_control)
    n = sc.time_grid.n_steps
    for name, m0, mT in zip(names, backend.initial(), final):
        run.add(_write_measure(run.out / f"{name}_t{0}", m0))
        run.add(_write_measure(run.out / f"{name}_t{n}", mT))
    run.results = {
        "status": report.status,
        "initial_cost": report.initial_cost,
        "final_cost": report.final_cost,
        "accepted": len(report.accepted),
        "trials": len(report.iterates),
        "mass_loss": [float(v) for v in losses],
        "initial_means": _mean_summary(backend.initial(), names),
        "final_means": _mean_summary(final, names),
    }
    print(f"{sc.name}: cost {report.initial_cost:.10g} -> {report.final_cost:.10g} "
          f"({len(report.accepted)} accepted of {len(report.iterates)} trials, {report.status})")


def cmd_simulate(args, sc: Scenario, run: Run) -> None:
    backend = sc.make_backend(run.backend)
    signal = _control(args, sc)
    trajs = backend.simulate(signal, keep=sc.frame_stride)
    for pop, traj in zip(sc.populations, trajs):
        for idx in traj.indices:
            run.add(_write_measure(run.out / f"{pop.name}_t{idx}", traj.frame(idx)))
    finals = [t.final for t in trajs]
    run.results = {
        "cost": backend.terminal_cost(finals),
        "mass_loss": [float(t.mass_loss) for t in trajs],
        "final_means": _mean_summary(finals, [p.name for p in sc.populations]),
    }
    print(f"{sc.name}: terminal cost {run.results['cost']:.10g}")


def cmd_check_pmp(args, sc: Scenario, run: Run) -> None:
    backend = sc.make_backend(run.backend)
    signal = _control(args, sc)
    trajs = backend.simulate(signal)
    duals = backend.duals(signal)
    res = pmp_residual(signal, trajs, duals, backend.problem.families, sc.control_set)
    header = ["t", "residual"] + [f"sigma_{k + 1}" for k in range(sc.control_set.m)]
    run.add(write_rows(run.out / "residual.csv", header, res.rows()))
    run.results = {"residual_max": res.residual_max, "residual_L1": res.residual_L1}
    print(f"{sc.name}: residual_max {res.residual_max:.3e}, residual_L1 {res.residual_L1:.3e}")


def cmd_ingest(args, sc: Scenario | None, run: Run) -> None:
    if args.image:
        raster = load_raster(args.image, args.index)
        m = image_to_measure(raster, args.threshold)
        run.add(write_empirical_csv(run.out / f"{Path(args.image).stem}_{args.index}.csv", m))
        run.results = {"atoms": int(m.points.shape[0])}
        return
    count = 0
    for pop in sc.populations:
        m = sc._initial_measure(pop)
        if isinstance(m, GridMeasure) or pop.kind in ("image", "empirical-csv"):
            path = _write_measure(run.out / pop.name, m)
            run.add(path)
            count += 1
    run.results = {"populations": count}


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "check-pmp": cmd_check_pmp, "ingest": cmd_ingest}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="measure-steer", description="Feedback control of measure transport.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--scenario", required=False, help="scenario file or built-in name")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--backend", choices=["grid", "particles"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--control", type=Path, default=None, help="control CSV (t_start,t_end,u1..um)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a scenario value (repeatable)")
    p.add_argument("--image", type=Path, default=None, help="ingest: IDX or PGM image file")
    p.add_argument("--index", type=int, default=0, help="ingest: image index inside an IDX stack")
    p.add_argument("--threshold", type=float, default=0.0, help="ingest: intensity threshold")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(args.overrides)
        if args.seed is not None:
            overrides["problem.seed"] = str(args.seed)
        if args.scenario is None:
            if args.command != "ingest" or args.image is None:
                raise ValidationError("--scenario is required")
            sc = load_scenario("example1")
        else:
            sc = load_scenario(args.scenario, overrides)
        out = args.out or sc.out_dir or Path("runs") / sc.name
        backend = args.backend or sc.backend
        if backend == "grid":
            for w in sc.warnings:
                log.warning(w)
        extra = {"control_file": None if args.control is None else str(args.control)}
        run = Run(args.command, sc, Path(out), backend, extra)
        COMMANDS[args.command](args, sc, run)
        run.manifest()
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, MeasureSteerError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
