"""Problem description and the two interchangeable solver backends."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .fields import ControlFamily, ControlSet, ScalarField, VectorField
from .measures import EmpiricalMeasure, GridMeasure, GridSpec, empirical_to_grid, grid_to_empirical
from .particles import CharacteristicDual, FlowMap, flow, simulate
from .pmp import GridDual
from .signals import ControlSignal, TimeGrid
from .transport import (
    Trajectory,
    cost_on_grid,
    march_density,
    solve_dual_backward,
    solve_forward,
    velocity_tables,
)


@dataclass(eq=False)
class Population:
    name: str
    initial: GridMeasure | EmpiricalMeasure
    cost: ScalarField
    drift: VectorField | None = None


@dataclass(eq=False)
class Problem:
    """Ensemble control problem: populations share one control family and box."""

    populations: list[Population]
    basis: Sequence[VectorField]
    control_set: ControlSet
    time_grid: TimeGrid
    grid: GridSpec | None = None
    n_particles: int = 2000
    seed: int = 0
    families: list[ControlFamily] = field(init=False)

    def __post_init__(self):
        if not 1 <= len(self.populations) <= 2:
            raise ValidationError("one or two populations are supported")
        self.basis = tuple(self.basis)
        if len(self.basis) != self.control_set.m:
            raise ValidationError(f"{len(self.basis)} basis fields but U has {self.control_set.m} components")
        self.families = [ControlFamily(self.basis, p.drift) for p in self.populations]

    @property
    def horizon(self) -> float:
        return self.time_grid.T

    @property
    def m(self) -> int:
        return self.control_set.m


class GridBackend:
    name = "grid"

    def __init__(self, problem: Problem):
        if problem.grid is None:
            raise ValidationError("grid backend needs a grid specification")
        self.problem = problem
        self.spec = problem.grid
        self.tg = problem.time_grid
        self._initial = [
            p.initial if isinstance(p.initial, GridMeasure) else empirical_to_grid(p.initial, self.spec)
            for p in problem.populations
        ]
        for m in self._initial:
            if m.spec != self.spec:
                raise ValidationError("initial grid measure is on a different grid than the problem")
        self._costs = [cost_on_grid(p.cost, self.spec) for p in problem.populations]
        self._tables = [velocity_tables(cf, self.spec) for cf in problem.families]

    def initial(self) -> list[GridMeasure]:
        return list(self._initial)

    def advance(self, measures, u, i0: int, i1: int):
        out, lost = [], []
        for m, tables in zip(measures, self._tables):
            d, loss = march_density(np.array(m.density), tables, u, self.tg.tau, i1 - i0)
            out.append(GridMeasure(self.spec, d))
            lost.append(loss)
        return out, lost

    def terminal_cost(self, measures) -> float:
        return float(sum(np.sum(m.cell_masses * c) for m, c in zip(measures, self._costs)))

    def simulate(self, signal: ControlSignal, keep=None) -> list[Trajectory]:
        return [solve_forward(m, cf, signal, self.tg, keep=keep)
                for m, cf in zip(self._initial, self.problem.families)]

    def final(self, signal: ControlSignal):
        trajs = self.simulate(signal, keep=())
        return [t.final for t in trajs], [t.mass_loss for t in trajs]

    def duals(self, signal: ControlSignal, keep=None) -> list[GridDual]:
        return [GridDual(solve_dual_backward(c, cf, signal, self.tg, self.spec, keep=keep))
                for c, cf in zip(self._costs, self.problem.families)]


class ParticleBackend:
    name = "particles"

    def __init__(self, problem: Problem, steps_per_interval: int = 4, max_step: float | None = 0.02):
        self.problem = problem
        self.tg = problem.time_grid
        self.steps_per_interval = steps_per_interval
        self.max_step = max_step
        self._initial = [
            p.initial if isinstance(p.initial, EmpiricalMeasure)
            else grid_to_empirical(p.initial, problem.n_particles, problem.seed + i)
            for i, p in enumerate(problem.populations)
        ]
        self._costs = [p.cost for p in problem.populations]

    def flow_map(self, family: ControlFamily, signal: ControlSignal) -> FlowMap:
        return FlowMap(family, signal, self.steps_per_interval, self.max_step)

    def initial(self) -> list[EmpiricalMeasure]:
        return list(self._initial)

    def advance(self, measures, u, i0: int, i1: int):
        t0, t1 = self.tg.time(i0), self.tg.time(i1)
        piece = ControlSignal.constant(u, t1, t0)
        out = [m.with_points(flow(self.flow_map(cf, piece), m.points, t0, t1))
               for m, cf in zip(measures, self.problem.families)]
        return out, [0.0] * len(out)

    def terminal_cost(self, measures) -> float:
        return float(sum(m.weights @ np.asarray(c(m.points)) for m, c in zip(measures, self._costs)))

    def simulate(self, signal: ControlSignal, keep=None) -> list[Trajectory]:
        return [simulate(self.flow_map(cf, signal), m, self.tg, keep=keep)
                for m, cf in zip(self._initial, self.problem.families)]

    def final(self, signal: ControlSignal):
        t0, T = self.tg.t0, self.tg.T
        out = [m.with_points(flow(self.flow_map(cf, signal), m.points, t0, T))
               for m, cf in zip(self._initial, self.problem.families)]
        return out, [0.0] * len(out)

    def duals(self, signal: ControlSignal, keep=None) -> list[CharacteristicDual]:
        merged = signal.merged()
        return [CharacteristicDual(self.flow_map(cf, merged), c)
                for c, cf in zip(self._costs, self.problem.families)]


def make_backend(problem: Problem, name: str):
    if name == "grid":
        return GridBackend(problem)
    if name in ("particles", "particle"):
        return ParticleBackend(problem)
    raise ValidationError(f"unknown backend {name!r} (expected grid or particles)")
