"""Particle backend: characteristic flows of the controlled ODE and push-forwards.

Controls are piecewise constant, so each control cell is integrated on its
own uniform RK4 lattice. Flows between arbitrary times walk the same lattice
with partial steps at the ends, which keeps ``X_{s->r} = X_{t->r} o X_{s->t}``
true up to one split step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFinite, ValidationError
from .fields import ControlFamily, ScalarField, eval_controlled
from .measures import EmpiricalMeasure
from .signals import ControlSignal, TimeGrid
from .transport import Trajectory

BLOWUP = 1e12


@dataclass(frozen=True, eq=False)
class FlowMap:
    family: ControlFamily
    signal: ControlSignal
    steps_per_interval: int = 4
    max_step: float | None = 0.02
    scheme: str = "rk4"

    def __post_init__(self):
        if self.scheme not in ("rk4", "euler"):
            raise ValidationError(f"unknown integrator {self.scheme!r}")
        if self.steps_per_interval < 1:
            raise ValidationError("steps_per_interval must be positive")

    def lattice(self, k: int) -> np.ndarray:
        nodes = self.signal.partition.nodes
        p0, p1 = nodes[k], nodes[k + 1]
        n = self.steps_per_interval
        if self.max_step:
            n = max(n, math.ceil((p1 - p0) / self.max_step - 1e-9))
        lat = p0 + (p1 - p0) * np.arange(n + 1) / n
        lat[-1] = p1
        return lat

    def pieces(self, t_from: float, t_to: float):
        """``(times, control)`` pieces covering ``[t_from, t_to]`` in integration order."""
        part = self.signal.partition
        tol = 1e-12 * max(1.0, abs(part.T))
        lo, hi = min(t_from, t_to), max(t_from, t_to)
        if lo < part.t0 - tol or hi > part.T + tol:
            raise ValidationError(f"[{lo}, {hi}] leaves the control horizon [{part.t0}, {part.T}]")
        out = []
        if hi - lo <= tol:
            return out
        for k in range(part.K):
            p0, p1 = part.nodes[k], part.nodes[k + 1]
            if p1 <= lo + tol or p0 >= hi - tol:
                continue
            s, e = max(p0, lo), min(p1, hi)
            lat = self.lattice(k)
            inner = lat[(lat > s + tol) & (lat < e - tol)]
            out.append((np.concatenate([[s], inner, [e]]), self.signal.values[k]))
        if t_to < t_from:
            out = [(ts[::-1], u) for ts, u in reversed(out)]
        return out


def _step(cf, u, x, dt, scheme):
    if scheme == "euler":
        return x + dt * eval_controlled(cf, u, x)
    k1 = eval_controlled(cf, u, x)
    k2 = eval_controlled(cf, u, x + 0.5 * dt * k1)
    k3 = eval_controlled(cf, u, x + 0.5 * dt * k2)
    k4 = eval_controlled(cf, u, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def flow(fm: FlowMap, x0, t_from: float, t_to: float) -> np.ndarray:
    """``X_{t_from -> t_to}(x0)`` for one point ``(n,)`` or a batch ``(N, n)``.

    Backward flows integrate the ODE with reversed time.
    """
    x = np.array(x0, dtype=float)
    for ts, u in fm.pieces(t_from, t_to):
        for t0, t1 in zip(ts[:-1], ts[1:]):
            x = _step(fm.family, u, x, t1 - t0, fm.scheme)
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > BLOWUP):
            raise NonFinite(f"characteristic left the finite range near t={ts[-1]}")
    return x


def pushforward(fm: FlowMap, m: EmpiricalMeasure, t_from: float, t_to: float) -> EmpiricalMeasure:
    return m.with_points(flow(fm, m.points, t_from, t_to))


def simulate(fm: FlowMap, m: EmpiricalMeasure, tg: TimeGrid, keep: int | Iterable[int] | None = None) -> Trajectory:
    """Push ``m`` node by node along ``tg``; ``keep`` works as in ``solve_forward``."""
    if keep is None:
        wanted = None
    elif isinstance(keep, int):
        wanted = set(range(0, tg.n_steps + 1, max(1, keep))) | {tg.n_steps}
    else:
        wanted = set(keep) | {0, tg.n_steps}
    times = tg.times
    frames, idx = [m], [0]
    cur = m.points
    for n in range(tg.n_steps):
        cur = flow(fm, cur, times[n], times[n + 1])
        if wanted is None or n + 1 in wanted:
            frames.append(m.with_points(cur))
            idx.append(n + 1)
    return Trajectory(tg, tuple(idx), tuple(frames), 0.0)


@dataclass(frozen=True, eq=False)
class EnsembleState:
    populations: dict[str, EmpiricalMeasure]
    time: float = 0.0

    def __post_init__(self):
        for name, m in self.populations.items():
            if abs(m.weights.sum() - 1.0) > 1e-12:
                raise ValidationError(f"population {name!r} weights do not sum to 1")


def ensemble_cost(final: EnsembleState | Sequence[EmpiricalMeasure], costs: Sequence[Callable]) -> float:
    """``sum_pop sum_i w_i cost_pop(x_i)``."""
    measures = list(final.populations.values()) if isinstance(final, EnsembleState) else list(final)
    if len(measures) != len(costs):
        raise ValidationError(f"{len(measures)} populations but {len(costs)} costs")
    total = 0.0
    for m, cost in zip(measures, costs):
        vals = np.asarray(cost(m.points), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NonFinite("terminal cost is not finite at some atom")
        total += float(m.weights @ vals)
    return total


def dual_at_points(fm: FlowMap, cost: Callable, t: float, probes) -> np.ndarray:
    """``p_t(x) = -cost(X_{t -> T}(x))`` at each probe."""
    pts = np.atleast_2d(np.asarray(probes, dtype=float))
    return -np.asarray(cost(flow(fm, pts, t, fm.signal.partition.T)), dtype=float)


@dataclass(frozen=True, eq=False)
class CharacteristicDual:
    """Dual state represented through characteristics, differentiated numerically.

    The gradient is a central difference of ``x -> -cost(X_{t->T}(x))`` with
    step ``rel_step * (1 + |x|)``, evaluated in one batched flow.
    """

    flow_map: FlowMap
    cost: Callable
    rel_step: float = 1e-6

    @property
    def T(self) -> float:
        return self.flow_map.signal.partition.T

    def value(self, t: float, points) -> np.ndarray:
        return dual_at_points(self.flow_map, self.cost, t, points)

    def gradient(self, t: float, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        n_pts, dim = x.shape
        step = self.rel_step * (1.0 + np.linalg.norm(x, axis=1))
        offsets = np.concatenate([np.eye(dim), -np.eye(dim)])
        probes = (x[None, :, :] + offsets[:, None, :] * step[None, :, None]).reshape(-1, dim)
        vals = -np.asarray(self.cost(flow(self.flow_map, probes, t, self.T)), dtype=float)
        vals = vals.reshape(2 * dim, n_pts)
        return ((vals[:dim] - vals[dim:]) / (2 * step[None, :])).T

    def grad(self, t: float) -> Callable:
        return lambda pts: self.gradient(t, pts)


__all__ = [
    "FlowMap",
    "EnsembleState",
    "CharacteristicDual",
    "flow",
    "pushforward",
    "simulate",
    "ensemble_cost",
    "dual_at_points",
]
