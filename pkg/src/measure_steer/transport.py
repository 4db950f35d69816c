"""Grid backend: donor-cell upwind transport of densities and backward dual transport.

Densities live at cell centers; the forward scheme is conservative with
velocities sampled at face midpoints and zero ghost cells (mass leaving the
box is lost and reported). The dual march is the non-conservative upwind
scheme for ``dp/dt + w . grad p = 0`` run backward from ``p_T = -cost``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Iterable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import CflViolation, GridTooSmall, IncompatibleGrids
from .fields import ControlFamily, ScalarField
from .measures import GridMeasure, GridSpec
from .signals import ControlSignal, TimeGrid

MAX_SUBSTEP_LEVEL = 10


class VelocityTables:
    """Drift and basis fields pre-sampled at face midpoints and cell centers."""

    def __init__(self, cf: ControlFamily, spec: GridSpec):
        if cf.dim != 2:
            raise IncompatibleGrids("grid backend needs planar fields")
        self.spec = spec
        ha, hb = spec.h
        na, nb = spec.cells
        a_faces = spec.domain_min[0] + ha * np.arange(na + 1)
        b_faces = spec.domain_min[1] + hb * np.arange(nb + 1)
        pa = np.stack(np.meshgrid(a_faces, spec.centers_b, indexing="ij"), axis=-1)
        pb = np.stack(np.meshgrid(spec.centers_a, b_faces, indexing="ij"), axis=-1)
        pc = np.stack(spec.mesh, axis=-1)
        self.drift_a = cf.drift_values(pa)[..., 0]
        self.drift_b = cf.drift_values(pb)[..., 1]
        self.drift_c = cf.drift_values(pc)
        self.basis_a = cf.basis_values(pa)[..., 0]
        self.basis_b = cf.basis_values(pb)[..., 1]
        self.basis_c = cf.basis_values(pc)
        self._last = {}

    def faces(self, u) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=float)
        key = ("f", u.tobytes())
        if key not in self._last:
            wa = self.drift_a + np.tensordot(u, self.basis_a, axes=1)
            wb = self.drift_b + np.tensordot(u, self.basis_b, axes=1)
            self._last = {key: (wa, wb)}
        return self._last[key]

    def centers(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.drift_c + np.tensordot(u, self.basis_c, axes=1)


@lru_cache(maxsize=32)
def velocity_tables(cf: ControlFamily, spec: GridSpec) -> VelocityTables:
    return VelocityTables(cf, spec)


def cfl_number(wa: np.ndarray, wb: np.ndarray, tau: float, h) -> float:
    """Largest fraction of a cell's mass leaving it in one step.

    Donor-cell output stays nonnegative exactly when this is at most one; for
    a constant field it equals ``tau * (|w_a|/h_a + |w_b|/h_b)``.
    """
    ha, hb = h
    out_a = np.maximum(wa[1:], 0) - np.minimum(wa[:-1], 0)
    out_b = np.maximum(wb[:, 1:], 0) - np.minimum(wb[:, :-1], 0)
    return float(tau * np.max(out_a / ha + out_b / hb))


def _donor_cell(d, wa, wb, tau, ha, hb):
    fa = np.zeros_like(wa)
    fa[1:] += np.maximum(wa[1:], 0) * d
    fa[:-1] += np.minimum(wa[:-1], 0) * d
    fb = np.zeros_like(wb)
    fb[:, 1:] += np.maximum(wb[:, 1:], 0) * d
    fb[:, :-1] += np.minimum(wb[:, :-1], 0) * d
    new = d - (tau / ha) * (fa[1:] - fa[:-1]) - (tau / hb) * (fb[:, 1:] - fb[:, :-1])
    outflow = tau * (hb * (fa[-1].sum() - fa[0].sum()) + ha * (fb[:, -1].sum() - fb[:, 0].sum()))
    # rounding can leave -1e-17 where a cell empties completely
    np.maximum(new, 0.0, out=new)
    return new, float(outflow)


def _substeps(cfl: float, limit: float = 1.0) -> int:
    if cfl <= limit:
        return 1
    level = math.ceil(math.log2(cfl / limit))
    if level > MAX_SUBSTEP_LEVEL:
        raise CflViolation(cfl, limit)
    return 2**level


def advance_density(rho: GridMeasure, wa, wb, tau: float) -> GridMeasure:
    """One donor-cell step with face velocities ``wa`` (na+1, nb) and ``wb`` (na, nb+1)."""
    spec = rho.spec
    na, nb = spec.cells
    wa = np.asarray(wa, dtype=float)
    wb = np.asarray(wb, dtype=float)
    if wa.shape != (na + 1, nb) or wb.shape != (na, nb + 1):
        raise IncompatibleGrids(f"face velocities {wa.shape}, {wb.shape} do not fit grid {spec.cells}")
    c = cfl_number(wa, wb, tau, spec.h)
    if c > 1.0:
        raise CflViolation(c, 1.0)
    new, _ = _donor_cell(rho.density, wa, wb, tau, *spec.h)
    return GridMeasure(spec, new)


def boundary_outflow(rho: GridMeasure, wa, wb, tau: float) -> float:
    """Mass that one donor-cell step pushes through the box boundary."""
    _, out = _donor_cell(rho.density, np.asarray(wa, float), np.asarray(wb, float), tau, *rho.spec.h)
    return out


def march_density(d: np.ndarray, tables: VelocityTables, u, tau: float, n_steps: int = 1):
    """Advance a raw density array ``n_steps`` steps under constant control ``u``.

    Steps whose CFL number exceeds one are split into ``2**k`` equal substeps.
    Returns the new array and the mass lost through the boundary.
    """
    h = tables.spec.h
    wa, wb = tables.faces(u)
    nsub = _substeps(cfl_number(wa, wb, tau, h))
    dt = tau / nsub
    lost = 0.0
    for _ in range(n_steps * nsub):
        d, out = _donor_cell(d, wa, wb, dt, *h)
        lost += out
    return d, lost


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Measures stored at selected nodes of a time grid."""

    time_grid: TimeGrid
    indices: tuple[int, ...]
    frames: tuple
    mass_loss: float = 0.0

    def frame(self, index: int):
        try:
            return self.frames[self.indices.index(index)]
        except ValueError:
            raise KeyError(f"node {index} was not stored") from None

    def at_time(self, t: float):
        return self.frame(self.time_grid.index_of(t))

    @property
    def initial(self):
        return self.frames[0]

    @property
    def final(self):
        return self.frames[-1]

    @property
    def times(self) -> np.ndarray:
        return np.array([self.time_grid.time(i) for i in self.indices])


DensityTrajectory = Trajectory


def _keep_set(tg: TimeGrid, keep) -> set[int] | None:
    if keep is None:
        return None
    if isinstance(keep, int):
        s = set(range(0, tg.n_steps + 1, max(1, keep)))
    else:
        s = {int(i) for i in keep}
    return s | {0, tg.n_steps}


def solve_forward(theta: GridMeasure, cf: ControlFamily, u: ControlSignal, tg: TimeGrid,
                  keep: int | Iterable[int] | None = None) -> Trajectory:
    """Donor-cell solution of the controlled continuity equation.

    Step ``n`` uses the control value at the step midpoint. ``keep`` selects
    stored frames: ``None`` keeps every node, an int keeps every ``keep``-th,
    an iterable keeps those node indices; endpoints are always kept.
    """
    tables = velocity_tables(cf, theta.spec)
    wanted = _keep_set(tg, keep)
    times = tg.times
    d = np.array(theta.density)
    frames, idx = [theta], [0]
    lost = 0.0
    for n in range(tg.n_steps):
        uval = u(0.5 * (times[n] + times[n + 1]))
        d, out = march_density(d, tables, uval, tg.tau)
        lost += out
        if wanted is None or n + 1 in wanted:
            frames.append(GridMeasure(theta.spec, d))
            idx.append(n + 1)
    return Trajectory(tg, tuple(idx), tuple(frames), lost)


@dataclass(frozen=True, eq=False)
class GridVectorField:
    """Vector field stored at cell centers, shape ``(na, nb, 2)``."""

    spec: GridSpec
    values: np.ndarray

    @cached_property
    def _interp(self):
        return RegularGridInterpolator(
            (self.spec.centers_a, self.spec.centers_b), self.values,
            method="linear", bounds_error=False, fill_value=None,
        )

    def at(self, points) -> np.ndarray:
        """Bilinear interpolation (linear extrapolation outside the centers' hull)."""
        return self._interp(np.atleast_2d(points))


def gradient_field(p: np.ndarray, spec: GridSpec) -> GridVectorField:
    """Central differences inside, second-order one-sided differences on boundary cells."""
    p = np.asarray(p, dtype=float)
    if p.shape != spec.shape:
        raise IncompatibleGrids(f"field shape {p.shape} does not match grid {spec.shape}")
    if min(spec.cells) < 3:
        raise GridTooSmall("gradient_field needs at least 3 cells per axis")
    ga, gb = np.gradient(p, *spec.h, edge_order=2)
    return GridVectorField(spec, np.stack([ga, gb], axis=-1))


def _one_sided(p, axis, h):
    diff = np.diff(p, axis=axis) / h
    fwd = np.concatenate([diff, np.take(diff, [-1], axis=axis)], axis=axis)
    bwd = np.concatenate([np.take(diff, [0], axis=axis), diff], axis=axis)
    return fwd, bwd


def _dual_step(p, wa, wb, tau, ha, hb):
    fa, ba = _one_sided(p, 0, ha)
    fb, bb = _one_sided(p, 1, hb)
    ga = np.where(wa > 0, fa, ba)
    gb = np.where(wb > 0, fb, bb)
    return p + tau * (wa * ga + wb * gb)


@dataclass(frozen=True, eq=False)
class DualState:
    """Backward solution ``p`` of the dual transport equation at stored nodes."""

    spec: GridSpec
    time_grid: TimeGrid
    indices: tuple[int, ...]
    frames: tuple[np.ndarray, ...]

    def frame(self, index: int) -> np.ndarray:
        """Frame at node ``index``, or at the nearest stored node."""
        pos = int(np.argmin(np.abs(np.asarray(self.indices) - index)))
        return self.frames[pos]

    def at_time(self, t: float) -> np.ndarray:
        k = int(round((t - self.time_grid.t0) / self.time_grid.tau))
        return self.frame(k)

    @property
    def terminal(self) -> np.ndarray:
        return self.frames[-1]


def cost_on_grid(cost: ScalarField | Callable | np.ndarray, spec: GridSpec) -> np.ndarray:
    if callable(cost):
        return np.asarray(cost(np.stack(spec.mesh, axis=-1)), dtype=float)
    arr = np.asarray(cost, dtype=float)
    if arr.shape != spec.shape:
        raise IncompatibleGrids(f"cost shape {arr.shape} does not match grid {spec.shape}")
    return arr


def solve_dual_backward(cost, cf: ControlFamily, u: ControlSignal, tg: TimeGrid, spec: GridSpec,
                        keep: int | Iterable[int] | None = None) -> DualState:
    """Upwind backward march of ``dp/dt + grad p . (drift + v_u) = 0`` with ``p_T = -cost``.

    Differences are one-sided toward the direction the characteristic comes
    from; boundary cells fall back to the interior one-sided difference.
    """
    if min(spec.cells) < 2:
        raise GridTooSmall("dual solver needs at least 2 cells per axis")
    tables = velocity_tables(cf, spec)
    ha, hb = spec.h
    wanted = _keep_set(tg, keep)
    times = tg.times
    p = -cost_on_grid(cost, spec)
    frames, idx = [p.copy()], [tg.n_steps]
    cache: dict = {}
    for n in range(tg.n_steps - 1, -1, -1):
        uval = np.asarray(u(0.5 * (times[n] + times[n + 1])), dtype=float)
        key = uval.tobytes()
        if key not in cache:
            wc = tables.centers(uval)
            wa, wb = wc[..., 0], wc[..., 1]
            c = tg.tau * float(np.max(np.abs(wa) / ha + np.abs(wb) / hb))
            cache = {key: (wa, wb, _substeps(c))}
        wa, wb, nsub = cache[key]
        dt = tg.tau / nsub
        for _ in range(nsub):
            p = _dual_step(p, wa, wb, dt, ha, hb)
        if wanted is None or n in wanted:
            frames.append(p.copy())
            idx.append(n)
    return DualState(spec, tg, tuple(reversed(idx)), tuple(reversed(frames)))
