"""Maximum-principle machinery for control-affine ensembles.

With ``v_u = sum_k u_k f_k`` the quantity maximized over ``U`` is linear in
the control, ``sigma . u``, where the switching vector is

    sigma_k = sum_pop  int grad p_pop . f_k  d mu_pop.

Everything here is expressed through that vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import IncompatibleGrids
from .fields import ControlFamily, ControlSet
from .measures import EmpiricalMeasure, GridMeasure
from .signals import ControlSignal
from .transport import DualState, GridVectorField, Trajectory, gradient_field, velocity_tables


class GridDual:
    """Grid dual state with gradients computed lazily per node."""

    def __init__(self, state: DualState):
        self.state = state
        self._cache: dict[int, GridVectorField] = {}

    def grad(self, t: float) -> GridVectorField:
        tg = self.state.time_grid
        k = int(round((t - tg.t0) / tg.tau))
        pos = int(np.argmin(np.abs(np.asarray(self.state.indices) - k)))
        if pos not in self._cache:
            self._cache[pos] = gradient_field(self.state.frames[pos], self.state.spec)
        return self._cache[pos]


def _switching_one(grad, mu, cf: ControlFamily) -> np.ndarray:
    if isinstance(mu, GridMeasure):
        spec = mu.spec
        if isinstance(grad, GridVectorField):
            if grad.spec != spec:
                raise IncompatibleGrids("dual gradient and measure live on different grids")
            g = grad.values
        else:
            g = np.asarray(grad(spec.center_points)).reshape(spec.shape + (2,))
        basis = velocity_tables(cf, spec).basis_c
        return np.einsum("kijd,ijd,ij->k", basis, g, mu.cell_masses)
    if isinstance(mu, EmpiricalMeasure):
        pts = mu.points
        g = grad.at(pts) if isinstance(grad, GridVectorField) else np.asarray(grad(pts))
        basis = cf.basis_values(pts)
        return np.einsum("knd,nd,n->k", basis, g, mu.weights)
    raise TypeError(f"unsupported measure type {type(mu).__name__}")


def switching_vector(grad_p, mu, cf: ControlFamily, grad_q=None, nu=None) -> np.ndarray:
    """``sigma_k = int grad p . f_k dmu (+ int grad q . f_k dnu)``.

    ``grad_p`` is a :class:`GridVectorField` (interpolated bilinearly at atoms
    of an empirical measure) or a callable ``points -> gradients``.
    """
    sigma = _switching_one(grad_p, mu, cf)
    if nu is not None:
        sigma = sigma + _switching_one(grad_q, nu, cf)
    return sigma


def default_tie_tolerance(sigma) -> float:
    return 1e-9 * (1.0 + float(np.max(np.abs(sigma), initial=0.0)))


def extremal_control(sigma, U: ControlSet, fallback, eps_tie: float | None = None, explore=None) -> np.ndarray:
    """Maximizer of ``sigma . u`` over the box, bang-bang per component.

    Components with ``|sigma_k| <= eps_tie`` are ties: they take ``fallback``
    unless ``explore`` is set, in which case ``+1`` picks the upper bound,
    ``-1`` the lower bound and ``0`` keeps the fallback.
    """
    sigma = np.asarray(sigma, dtype=float)
    tol = default_tie_tolerance(sigma) if eps_tie is None else eps_tie
    tie = np.broadcast_to(np.asarray(fallback, dtype=float), sigma.shape).copy()
    if explore is not None:
        e = np.broadcast_to(np.asarray(explore, dtype=float), sigma.shape)
        tie = np.where(e > 0, U.hi, np.where(e < 0, U.lo, tie))
    return np.where(sigma > tol, U.hi, np.where(sigma < -tol, U.lo, tie))


def support_value(sigma, U: ControlSet) -> float:
    """``max_{w in U} sigma . w``."""
    sigma = np.asarray(sigma, dtype=float)
    return float(np.sum(np.maximum(sigma * U.hi, sigma * U.lo)))


@dataclass
class FeedbackLaw:
    """Extremal ensemble feedback built from reference duals.

    Calling the law with a time and the current measures (one per population)
    returns a control in ``U`` maximizing ``sigma . u``; ties fall back to the
    reference control at that time, or to a bound when ``explore`` is set.
    """

    duals: Sequence
    families: Sequence[ControlFamily]
    control_set: ControlSet
    reference: ControlSignal | None = None
    explore: object = None
    eps_tie: float | None = None

    def switching(self, t: float, measures: Sequence) -> np.ndarray:
        sigma = np.zeros(self.control_set.m)
        for dual, mu, cf in zip(self.duals, measures, self.families):
            sigma = sigma + _switching_one(dual.grad(t), mu, cf)
        return sigma

    def __call__(self, t: float, measures: Sequence) -> np.ndarray:
        sigma = self.switching(t, measures)
        fallback = self.reference(t) if self.reference is not None else np.zeros(self.control_set.m)
        return extremal_control(sigma, self.control_set, fallback, self.eps_tie, self.explore)


@dataclass
class Residual:
    times: np.ndarray
    residual: np.ndarray
    sigma: np.ndarray
    residual_max: float = field(init=False)
    residual_L1: float = field(init=False)

    def __post_init__(self):
        self.residual_max = float(np.max(self.residual)) if self.residual.size else 0.0
        if self.times.size > 1:
            self.residual_L1 = float(np.sum(0.5 * np.diff(self.times) * (self.residual[1:] + self.residual[:-1])))
        else:
            self.residual_L1 = 0.0

    def rows(self):
        for t, r, s in zip(self.times, self.residual, self.sigma):
            yield (float(t), float(r), *map(float, s))


def _sigma_at(duals, trajectories: Sequence[Trajectory], families, index: int) -> np.ndarray:
    tg = trajectories[0].time_grid
    t = tg.time(index)
    sigma = 0.0
    for dual, traj, cf in zip(duals, trajectories, families):
        sigma = sigma + _switching_one(dual.grad(t), traj.frame(index), cf)
    return np.asarray(sigma, dtype=float)


def pmp_residual(u: ControlSignal, trajectories: Sequence[Trajectory], duals, families, U: ControlSet) -> Residual:
    """Gap ``max_w sigma(t) . w - sigma(t) . u(t)`` at every stored node.

    ``u`` is extremal on the grid iff the returned ``residual_max`` is zero up
    to tolerance; the gap is nonnegative by construction.
    """
    families = _as_families(families, len(trajectories))
    indices = trajectories[0].indices
    tg = trajectories[0].time_grid
    times, res, sig = [], [], []
    for k in indices:
        t = tg.time(k)
        s = _sigma_at(duals, trajectories, families, k)
        times.append(t)
        sig.append(s)
        res.append(max(support_value(s, U) - float(s @ u(t)), 0.0))
    return Residual(np.array(times), np.array(res), np.array(sig).reshape(len(times), U.m))


def cost_increment(reference_u: ControlSignal, reference_duals, candidate_u: ControlSignal,
                   candidate_trajectories: Sequence[Trajectory], families) -> float:
    """Predicted ``I[candidate] - I[reference]`` from the reference duals.

    Integrates ``sigma(t) . (u_ref(t) - u_cand(t))`` over time, with sigma
    taken against the candidate's measures. Each stored step is integrated by
    the trapezoid rule with the controls read at the step midpoint, which is
    exact when the controls are constant between stored nodes.
    """
    families = _as_families(families, len(candidate_trajectories))
    indices = candidate_trajectories[0].indices
    tg = candidate_trajectories[0].time_grid
    sig = {k: _sigma_at(reference_duals, candidate_trajectories, families, k) for k in indices}
    total = 0.0
    for k0, k1 in zip(indices[:-1], indices[1:]):
        t0, t1 = tg.time(k0), tg.time(k1)
        tm = 0.5 * (t0 + t1)
        du = reference_u(tm) - candidate_u(tm)
        total += 0.5 * (t1 - t0) * float((sig[k0] + sig[k1]) @ du)
    return total


def _as_families(families, n: int) -> list[ControlFamily]:
    if isinstance(families, ControlFamily):
        return [families] * n
    families = list(families)
    if len(families) != n:
        raise ValueError(f"{len(families)} families for {n} populations")
    return families


__all__ = [
    "GridDual",
    "FeedbackLaw",
    "Residual",
    "switching_vector",
    "extremal_control",
    "support_value",
    "pmp_residual",
    "cost_increment",
    "default_tie_tolerance",
]
