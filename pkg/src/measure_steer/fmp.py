"""Feedback-based control improvement: sampling schemes and the iteration loop.

A feedback law maps ``(t, measures)`` to a control. Sampling it on a
partition (hold the value over each cell, advance, re-evaluate) produces a
polygonal arc and a piecewise-constant open-loop control. The loop keeps a
reference control, builds extremal feedbacks from its duals, and accepts a
sampled control whenever its cost is lower by more than ``eps1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AlphaOutOfRange
from .pmp import FeedbackLaw
from .signals import ControlSignal, Partition, TimeGrid

log = logging.getLogger(__name__)


@dataclass
class SampledArc:
    control: ControlSignal
    node_times: np.ndarray
    node_measures: list
    cost: float
    mass_loss: list[float]

    @property
    def terminal(self):
        return self.node_measures[-1]


class OpenLoopLaw:
    """Feedback that ignores the measure and replays a signal."""

    def __init__(self, signal: ControlSignal):
        self.signal = signal

    def __call__(self, t, measures):
        return np.array(self.signal(t))


class LocalizedLaw:
    def __init__(self, reference: ControlSignal, law: Callable, alpha: float):
        self.reference = reference
        self.law = law
        self.alpha = alpha

    def __call__(self, t, measures):
        return self.alpha * np.asarray(self.reference(t)) + (1.0 - self.alpha) * np.asarray(self.law(t, measures))


def localized_law(reference_u: ControlSignal, law: Callable, alpha: float) -> LocalizedLaw:
    """Blend ``alpha * reference(t) + (1 - alpha) * law(t, mu)``; ``alpha`` in (0, 1]."""
    if not 0.0 < alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in (0, 1], got {alpha}")
    return LocalizedLaw(reference_u, law, alpha)


def _node_indices(tg: TimeGrid, partition: Partition) -> list[int]:
    return [tg.index_of(t) for t in partition.nodes]


def sample_u_feedback(law: Callable, initial: Sequence, partition: Partition, backend) -> SampledArc:
    """Hold ``law(t_k, mu_k)`` constant on each partition cell and advance."""
    tg = backend.tg
    idx = _node_indices(tg, partition)
    measures = list(initial)
    nodes = [measures]
    values = []
    lost = np.zeros(len(measures))
    for k in range(partition.K):
        u = np.asarray(law(partition.nodes[k], measures), dtype=float)
        values.append(u)
        measures, loss = backend.advance(measures, u, idx[k], idx[k + 1])
        lost += loss
        nodes.append(measures)
    control = ControlSignal(partition, np.array(values))
    return SampledArc(control, partition.nodes.copy(), nodes, backend.terminal_cost(measures), list(lost))


def sample_ou_feedback(law: Callable, initial: Sequence, partition: Partition, backend) -> SampledArc:
    """Piecewise open-loop sampling: on each cell the law is re-evaluated at every
    time-grid node, always with the measure frozen at the cell's start."""
    tg = backend.tg
    idx = _node_indices(tg, partition)
    measures = list(initial)
    nodes = [measures]
    values, fine_nodes = [], [tg.time(idx[0])]
    lost = np.zeros(len(measures))
    for k in range(partition.K):
        frozen = measures
        for n in range(idx[k], idx[k + 1]):
            u = np.asarray(law(tg.time(n), frozen), dtype=float)
            values.append(u)
            fine_nodes.append(tg.time(n + 1))
            measures, loss = backend.advance(measures, u, n, n + 1)
            lost += loss
        nodes.append(measures)
    control = ControlSignal(Partition(np.array(fine_nodes)), np.array(values))
    return SampledArc(control, partition.nodes.copy(), nodes, backend.terminal_cost(measures), list(lost))


SAMPLERS = {"u": sample_u_feedback, "ou": sample_ou_feedback}


@dataclass
class FmpParams:
    eps1: float | None = None
    eps2: float | None = None
    alphas: Sequence[float] = (0.75, 0.5, 0.25, 0.0)
    explores: Sequence = (1, -1)
    max_outer: int = 30
    intervals: int = 20
    scheme: str = "u"

    def improvement_threshold(self, ref_cost: float) -> float:
        return self.eps1 if self.eps1 is not None else 1e-8 * (1.0 + abs(ref_cost))


@dataclass
class FmpIterate:
    iteration: int
    control: ControlSignal
    cost: float
    reference_cost: float
    accepted: bool
    alpha: float
    explore: object
    diam: float
    mass_loss: list[float]
    terminal: list = field(repr=False, default_factory=list)


@dataclass
class Qualification:
    holds: bool
    best_violation: float
    witnesses: list = field(default_factory=list)


@dataclass
class FmpReport:
    initial_control: ControlSignal
    initial_cost: float
    iterates: list[FmpIterate]
    final_control: ControlSignal
    final_cost: float
    status: str
    qualification: Qualification

    @property
    def accepted(self) -> list[FmpIterate]:
        return [it for it in self.iterates if it.accepted]

    def ledger_rows(self):
        for it in self.iterates:
            losses = list(it.mass_loss) + [0.0] * (2 - len(it.mass_loss))
            yield (it.iteration, int(it.accepted), it.cost, it.alpha, it.diam, losses[0], losses[1])


def partition_levels(tg: TimeGrid, intervals: int, eps2: float | None) -> list[Partition]:
    """Partitions tried per schedule entry: halve the diameter while it is >= eps2."""
    part = tg.partition(intervals)
    eps2 = part.diam / 2 if eps2 is None else eps2
    levels = [part]
    k = part.K
    while part.diam >= eps2 * (1 - 1e-9) and 2 * k <= tg.n_steps:
        k *= 2
        part = tg.partition(k)
        levels.append(part)
    return levels


def build_law(backend, duals, reference: ControlSignal, alpha: float, explore) -> Callable:
    problem = backend.problem
    law = FeedbackLaw(duals, problem.families, problem.control_set, reference=reference, explore=explore)
    if alpha > 0:
        return localized_law(reference, law, alpha)
    return law


def _dual_keep(tg: TimeGrid, levels: list[Partition], scheme: str):
    if scheme == "ou":
        return None
    keep = set()
    for p in levels:
        keep.update(_node_indices(tg, p))
    return sorted(keep)


def fmp_iterate(backend, u_bar: ControlSignal, params: FmpParams | None = None, on_iterate=None) -> FmpReport:
    """Iterate feedback improvements of ``u_bar`` until the trial schedule is
    exhausted (no tried feedback improves the reference) or ``max_outer``
    trials have run.

    Trial order per reference: for each ``(alpha, explore)`` pair, sample on
    the starting partition and its halvings (while the diameter is at least
    ``eps2``), then move to the next pair. An accepted trial becomes the new
    reference and restarts the schedule.
    """
    params = params or FmpParams()
    tg = backend.tg
    sampler = SAMPLERS[params.scheme]
    levels = partition_levels(tg, params.intervals, params.eps2)
    keep = _dual_keep(tg, levels, params.scheme)
    schedule = [(float(a), e) for a in params.alphas for e in params.explores]

    initial = backend.initial()
    final_measures, _ = backend.final(u_bar)
    ref_cost = backend.terminal_cost(final_measures)
    start_u, start_cost = u_bar, ref_cost
    duals = backend.duals(u_bar, keep=keep)

    iterates: list[FmpIterate] = []
    entry, level = 0, 0
    best_violation = np.inf
    while True:
        if entry >= len(schedule):
            status = "exhausted"
            break
        if len(iterates) >= params.max_outer:
            status = "max_outer"
            break
        alpha, explore = schedule[entry]
        part = levels[level]
        law = build_law(backend, duals, u_bar, alpha, explore)
        arc = sampler(law, initial, part, backend)
        eps1 = params.improvement_threshold(ref_cost)
        accepted = arc.cost - ref_cost < -eps1
        it = FmpIterate(len(iterates) + 1, arc.control, arc.cost, ref_cost, accepted,
                        alpha, explore, part.diam, arc.mass_loss, arc.terminal)
        iterates.append(it)
        log.info("trial %d: cost %.12g (reference %.12g) alpha=%g explore=%s diam=%g -> %s",
                 it.iteration, arc.cost, ref_cost, alpha, explore, part.diam,
                 "accepted" if accepted else "rejected")
        if on_iterate is not None:
            on_iterate(it)
        if accepted:
            u_bar, ref_cost = arc.control, arc.cost
            duals = backend.duals(u_bar, keep=keep)
            entry, level = 0, 0
            best_violation = np.inf
        else:
            best_violation = min(best_violation, arc.cost - ref_cost)
            if level + 1 < len(levels):
                level += 1
            else:
                entry, level = entry + 1, 0

    qual = Qualification(status == "exhausted", float(best_violation))
    return FmpReport(start_u, start_cost, iterates, u_bar, ref_cost, status, qual)


@dataclass
class Trial:
    """One feedback to test against a reference: an extremal selection
    (``alpha``, ``explore``) or an explicit ``law``, sampled on ``partition``."""

    name: str
    partition: Partition
    alpha: float = 0.0
    explore: object = None
    law: Callable | None = None
    scheme: str = "u"


@dataclass
class Witness:
    trial: str
    diam: float
    cost: float
    control: ControlSignal = field(repr=False, default=None)


def qualification_check(backend, u_bar: ControlSignal, trials: Sequence[Trial], eps1: float | None = None,
                        duals=None) -> Qualification:
    """Run every trial against ``u_bar``; each one that lowers the cost by more
    than ``eps1`` is a witness of non-optimality. No witnesses means the trial
    set did not refute optimality, which proves nothing stronger."""
    if not trials:
        raise ValueError("qualification_check needs at least one trial")
    final_measures, _ = backend.final(u_bar)
    ref_cost = backend.terminal_cost(final_measures)
    eps1 = FmpParams(eps1=eps1).improvement_threshold(ref_cost)
    if duals is None and any(tr.law is None for tr in trials):
        duals = backend.duals(u_bar)
    initial = backend.initial()
    witnesses, best = [], np.inf
    for tr in trials:
        law = tr.law if tr.law is not None else build_law(backend, duals, u_bar, tr.alpha, tr.explore)
        arc = SAMPLERS[tr.scheme](law, initial, tr.partition, backend)
        gap = arc.cost - ref_cost
        best = min(best, gap)
        if gap < -eps1:
            witnesses.append(Witness(tr.name, tr.partition.diam, arc.cost, arc.control))
    return Qualification(not witnesses, float(best), witnesses)


__all__ = [
    "SampledArc",
    "OpenLoopLaw",
    "LocalizedLaw",
    "localized_law",
    "sample_u_feedback",
    "sample_ou_feedback",
    "FmpParams",
    "FmpIterate",
    "FmpReport",
    "Qualification",
    "Trial",
    "Witness",
    "fmp_iterate",
    "qualification_check",
    "partition_levels",
]
