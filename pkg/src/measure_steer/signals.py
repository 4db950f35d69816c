"""Time grids, partitions and piecewise-constant control signals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ValidationError


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValidationError(f"horizon T={self.T} must exceed t0={self.t0}")
        if int(self.n_steps) < 1:
            raise ValidationError("n_steps must be positive")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def with_step(cls, T: float, tau: float, t0: float = 0.0) -> "TimeGrid":
        return cls(t0, T, max(1, int(round((T - t0) / tau))))

    @property
    def tau(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = self.t0 + self.tau * np.arange(self.n_steps + 1)
        t[-1] = self.T
        return t

    def time(self, index: int) -> float:
        return float(self.T) if index == self.n_steps else self.t0 + self.tau * index

    def index_of(self, t: float) -> int:
        k = int(round((t - self.t0) / self.tau))
        if abs(self.time(k) - t) > 1e-9 * max(1.0, abs(self.T)) or not 0 <= k <= self.n_steps:
            raise ValidationError(f"t={t} is not a node of {self}")
        return k

    def partition(self, intervals: int) -> "Partition":
        """Partition with (about) ``intervals`` cells whose nodes are grid nodes."""
        k = min(max(int(intervals), 1), self.n_steps)
        idx = np.unique(np.round(np.linspace(0, self.n_steps, k + 1)).astype(int))
        return Partition(np.array([self.time(i) for i in idx]))


@dataclass(frozen=True, eq=False)
class Partition:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).ravel()
        if nodes.size < 2:
            raise ValidationError("a partition needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValidationError("partition nodes must be strictly increasing")
        nodes.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, K: int, t0: float = 0.0) -> "Partition":
        nodes = np.linspace(t0, T, int(K) + 1)
        nodes[-1] = T
        return cls(nodes)

    @property
    def K(self) -> int:
        return self.nodes.size - 1

    @property
    def diam(self) -> float:
        return float(np.max(np.diff(self.nodes)))

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    def interval(self, t) -> np.ndarray | int:
        """Index of the right-open cell containing ``t`` (the last cell also owns ``T``)."""
        k = np.searchsorted(self.nodes, t, side="right") - 1
        return np.clip(k, 0, self.K - 1)

    def refined(self) -> "Partition":
        mids = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        return Partition(np.sort(np.concatenate([self.nodes, mids])))

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Control held at ``values[k]`` on ``[t_k, t_{k+1})``."""

    partition: Partition
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != self.partition.K:
            raise DimensionMismatch(f"{vals.shape[0]} control values for {self.partition.K} intervals")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("control values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value, T: float, t0: float = 0.0) -> "ControlSignal":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(Partition(np.array([t0, T])), v[None, :])

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def __call__(self, t: float) -> np.ndarray:
        return self.values[int(self.partition.interval(t))]

    def at(self, times) -> np.ndarray:
        return self.values[self.partition.interval(np.asarray(times))]

    def merged(self) -> "ControlSignal":
        """Equivalent signal with equal neighbouring values fused into one cell."""
        keep = [0]
        for k in range(1, self.partition.K):
            if not np.array_equal(self.values[k], self.values[keep[-1]]):
                keep.append(k)
        nodes = np.append(self.partition.nodes[keep], self.partition.T)
        return ControlSignal(Partition(nodes), self.values[keep])

    def equals(self, other: "ControlSignal", atol: float = 0.0) -> bool:
        """Same function of time (compared on the union of both partitions)."""
        nodes = np.union1d(self.partition.nodes, other.partition.nodes)
        probes = 0.5 * (nodes[1:] + nodes[:-1])
        return bool(np.allclose(self.at(probes), other.at(probes), rtol=0, atol=atol))

    def rows(self):
        """``(t_start, t_end, u_1..u_m)`` for every cell."""
        n = self.partition.nodes
        for k in range(self.partition.K):
            yield (float(n[k]), float(n[k + 1]), *map(float, self.values[k]))
