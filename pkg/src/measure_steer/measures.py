"""Grid densities, weighted point clouds, and the small exact W1 oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, EmptyMeasure, TooLarge, ValidationError, ZeroMass

ZERO_MASS = 1e-15
W1_MAX_ATOMS = 64


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell grid on a planar box.

    Cell ``(i, j)`` has center ``domain_min + (i + 0.5, j + 0.5) * h``; arrays
    on the grid are indexed ``[i, j]`` with ``i`` along the first axis ``a``.
    """

    domain_min: tuple[float, float]
    domain_max: tuple[float, float]
    cells: tuple[int, int]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.domain_min)
        hi = tuple(float(v) for v in self.domain_max)
        cells = tuple(int(c) for c in self.cells)
        if len(lo) != 2 or len(hi) != 2 or len(cells) != 2:
            raise DimensionMismatch("grid backend is two-dimensional")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValidationError(f"domain_min {lo} must be below domain_max {hi}")
        if min(cells) < 1:
            raise ValidationError(f"cells_per_axis must be positive, got {cells}")
        object.__setattr__(self, "domain_min", lo)
        object.__setattr__(self, "domain_max", hi)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def square(cls, half_width: float, h: float) -> "GridSpec":
        n = int(round(2 * half_width / h))
        return cls((-half_width, -half_width), (half_width, half_width), (n, n))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells

    @property
    def h(self) -> np.ndarray:
        return (np.array(self.domain_max) - np.array(self.domain_min)) / np.array(self.cells)

    @property
    def cell_area(self) -> float:
        ha, hb = self.h
        return float(ha * hb)

    @cached_property
    def centers_a(self) -> np.ndarray:
        return _frozen(self.domain_min[0] + (np.arange(self.cells[0]) + 0.5) * self.h[0])

    @cached_property
    def centers_b(self) -> np.ndarray:
        return _frozen(self.domain_min[1] + (np.arange(self.cells[1]) + 0.5) * self.h[1])

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        a, b = np.meshgrid(self.centers_a, self.centers_b, indexing="ij")
        return _frozen(a), _frozen(b)

    @cached_property
    def center_points(self) -> np.ndarray:
        """Cell centers as an ``(na*nb, 2)`` array in row-major order."""
        a, b = self.mesh
        return _frozen(np.stack([a.ravel(), b.ravel()], axis=1))

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        lo, hi = np.array(self.domain_min), np.array(self.domain_max)
        return np.all((p >= lo) & (p <= hi), axis=1)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Nonnegative density (mass per unit area) on a :class:`GridSpec`.

    Mass is never renormalized behind the caller's back, so outflow through
    the boundary stays visible in :attr:`mass`.
    """

    spec: GridSpec
    density: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        if d.shape != self.spec.shape:
            raise DimensionMismatch(f"density shape {d.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(d)):
            raise ValidationError("density must be finite")
        if np.any(d < 0):
            raise ValidationError("density must be nonnegative")
        object.__setattr__(self, "density", _frozen(d))

    @property
    def mass(self) -> float:
        return float(self.density.sum() * self.spec.cell_area)

    @property
    def cell_masses(self) -> np.ndarray:
        return self.density * self.spec.cell_area

    def normalized(self) -> "GridMeasure":
        m = self.mass
        if m <= ZERO_MASS:
            raise ZeroMass("cannot normalize a measure without mass")
        return GridMeasure(self.spec, self.density / m)


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted point cloud ``sum_i w_i delta_{x_i}`` with weights summing to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        w = np.array(self.weights, dtype=float).ravel()
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise EmptyMeasure("an empirical measure needs at least one atom")
        if w.shape[0] != pts.shape[0]:
            raise DimensionMismatch(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if np.any(w < 0):
            raise ValidationError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, point) -> "EmpiricalMeasure":
        return cls(np.asarray(point, dtype=float)[None, :], [1.0])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "EmpiricalMeasure":
        return EmpiricalMeasure(points, self.weights)


def moment_first(m: GridMeasure | EmpiricalMeasure) -> tuple[np.ndarray, float]:
    """Mean vector and first absolute moment ``int |x| dm`` of the normalized measure."""
    if isinstance(m, EmpiricalMeasure):
        w, x = m.weights, m.points
    else:
        w, x = m.cell_masses.ravel(), m.spec.center_points
    total = float(w.sum())
    if total <= ZERO_MASS:
        raise ZeroMass(f"measure mass {total!r} is zero")
    mean = (w @ x) / total
    m1 = float(w @ np.linalg.norm(x, axis=1)) / total
    return mean, m1


def _w1_line(xa, wa, xb, wb) -> float:
    # integral of |F_a - F_b| over the merged support
    xs = np.concatenate([xa, xb])
    ws = np.concatenate([wa, -np.asarray(wb)])
    order = np.argsort(xs, kind="stable")
    xs, ws = xs[order], ws[order]
    cdf_diff = np.cumsum(ws)[:-1]
    return float(np.sum(np.abs(cdf_diff) * np.diff(xs)))


def _w1_exhaustive(xa, xb) -> float:
    cost = cdist(xa, xb)
    n = len(xa)
    best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return float(best / n)


def _w1_transport_lp(xa, wa, xb, wb) -> float:
    na, nb = len(xa), len(xb)
    cost = cdist(xa, xb).ravel()
    rows = np.zeros((na, na * nb))
    cols = np.zeros((nb, na * nb))
    for i in range(na):
        rows[i, i * nb:(i + 1) * nb] = 1.0
    for j in range(nb):
        cols[j, j::nb] = 1.0
    # one column constraint is redundant given equal totals
    a_eq = np.vstack([rows, cols[:-1]])
    b_eq = np.concatenate([wa, wb[:-1]])
    res = linprog(
        cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def w1_distance(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Exact 1-Wasserstein distance with Euclidean ground cost.

    One-dimensional measures use the CDF formula. In higher dimension the
    transport problem is solved exactly, so this is a test oracle limited to
    64 atoms per side.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions differ: {a.dim} vs {b.dim}")
    if a.dim == 1:
        return _w1_line(a.points[:, 0], a.weights, b.points[:, 0], b.weights)
    if len(a) > W1_MAX_ATOMS or len(b) > W1_MAX_ATOMS:
        raise TooLarge(f"w1_distance is limited to {W1_MAX_ATOMS} atoms in dimension >= 2")
    if len(a) == 1 or len(b) == 1:
        single, other = (a, b) if len(a) == 1 else (b, a)
        return float(other.weights @ np.linalg.norm(other.points - single.points[0], axis=1))
    n = len(a)
    uniform = (
        len(b) == n and n <= 5
        and np.all(a.weights == a.weights[0]) and np.all(b.weights == b.weights[0])
    )
    if uniform:
        return _w1_exhaustive(a.points, b.points)
    return _w1_transport_lp(a.points, a.weights, b.points, b.weights)


def w1_assignment(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Exact W1 between two equal-size uniformly weighted clouds.

    With equal uniform weights an optimal plan is a permutation, so the
    assignment problem gives the transport cost exactly; this scales to a few
    thousand atoms where :func:`w1_distance` refuses.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions differ: {a.dim} vs {b.dim}")
    n = len(a)
    if len(b) != n or not (np.allclose(a.weights, 1.0 / n, rtol=0, atol=1e-15)
                           and np.allclose(b.weights, 1.0 / n, rtol=0, atol=1e-15)):
        raise ValidationError("w1_assignment needs equal-size uniformly weighted measures")
    cost = cdist(a.points, b.points)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum() / n)


def grid_to_empirical(m: GridMeasure, n_samples: int, seed: int) -> EmpiricalMeasure:
    """Draw ``n_samples`` cell centers with probability proportional to cell mass."""
    masses = m.cell_masses.ravel()
    total = masses.sum()
    if total <= ZERO_MASS:
        raise ZeroMass("cannot sample a measure without mass")
    rng = np.random.default_rng(seed)
    idx = rng.choice(masses.size, size=int(n_samples), p=masses / total)
    return EmpiricalMeasure.uniform(m.spec.center_points[idx])


def empirical_to_grid(m: EmpiricalMeasure, spec: GridSpec) -> GridMeasure:
    """Deposit atoms on cell centers with bilinear (cloud-in-cell) weights.

    Atoms within half a cell of the boundary are clamped onto the boundary
    cells, so the deposited mass always equals the empirical mass.
    """
    if m.dim != 2:
        raise DimensionMismatch("grid backend is two-dimensional")
    if not np.all(spec.contains(m.points)):
        raise ValidationError("empirical measure has atoms outside the grid domain")
    h = spec.h
    na, nb = spec.cells
    f = (m.points - np.array(spec.domain_min)) / h - 0.5
    f[:, 0] = np.clip(f[:, 0], 0, na - 1)
    f[:, 1] = np.clip(f[:, 1], 0, nb - 1)
    i0 = np.minimum(np.floor(f[:, 0]).astype(int), max(na - 2, 0))
    j0 = np.minimum(np.floor(f[:, 1]).astype(int), max(nb - 2, 0))
    fa, fb = f[:, 0] - i0, f[:, 1] - j0
    masses = np.zeros(spec.shape)
    for di, wa in ((0, 1 - fa), (1, fa)):
        for dj, wb in ((0, 1 - fb), (1, fb)):
            ii = np.minimum(i0 + di, na - 1)
            jj = np.minimum(j0 + dj, nb - 1)
            np.add.at(masses, (ii, jj), m.weights * wa * wb)
    return GridMeasure(spec, masses / spec.cell_area)


def point_mass(spec: GridSpec, point) -> GridMeasure:
    return empirical_to_grid(EmpiricalMeasure.dirac(point), spec)


def gaussian_blob(spec: GridSpec, center, sigma: float) -> GridMeasure:
    """Gaussian density sampled at cell centers, scaled to unit discrete mass."""
    a, b = spec.mesh
    r2 = (a - center[0]) ** 2 + (b - center[1]) ** 2
    d = np.exp(-0.5 * r2 / sigma**2)
    total = d.sum() * spec.cell_area
    if total <= ZERO_MASS:
        raise ZeroMass("blob lies outside the grid")
    return GridMeasure(spec, d / total)


def image_to_measure(pixels, threshold: float) -> EmpiricalMeasure:
    """One atom per pixel brighter than ``threshold``, mapped into the unit square.

    Row 0 is the top of the image (``b = 1``). Weights are proportional to
    intensity.
    """
    img = np.asarray(pixels, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise ValidationError("raster must be a nonempty 2-D array")
    rows, cols = np.nonzero(img > threshold)
    if rows.size == 0:
        raise EmptyMeasure(f"no pixel exceeds threshold {threshold}")
    height, width = img.shape
    pts = np.stack([(cols + 0.5) / width, 1.0 - (rows + 0.5) / height], axis=1)
    w = img[rows, cols]
    return EmpiricalMeasure(pts, w / w.sum())
