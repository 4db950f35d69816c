"""Control-affine vector field families ``F_u(x) = drift(x) + sum_k u_k f_k(x)``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from ..errors import DimensionMismatch, NonFinite, ValidationError
from .dsl import (
    FieldExpr,
    Node,
    compile_expr,
    evaluate,
    parse_expr,
    parse_field,
    to_source,
    variables,
    VARIABLES,
)

__all__ = [
    "VectorField",
    "ScalarField",
    "ControlFamily",
    "ControlSet",
    "H1Constants",
    "eval_controlled",
    "validate_h1",
    "parse_field",
    "parse_expr",
    "to_source",
    "FieldExpr",
]


def _check_vars(tree, dim: int, src: str):
    used = variables(tree)
    bad = sorted(v for v in used if VARIABLES[v] >= dim)
    if bad:
        raise DimensionMismatch(f"{src!r} uses {bad} but the field is {dim}-dimensional")


class VectorField:
    """Vectorized map ``points (..., n) -> velocities (..., n)``."""

    def __init__(self, fn: Callable, dim: int, jacobian: Callable | None = None, source: str | None = None):
        self._fn = fn
        self.dim = int(dim)
        self._jacobian = jacobian
        self.source = source

    @classmethod
    def from_expr(cls, src: str | FieldExpr) -> "VectorField":
        tree = parse_field(src) if isinstance(src, str) else src
        text = to_source(tree) if not isinstance(src, str) else src
        _check_vars(tree, tree.dim, text)
        comps = [compile_expr(c) for c in tree.components]

        def fn(x):
            return np.stack([c(x) for c in comps], axis=-1)

        vf = cls(fn, tree.dim, source=text)
        vf.expr = tree
        return vf

    @classmethod
    def constant(cls, vector) -> "VectorField":
        v = np.asarray(vector, dtype=float)
        return cls(
            lambda x: np.broadcast_to(v, np.shape(x)).copy(),
            v.size,
            jacobian=lambda x: np.zeros(np.shape(x)[:-1] + (v.size, v.size)),
            source="(" + ", ".join(repr(float(c)) for c in v) + ")",
        )

    @classmethod
    def zero(cls, dim: int) -> "VectorField":
        return cls.constant(np.zeros(dim))

    def __call__(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"field is {self.dim}-dimensional, got points of shape {x.shape}")
        return self._fn(x)

    def jacobian(self, points) -> np.ndarray:
        """``J[..., i, j] = dF_i/dx_j``; central differences unless an analytic form was given."""
        x = np.asarray(points, dtype=float)
        if self._jacobian is not None:
            return self._jacobian(x)
        step = 1e-6 * (1.0 + np.linalg.norm(x, axis=-1))
        jac = np.empty(x.shape + (self.dim,))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = 1.0
            dx = step[..., None] * e
            jac[..., :, j] = (self(x + dx) - self(x - dx)) / (2 * step[..., None])
        return jac

    def __repr__(self):
        return f"VectorField({self.source or '<callable>'})"


class ScalarField:
    """Vectorized map ``points (..., n) -> values (...)`` used for terminal costs."""

    def __init__(self, fn: Callable, dim: int = 2, source: str | None = None):
        self._fn = fn
        self.dim = dim
        self.source = source

    @classmethod
    def from_expr(cls, src: str, dim: int = 2) -> "ScalarField":
        tree = parse_expr(src)
        _check_vars(tree, dim, src)
        sf = cls(compile_expr(tree), dim, source=src)
        sf.expr = tree
        return sf

    @classmethod
    def squared_distance(cls, target) -> "ScalarField":
        t = np.asarray(target, dtype=float)
        return cls(
            lambda x: np.sum((np.asarray(x, dtype=float) - t) ** 2, axis=-1),
            t.size,
            source=f"|x - ({', '.join(repr(float(c)) for c in t)})|^2",
        )

    @classmethod
    def zero(cls, dim: int = 2) -> "ScalarField":
        return cls(lambda x: np.zeros(np.shape(x)[:-1]), dim, source="0")

    def __call__(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"cost is {self.dim}-dimensional, got points of shape {x.shape}")
        return self._fn(x)

    def __repr__(self):
        return f"ScalarField({self.source or '<callable>'})"


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Box ``lo_k <= u_k <= hi_k``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).ravel()
        hi = np.array(self.hi, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise DimensionMismatch("lower and upper bounds differ in length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("control bounds must be finite (U is compact)")
        if np.any(lo > hi):
            raise ValidationError(f"empty control box: lo={lo}, hi={hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def box(cls, m: int, bound: float = 1.0) -> "ControlSet":
        return cls(np.full(m, -bound), np.full(m, bound))

    @property
    def m(self) -> int:
        return self.lo.size

    def contains(self, u, tol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))

    def vertices(self) -> np.ndarray:
        grids = np.meshgrid(*[[lo, hi] for lo, hi in zip(self.lo, self.hi)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)


@dataclass(frozen=True, eq=False)
class ControlFamily:
    """Basis fields ``f_k`` and an optional drift sharing one spatial dimension."""

    basis: tuple[VectorField, ...]
    drift: VectorField | None = None
    dim: int = field(init=False)

    def __post_init__(self):
        basis = tuple(self.basis)
        if not basis:
            raise ValidationError("a control family needs at least one basis field")
        dims = {f.dim for f in basis} | ({self.drift.dim} if self.drift is not None else set())
        if len(dims) != 1:
            raise DimensionMismatch(f"fields have mixed dimensions {sorted(dims)}")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "dim", dims.pop())

    @property
    def m(self) -> int:
        return len(self.basis)

    def with_drift(self, drift: VectorField | None) -> "ControlFamily":
        return ControlFamily(self.basis, drift)

    def basis_values(self, points) -> np.ndarray:
        """Stacked ``f_k(points)`` with shape ``(m, ..., n)``."""
        return np.stack([f(points) for f in self.basis])

    def drift_values(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        if self.drift is None:
            return np.zeros(x.shape)
        return self.drift(x)

    def velocity(self, u, points) -> np.ndarray:
        return eval_controlled(self, u, points)


def eval_controlled(cf: ControlFamily, u, x) -> np.ndarray:
    """``drift(x) + sum_k u_k f_k(x)``, vectorized over leading axes of ``x``."""
    u = np.asarray(u, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if u.size != cf.m:
        raise DimensionMismatch(f"control has {u.size} components, family has {cf.m}")
    if x.shape[-1] != cf.dim:
        raise DimensionMismatch(f"point dimension {x.shape[-1]} != field dimension {cf.dim}")
    out = cf.drift_values(x).astype(float, copy=True)
    for uk, f in zip(u, cf.basis):
        if uk != 0.0:
            out += uk * f(x)
    return out


@dataclass(frozen=True)
class H1Constants:
    c_growth: float
    c_lip: float


def _probe_points(spec, n_probe: int) -> np.ndarray:
    lo, hi = np.array(spec.domain_min), np.array(spec.domain_max)
    halton = qmc.Halton(d=2, scramble=False).random(n_probe)
    mid = 0.5 * (lo + hi)
    extra = np.array([
        [lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]],
        [lo[0], mid[1]], [hi[0], mid[1]], [mid[0], lo[1]], [mid[0], hi[1]], mid,
    ])
    return np.vstack([lo + halton * (hi - lo), extra])


def validate_h1(vf: VectorField | Callable, spec, n_probe: int = 128) -> H1Constants:
    """Empirical growth and Lipschitz constants over deterministic probe points.

    Advisory only: the constants are maxima over the probe set (Halton points
    plus box corners, edge midpoints and center), not certified bounds.
    """
    if n_probe < 2:
        raise ValidationError("validate_h1 needs at least two probe points")
    x = _probe_points(spec, n_probe)
    fx = np.asarray(vf(x), dtype=float)
    if not np.all(np.isfinite(fx)):
        raise NonFinite("field evaluates to NaN or infinity on the probe set")
    growth = float(np.max(np.linalg.norm(fx, axis=1) / (1.0 + np.linalg.norm(x, axis=1))))
    dx = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    df = np.linalg.norm(fx[:, None, :] - fx[None, :, :], axis=-1)
    mask = dx > 0
    lip = float(np.max(df[mask] / dx[mask])) if np.any(mask) else 0.0
    return H1Constants(growth, lip)


def field_from_spec(spec: str | VectorField | Sequence[float] | None, dim: int = 2) -> VectorField | None:
    """Accept DSL text, a vector of constants or an existing field."""
    if spec is None or isinstance(spec, VectorField):
        return spec
    if isinstance(spec, str):
        return VectorField.from_expr(spec)
    return VectorField.constant(spec)


__all__ += ["field_from_spec", "evaluate", "Node"]
