"""Scenario files: a line-oriented ``key = value`` format with ``[section]`` headers.

See README.md for the full format reference. DSL expressions are written as
double-quoted strings; numeric lists are comma separated.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .backends import Population, Problem, make_backend
from .errors import DslError, MeasureSteerError, ScenarioParseError, ScenarioValidationError
from .fields import ControlFamily, ControlSet, ScalarField, VectorField, eval_controlled, validate_h1
from .fields import _probe_points
from .fmp import FmpParams
from .io import load_raster, read_empirical_csv, read_grid_csv
from .measures import (
    EmpiricalMeasure,
    GridMeasure,
    GridSpec,
    gaussian_blob,
    image_to_measure,
    point_mass,
)
from .signals import ControlSignal, TimeGrid

_SECTION = re.compile(r"^\[\s*([A-Za-z_][\w-]*)(?:\s+([A-Za-z_][\w-]*))?\s*\]$")
_KEY = re.compile(r"^([A-Za-z_][\w-]*)\s*=\s*(.*)$")


@dataclass
class Entry:
    value: str
    line: int
    quoted: bool


@dataclass
class RawScenario:
    sections: dict[tuple[str, str | None], dict[str, Entry]]
    text: str

    def section(self, name: str, label: str | None = None) -> dict[str, Entry]:
        return self.sections.get((name, label), {})

    def labels(self, name: str) -> list[str]:
        return [lab for (sec, lab) in self.sections if sec == name and lab is not None]


def parse_text(text: str) -> RawScenario:
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            current = (m.group(1), m.group(2))
            if current in sections:
                raise ScenarioParseError(lineno, f"duplicate section [{' '.join(filter(None, current))}]")
            sections[current] = {}
            continue
        m = _KEY.match(line)
        if not m:
            raise ScenarioParseError(lineno, f"expected 'key = value' or '[section]', got {raw.strip()!r}")
        if current is None:
            raise ScenarioParseError(lineno, "key outside of any section")
        key, value = m.group(1), m.group(2).strip()
        quoted = False
        if value.startswith('"'):
            if len(value) < 2 or not value.endswith('"') or '"' in value[1:-1]:
                raise ScenarioParseError(lineno, "unterminated or malformed quoted string")
            value, quoted = value[1:-1], True
        if key in sections[current]:
            raise ScenarioParseError(lineno, f"duplicate key {key!r}")
        sections[current][key] = Entry(value, lineno, quoted)
    return RawScenario(sections, text)


def _strip_comment(line: str) -> str:
    out, in_quote = [], False
    for ch in line:
        if ch == '"':
            in_quote = not in_quote
        if ch == "#" and not in_quote:
            break
        out.append(ch)
    return "".join(out)


BUILTINS: dict[str, str] = {
    "example1": """\
# Single population, v_u(a, b) = (u, -a u), cost b, U = [-1, 1], T = 1.
[problem]
name = example1
horizon = 1
backend = particles

[grid]
domain_min = -3, -3
domain_max = 3, 3
h = 0.05

[time]
steps = 100

[control]
basis1 = "(1, -a)"
lower = -1
upper = 1
initial = 0

[population mu]
initial = dirac
point = 0, 0
cost = "b"

[algorithm]
alpha = 0
explore = 1, -1
intervals = 20
max_outer = 30
""",
    "crossring": """\
# Cross and ring separated toward xi = (1, 1) and zeta = -xi, paper resolution.
[problem]
name = crossring
horizon = 2
backend = grid

[grid]
domain_min = -5, -5
domain_max = 5, 5
h = 0.05

[time]
tau = 0.002

[control]
basis1 = "(0, 1)"
basis2 = "(a + b, a)"
basis3 = "(sin(a), a - b)"
lower = -1, -1, -1
upper = 1, 1, 1
initial = 1, 0, 0

[population mu]
initial = cross
center = 0.5, 0.5
arm = 1.0
width = 0.25
target = 1, 1

[population nu]
initial = ring
center = -0.5, -0.5
r_inner = 0.5
r_outer = 0.8
target = -1, -1

[algorithm]
alpha = 0.75, 0.5, 0.25, 0
explore = 1, -1
intervals = 20
max_outer = 30
""",
    "mnist36": """\
# Two digit images ("3" -> xi, "6" -> zeta) read from an IDX stack.
[problem]
name = mnist36
horizon = 2
backend = particles

[grid]
domain_min = -6, -6
domain_max = 6, 6
h = 0.05

[time]
steps = 100

[control]
basis1 = "(0, 1)"
basis2 = "(a + b, a)"
basis3 = "(sin(a), a - b)"
lower = -1, -1, -1
upper = 1, 1, 1
initial = 0, 0, 0

[population three]
initial = image
path = mnist36-images.idx
index = 0
threshold = 0.5
target = 3, 0

[population six]
initial = image
path = mnist36-images.idx
index = 1
threshold = 0.5
target = -3, 0

[algorithm]
alpha = 0.75, 0.5, 0.25, 0
explore = 1, -1
intervals = 20
max_outer = 30
""",
}

# desk-resolution variant of the cross/ring scenario used by the acceptance suite
BUILTINS["crossring-desk"] = (
    BUILTINS["crossring"]
    .replace("name = crossring", "name = crossring-desk")
    .replace("h = 0.05", "h = 0.1")
    .replace("tau = 0.002", "tau = 0.004")
)


@dataclass
class PopulationSpec:
    name: str
    kind: str
    params: dict[str, Entry]
    drift: VectorField | None
    cost: ScalarField
    target: np.ndarray | None = None


@dataclass
class Scenario:
    name: str
    text: str
    base_dir: Path
    horizon: float
    backend: str
    seed: int
    n_particles: int
    grid: GridSpec | None
    time_grid: TimeGrid
    basis: list[VectorField]
    control_set: ControlSet
    initial_control: np.ndarray
    populations: list[PopulationSpec]
    algorithm: FmpParams
    out_dir: Path | None
    frame_stride: int
    warnings: list[str] = field(default_factory=list)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def initial_signal(self) -> ControlSignal:
        return ControlSignal.constant(self.initial_control, self.horizon, self.time_grid.t0)

    def problem(self) -> Problem:
        pops = [Population(p.name, self._initial_measure(p), p.cost, p.drift) for p in self.populations]
        return Problem(pops, self.basis, self.control_set, self.time_grid, self.grid,
                       n_particles=self.n_particles, seed=self.seed)

    def make_backend(self, name: str | None = None):
        return make_backend(self.problem(), name or self.backend)

    def _initial_measure(self, p: PopulationSpec):
        prm = p.params
        if p.kind == "dirac":
            point = _floats(prm, "point", 2, p.name)
            if self.backend == "grid":
                return point_mass(self._need_grid(p.name), point)
            return EmpiricalMeasure.dirac(point)
        if p.kind in ("gaussian", "cross", "ring"):
            return make_blob(self._need_grid(p.name), p.kind, prm, p.name)
        if p.kind == "grid-csv":
            return read_grid_csv(self._path(prm, p.name), self._need_grid(p.name))
        if p.kind == "empirical-csv":
            return read_empirical_csv(self._path(prm, p.name))
        if p.kind == "image":
            index = int(_float(prm, "index", p.name, default=0))
            raster = load_raster(self._path(prm, p.name), index)
            m = image_to_measure(raster, _float(prm, "threshold", p.name, default=0.0))
            scale = _float(prm, "scale", p.name, default=1.0)
            offset = _floats(prm, "offset", 2, p.name, default=(0.0, 0.0))
            return m.with_points(m.points * scale + np.asarray(offset))
        raise ScenarioValidationError(f"population.{p.name}.initial", f"unknown source {p.kind!r}")

    def _need_grid(self, who: str) -> GridSpec:
        if self.grid is None:
            raise ScenarioValidationError(f"population.{who}.initial", "this source needs a [grid] section")
        return self.grid

    def _path(self, prm, who: str) -> Path:
        if "path" not in prm:
            raise ScenarioValidationError(f"population.{who}.path", "missing")
        path = Path(prm["path"].value)
        if not path.is_absolute():
            path = self.base_dir / path
        if not path.exists():
            raise ScenarioValidationError(f"population.{who}.path", f"file {path} does not exist")
        return path


def _float(sec: dict[str, Entry], key: str, where: str, default=None) -> float:
    if key not in sec:
        if default is None:
            raise ScenarioValidationError(f"{where}.{key}", "missing")
        return float(default)
    try:
        return float(sec[key].value)
    except ValueError:
        raise ScenarioParseError(sec[key].line, f"{key}: expected a number, got {sec[key].value!r}") from None


def _floats(sec: dict[str, Entry], key: str, n: int | None, where: str, default=None) -> np.ndarray:
    if key not in sec:
        if default is None:
            raise ScenarioValidationError(f"{where}.{key}", "missing")
        return np.asarray(default, dtype=float)
    try:
        vals = np.array([float(v) for v in sec[key].value.split(",")])
    except ValueError:
        raise ScenarioParseError(sec[key].line, f"{key}: expected numbers, got {sec[key].value!r}") from None
    if n is not None and vals.size != n:
        raise ScenarioValidationError(f"{where}.{key}", f"expected {n} values, got {vals.size}")
    return vals


def _dsl(entry: Entry, where: str, builder):
    try:
        return builder(entry.value)
    except DslError as exc:
        raise ScenarioParseError(entry.line, f"{where}: {exc}") from None


def make_blob(spec: GridSpec, kind: str, prm: dict[str, Entry], who: str = "blob") -> GridMeasure:
    """Analytic initial density with unit mass.

    ``cross`` and ``ring`` are indicator sets mollified by a one-cell
    triangular (1, 2, 1)/4 filter and then a Gaussian blur of radius ``blur``
    (default two cells).
    """
    center = _floats(prm, "center", 2, who, default=(0.0, 0.0))
    if kind == "gaussian":
        return gaussian_blob(spec, center, _float(prm, "sigma", who, default=0.3))
    a, b = spec.mesh
    da, db = a - center[0], b - center[1]
    if kind == "cross":
        arm = _float(prm, "arm", who, default=1.0)
        width = _float(prm, "width", who, default=0.25)
        ind = ((np.abs(da) <= width) | (np.abs(db) <= width)) & (np.abs(da) <= arm) & (np.abs(db) <= arm)
    elif kind == "ring":
        r = np.hypot(da, db)
        ind = (r >= _float(prm, "r_inner", who, default=0.5)) & (r <= _float(prm, "r_outer", who, default=0.8))
    else:
        raise ScenarioValidationError(f"{who}.initial", f"unknown blob shape {kind!r}")
    d = ind.astype(float)
    tri = np.array([0.25, 0.5, 0.25])
    for axis in (0, 1):
        d = np.apply_along_axis(lambda v: np.convolve(v, tri, mode="same"), axis, d)
    blur = _float(prm, "blur", who, default=2 * float(min(spec.h)))
    if blur > 0:
        d = gaussian_filter(d, sigma=blur / spec.h, mode="constant")
    total = d.sum() * spec.cell_area
    if total <= 0:
        raise ScenarioValidationError(f"{who}.initial", "shape does not intersect the grid")
    return GridMeasure(spec, d / total)


def cfl_estimate(families: list[ControlFamily], control_set: ControlSet, spec: GridSpec, tau: float) -> float:
    """Largest ``tau * (|w_a|/h_a + |w_b|/h_b)`` over probe points and box vertices.

    Velocities are affine in the control, so the extreme speeds over ``U`` are
    attained at vertices.
    """
    probes = _probe_points(spec, 256)
    ha, hb = spec.h
    worst = 0.0
    for cf in families:
        for u in control_set.vertices():
            w = eval_controlled(cf, u, probes)
            worst = max(worst, float(np.max(np.abs(w[:, 0]) / ha + np.abs(w[:, 1]) / hb)))
    return tau * worst


def load_scenario(source: str | Path, overrides: dict[str, str] | None = None) -> Scenario:
    """Load a built-in scenario by name or a scenario file, then validate it.

    ``overrides`` maps ``section.key`` (or ``section.label.key``) to raw
    values, applied before validation.
    """
    name = str(source)
    if name in BUILTINS:
        text, base = BUILTINS[name], Path.cwd()
    else:
        path = Path(source)
        if not path.exists():
            raise ScenarioValidationError("scenario", f"{path} is neither a file nor a built-in "
                                          f"({', '.join(sorted(BUILTINS))})")
        text, base = path.read_text(), path.parent
    raw = parse_text(text)
    for key, value in (overrides or {}).items():
        parts = key.split(".")
        if len(parts) not in (2, 3):
            raise ScenarioValidationError(key, "override keys look like section.key or section.label.key")
        sec = (parts[0], parts[1] if len(parts) == 3 else None)
        raw.sections.setdefault(sec, {})[parts[-1]] = Entry(str(value), 0, False)
        text += f"\n# override {key} = {value}"
    raw.text = text
    return build_scenario(raw, base)


def build_scenario(raw: RawScenario, base_dir: Path) -> Scenario:
    prob = raw.section("problem")
    name = prob["name"].value if "name" in prob else "scenario"
    horizon = _float(prob, "horizon", "problem")
    if horizon <= 0:
        raise ScenarioValidationError("problem.horizon", "must be positive")
    backend = prob["backend"].value if "backend" in prob else "grid"
    if backend not in ("grid", "particles"):
        raise ScenarioValidationError("problem.backend", f"expected grid or particles, got {backend!r}")
    seed = int(_float(prob, "seed", "problem", default=0))
    n_particles = int(_float(prob, "particles", "problem", default=2000))

    gsec = raw.section("grid")
    grid = None
    if gsec:
        lo = _floats(gsec, "domain_min", 2, "grid")
        hi = _floats(gsec, "domain_max", 2, "grid")
        if "cells" in gsec:
            cells = _floats(gsec, "cells", 2, "grid").astype(int)
        else:
            h = _float(gsec, "h", "grid")
            cells = np.round((hi - lo) / h).astype(int)
        try:
            grid = GridSpec(tuple(lo), tuple(hi), tuple(cells))
        except MeasureSteerError as exc:
            raise ScenarioValidationError("grid", str(exc)) from None
    elif backend == "grid":
        raise ScenarioValidationError("grid", "the grid backend needs a [grid] section")

    tsec = raw.section("time")
    if "steps" in tsec:
        tg = TimeGrid(0.0, horizon, int(_float(tsec, "steps", "time")))
    else:
        tg = TimeGrid.with_step(horizon, _float(tsec, "tau", "time", default=horizon / 100))

    csec = raw.section("control")
    keys = sorted((k for k in csec if re.fullmatch(r"basis\d+", k)), key=lambda k: int(k[5:]))
    if not keys:
        raise ScenarioValidationError("control.basis1", "at least one basis field is required")
    basis = [_dsl(csec[k], f"control.{k}", VectorField.from_expr) for k in keys]
    m = len(basis)
    lo = np.broadcast_to(_floats(csec, "lower", None, "control", default=[-1.0]), m)
    hi = np.broadcast_to(_floats(csec, "upper", None, "control", default=[1.0]), m)
    try:
        control_set = ControlSet(lo, hi)
    except MeasureSteerError as exc:
        raise ScenarioValidationError("control", str(exc)) from None
    initial = np.broadcast_to(_floats(csec, "initial", None, "control", default=[0.0]), m).copy()
    if not control_set.contains(initial):
        raise ScenarioValidationError("control.initial", "initial guess lies outside U")

    pops = []
    for label in raw.labels("population"):
        sec = raw.section("population", label)
        if "initial" not in sec:
            raise ScenarioValidationError(f"population.{label}.initial", "missing")
        drift = _dsl(sec["drift"], f"population.{label}.drift", VectorField.from_expr) if "drift" in sec else None
        target = None
        if "cost" in sec:
            cost = _dsl(sec["cost"], f"population.{label}.cost", ScalarField.from_expr)
        elif "target" in sec:
            target = _floats(sec, "target", None, f"population.{label}")
            cost = ScalarField.squared_distance(target)
        else:
            raise ScenarioValidationError(f"population.{label}.cost", "give either cost or target")
        pops.append(PopulationSpec(label, sec["initial"].value, sec, drift, cost, target))
    if not 1 <= len(pops) <= 2:
        raise ScenarioValidationError("population", f"expected one or two populations, found {len(pops)}")
    dims = {f.dim for f in basis} | {p.drift.dim for p in pops if p.drift is not None} | {p.cost.dim for p in pops}
    if len(dims) != 1:
        raise ScenarioValidationError("control", f"inconsistent dimensions {sorted(dims)}")

    asec = raw.section("algorithm")
    explores = [int(v) for v in _floats(asec, "explore", None, "algorithm", default=[1, -1])]
    params = FmpParams(
        eps1=_float(asec, "eps1", "algorithm") if "eps1" in asec else None,
        eps2=_float(asec, "eps2", "algorithm") if "eps2" in asec else None,
        alphas=tuple(float(a) for a in _floats(asec, "alpha", None, "algorithm", default=[0.75, 0.5, 0.25, 0.0])),
        explores=tuple(explores),
        max_outer=int(_float(asec, "max_outer", "algorithm", default=30)),
        intervals=int(_float(asec, "intervals", "algorithm", default=20)),
        scheme=asec["scheme"].value if "scheme" in asec else "u",
    )
    if any(not 0 <= a <= 1 for a in params.alphas):
        raise ScenarioValidationError("algorithm.alpha", "values must lie in [0, 1] (0 means no localization)")
    if params.scheme not in ("u", "ou"):
        raise ScenarioValidationError("algorithm.scheme", "expected u or ou")

    osec = raw.section("output")
    out_dir = Path(osec["dir"].value) if "dir" in osec else None
    stride = int(_float(osec, "frame_stride", "output", default=max(1, tg.n_steps // 10)))

    sc = Scenario(name, raw.text, base_dir, horizon, backend, seed, n_particles, grid, tg, basis,
                  control_set, initial, pops, params, out_dir, stride)
    if grid is not None:
        families = [ControlFamily(tuple(basis), p.drift) for p in pops]
        for cf in families:
            for u in control_set.vertices():
                const = validate_h1(lambda x, cf=cf, u=u: eval_controlled(cf, u, x), grid, 64)
                if not np.isfinite(const.c_lip):
                    raise ScenarioValidationError("control", "fields are not finite on the grid")
        c = cfl_estimate(families, control_set, grid, tg.tau)
        if c > 1.0:
            sc.warnings.append(
                f"CFL estimate {c:.3g} > 1 for tau={tg.tau:.3g}, h=({grid.h[0]:.3g}, {grid.h[1]:.3g}); "
                "steps will be sub-divided automatically"
            )
    return sc
