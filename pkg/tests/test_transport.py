import numpy as np
import pytest

from measure_steer.errors import CflViolation, GridTooSmall
from measure_steer.fields import ControlFamily, ScalarField, VectorField
from measure_steer.measures import GridMeasure, GridSpec, gaussian_blob, moment_first
from measure_steer.scenario import load_scenario
from measure_steer.signals import ControlSignal, TimeGrid
from measure_steer.transport import (
    advance_density,
    boundary_outflow,
    cfl_number,
    gradient_field,
    march_density,
    solve_dual_backward,
    solve_forward,
    velocity_tables,
)

EXAMPLE1 = ControlFamily((VectorField.from_expr("(1, -a)"),))
SHIFT = ControlFamily((VectorField.constant([1.0, 0.0]),))


def random_faces(rng, spec, cfl, closed=False):
    na, nb = spec.cells
    wa = rng.normal(size=(na + 1, nb))
    wb = rng.normal(size=(na, nb + 1))
    if closed:
        wa[0] = wa[-1] = 0.0
        wb[:, 0] = wb[:, -1] = 0.0
    tau = cfl / cfl_number(wa, wb, 1.0, spec.h)
    return wa, wb, tau


def test_zero_velocity_is_identity():
    spec = GridSpec.square(1, 0.1)
    m = gaussian_blob(spec, (0.2, 0.1), 0.3)
    na, nb = spec.cells
    out = advance_density(m, np.zeros((na + 1, nb)), np.zeros((na, nb + 1)), 0.1)
    assert np.array_equal(out.density, m.density)


def test_unit_cfl_exact_shift():
    spec = GridSpec.square(1, 0.1)
    tau = 0.01
    na, nb = spec.cells
    d = np.zeros(spec.shape)
    d[4, 6] = 1.0 / spec.cell_area
    wa = np.full((na + 1, nb), spec.h[0] / tau)
    out = advance_density(GridMeasure(spec, d), wa, np.zeros((na, nb + 1)), tau)
    expected = np.zeros(spec.shape)
    expected[5, 6] = d[4, 6]
    assert np.allclose(out.density, expected, rtol=0, atol=1e-14 / spec.cell_area)
    assert out.mass == pytest.approx(1.0, abs=1e-14)


def test_cfl_violation():
    spec = GridSpec.square(1, 0.1)
    na, nb = spec.cells
    m = gaussian_blob(spec, (0, 0), 0.3)
    wa = np.full((na + 1, nb), 2.0)
    with pytest.raises(CflViolation) as exc:
        advance_density(m, wa, np.zeros((na, nb + 1)), 0.1)
    assert exc.value.actual == pytest.approx(2.0)
    assert exc.value.limit == 1.0


def test_substepping_and_its_limit():
    spec = GridSpec.square(1, 0.1)
    m = gaussian_blob(spec, (0, 0), 0.2)
    fast = ControlFamily((VectorField.constant([1.0, 0.0]),))
    tables = velocity_tables(fast, spec)
    # CFL 4 is split into four substeps and matches four explicit quarter steps
    d, _ = march_density(m.density.copy(), tables, [4.0], 0.1)
    wa, wb = tables.faces([4.0])
    ref = m
    for _ in range(4):
        ref = advance_density(ref, wa, wb, 0.025)
    assert np.allclose(d, ref.density, rtol=1e-13, atol=1e-13)
    with pytest.raises(CflViolation):
        march_density(m.density.copy(), tables, [1e4], 0.1)


def test_positivity_and_conservation(rng):
    spec = GridSpec((0.0, 0.0), (1.0, 2.0), (12, 20))
    for _ in range(20):
        m = GridMeasure(spec, rng.uniform(0, 1, spec.shape))
        wa, wb, tau = random_faces(rng, spec, 0.99, closed=True)
        out = advance_density(m, wa, wb, tau)
        assert out.density.min() >= 0
        assert out.mass == pytest.approx(m.mass, rel=1e-12)
        wa, wb, tau = random_faces(rng, spec, 0.99)
        out = advance_density(m, wa, wb, tau)
        assert out.density.min() >= 0
        assert m.mass - out.mass == pytest.approx(boundary_outflow(m, wa, wb, tau), rel=1e-10, abs=1e-14)


def test_gaussian_translation():
    spec = GridSpec.square(5, 0.05)
    tg = TimeGrid(0, 1, 500)
    m0 = gaussian_blob(spec, (-1.0, 0.0), 0.5)
    traj = solve_forward(m0, SHIFT, ControlSignal.constant([1.0], 1.0), tg, keep=50)
    mean, _ = moment_first(traj.final)
    assert np.allclose(mean, [0, 0], atol=2 * 0.05)
    exact = gaussian_blob(spec, (0.0, 0.0), 0.5)
    l1 = np.abs(traj.final.density - exact.density).sum() * spec.cell_area
    assert l1 <= 0.15
    masses = [f.mass for f in traj.frames]
    assert all(b <= a + 1e-10 for a, b in zip(masses, masses[1:]))
    assert traj.indices == tuple(range(0, 501, 50))


def test_zero_control_keeps_frames():
    spec = GridSpec.square(2, 0.1)
    m0 = gaussian_blob(spec, (0.3, -0.2), 0.4)
    traj = solve_forward(m0, EXAMPLE1, ControlSignal.constant([0.0], 1.0), TimeGrid(0, 1, 20))
    assert all(np.array_equal(f.density, m0.density) for f in traj.frames)
    assert traj.mass_loss == 0.0


def test_example1_forward_mean():
    h = 0.05
    spec = GridSpec.square(3, h)
    m0 = gaussian_blob(spec, (0.0, 0.0), 0.1)
    traj = solve_forward(m0, EXAMPLE1, ControlSignal.constant([1.0], 1.0), TimeGrid(0, 1, 100), keep=())
    mean, _ = moment_first(traj.final)
    # characteristics: (a + t, b - a t - t^2 / 2)
    assert np.allclose(mean, [1.0, -0.5], atol=2 * h + 0.05)


def test_crossring_ten_steps_no_outflow():
    sc = load_scenario("crossring")
    backend = sc.make_backend("grid")
    spec = sc.grid
    tg = TimeGrid(0, 10 * sc.time_grid.tau, 10)
    u = ControlSignal.constant(sc.initial_control, tg.T)
    for m0, cf in zip(backend.initial(), backend.problem.families):
        # support extent plus the farthest any characteristic can travel stays inside
        pts = spec.center_points[m0.density.ravel() > 0]
        speed = max(np.abs(cf.velocity(v, spec.center_points)).max() for v in sc.control_set.vertices())
        reach = np.abs(pts).max() + speed * tg.T + spec.h.max()
        assert reach < 5.0
        traj = solve_forward(m0, cf, u, tg, keep=())
        assert traj.mass_loss < 1e-9
        assert traj.final.mass == pytest.approx(1.0, abs=1e-9)


def test_dual_zero_field():
    spec = GridSpec.square(2, 0.1)
    cost = ScalarField.from_expr("a * a + sin(b)")
    cf = ControlFamily((VectorField.zero(2),))
    dual = solve_dual_backward(cost, cf, ControlSignal.constant([1.0], 1.0), TimeGrid(0, 1, 10), spec)
    for p in dual.frames:
        assert np.array_equal(p, -cost(np.stack(spec.mesh, axis=-1)))


def test_dual_example1_costate():
    spec = GridSpec.square(3, 0.05)
    dual = solve_dual_backward(ScalarField.from_expr("b"), EXAMPLE1, ControlSignal.constant([0.0], 1.0),
                               TimeGrid(0, 1, 100), spec, keep=10)
    for p in dual.frames:
        assert np.allclose(p, -spec.mesh[1], atol=1e-14)


def test_dual_constant_advection():
    h = 0.05
    spec = GridSpec.square(5, h)
    dual = solve_dual_backward(ScalarField.from_expr("a"), SHIFT, ControlSignal.constant([1.0], 1.0),
                               TimeGrid(0, 1, 500), spec, keep=())
    a = spec.mesh[0]
    interior = a < 5 - 1 - h
    assert np.max(np.abs(dual.frame(0) - (-(a + 1)))[interior]) <= 2 * h
    assert np.array_equal(dual.terminal, -a)


def test_gradient_field_exactness():
    h = 0.05
    spec = GridSpec.square(2, h)
    a, b = spec.mesh
    g = gradient_field(-b, spec).values
    assert np.allclose(g[..., 0], 0, atol=1e-12)
    assert np.allclose(g[..., 1], -1, atol=1e-12)
    g = gradient_field(a**2, spec).values
    i = int(np.argmin(np.abs(spec.centers_a - 1.025)))
    assert g[i, 0, 0] == pytest.approx(2 * spec.centers_a[i], abs=1e-10)
    err = np.abs(gradient_field(np.sin(a), spec).values[1:-1, :, 0] - np.cos(a[1:-1]))
    assert err.max() <= h**2 / 6 * (1 + 1e-9)


def test_gradient_field_too_small():
    spec = GridSpec((0, 0), (1, 1), (2, 5))
    with pytest.raises(GridTooSmall):
        gradient_field(np.zeros(spec.shape), spec)


def test_gradient_interpolation_linear():
    spec = GridSpec.square(1, 0.1)
    a, b = spec.mesh
    gf = gradient_field(3 * a - 2 * b, spec)
    assert np.allclose(gf.at([[0.013, -0.41], [0.7, 0.2]]), [[3, -2], [3, -2]])
