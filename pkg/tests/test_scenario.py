import numpy as np
import pytest

from measure_steer.errors import ScenarioParseError, ScenarioValidationError
from measure_steer.io import write_idx
from measure_steer.measures import EmpiricalMeasure, GridMeasure, GridSpec, moment_first
from measure_steer.scenario import BUILTINS, load_scenario, make_blob, parse_text

MINIMAL = """\
[problem]
horizon = 1
backend = grid

[grid]
domain_min = -2, -2
domain_max = 2, 2
h = 0.1

[time]
steps = 10

[control]
basis1 = "(1, 0)"

[population mu]
initial = gaussian
center = 0.5, 0
sigma = 0.3
cost = "a * a"
"""


def test_example1_builtin():
    sc = load_scenario("example1")
    assert sc.horizon == 1.0
    assert sc.control_set.lo.tolist() == [-1.0] and sc.control_set.hi.tolist() == [1.0]
    x = np.array([[2.0, 5.0]])
    assert np.allclose(sc.basis[0](x) * 1.0, [[1.0, -2.0]])
    assert sc.populations[0].cost(np.array([0.3, -0.7])) == pytest.approx(-0.7)
    assert sc.algorithm.alphas == (0.0,)
    assert sc.warnings == []


def test_crossring_builtin():
    sc = load_scenario("crossring")
    assert sc.grid.domain_min == (-5.0, -5.0) and sc.grid.domain_max == (5.0, 5.0)
    assert np.allclose(sc.grid.h, 0.05)
    assert sc.time_grid.tau == pytest.approx(2e-3)
    assert sc.horizon == 2.0
    assert sc.algorithm.alphas[0] == 0.75
    assert sc.initial_control.tolist() == [1.0, 0.0, 0.0]
    targets = [p.target.tolist() for p in sc.populations]
    assert targets == [[1.0, 1.0], [-1.0, -1.0]]
    desk = load_scenario("crossring-desk")
    assert np.allclose(desk.grid.h, 0.1) and desk.time_grid.tau == pytest.approx(4e-3)


def test_mnist_builtin_needs_files(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    sc = load_scenario("mnist36")
    assert [p.target.tolist() for p in sc.populations] == [[3.0, 0.0], [-3.0, 0.0]]
    with pytest.raises(ScenarioValidationError):
        sc.problem()
    imgs = np.zeros((2, 5, 5), dtype=np.uint8)
    imgs[0, 1:4, 3] = 255
    imgs[1, 2, 1:3] = 200
    write_idx(tmp_path / "mnist36-images.idx", imgs)
    problem = sc.problem()
    assert all(isinstance(p.initial, EmpiricalMeasure) for p in problem.populations)
    assert len(problem.populations[0].initial) == 3


@pytest.mark.parametrize("kind", ["cross", "ring", "gaussian"])
def test_blobs_have_unit_mass(kind):
    spec = GridSpec.square(5, 0.1)
    m = make_blob(spec, kind, parse_text("[s]\ncenter = 0.5, -0.5\n").section("s"))
    assert isinstance(m, GridMeasure)
    assert m.mass == pytest.approx(1.0, abs=1e-12)
    assert m.density.min() >= 0
    assert np.allclose(moment_first(m)[0], [0.5, -0.5], atol=1e-9)


def test_parse_errors_carry_lines(tmp_path):
    cases = {
        "[problem]\nhorizon 1\n": 2,
        "horizon = 1\n": 1,
        '[control]\nbasis1 = "(1, 0)\n': 2,
        "[problem]\nhorizon = 1\nhorizon = 2\n": 3,
    }
    for text, line in cases.items():
        with pytest.raises(ScenarioParseError) as exc:
            parse_text(text)
        assert exc.value.line == line
    bad_dsl = MINIMAL.replace('basis1 = "(1, 0)"', 'basis1 = "(1, +)"')
    path = tmp_path / "bad.scn"
    path.write_text(bad_dsl)
    with pytest.raises(ScenarioParseError) as exc:
        load_scenario(path)
    assert exc.value.line == 14


def test_validation_errors(tmp_path):
    path = tmp_path / "s.scn"
    for text, field in [
        (MINIMAL.replace("horizon = 1", "horizon = -1"), "problem.horizon"),
        (MINIMAL.replace('cost = "a * a"', ""), "population.mu.cost"),
        (MINIMAL.replace("initial = gaussian", "initial = empirical-csv\npath = nope.csv"), "population.mu.path"),
        (MINIMAL.replace('basis1 = "(1, 0)"', 'basis1 = "(1, 0, 0)"'), "control"),
    ]:
        path.write_text(text)
        with pytest.raises(ScenarioValidationError) as exc:
            load_scenario(path).problem()
        assert exc.value.field == field


def test_cfl_warning_record(tmp_path):
    path = tmp_path / "fast.scn"
    path.write_text(MINIMAL.replace('basis1 = "(1, 0)"', 'basis1 = "(50, 0)"'))
    sc = load_scenario(path)
    assert len(sc.warnings) == 1 and "CFL" in sc.warnings[0]
    assert load_scenario(path, {"time.steps": "2000"}).warnings == []


def test_overrides_and_hash():
    a = load_scenario("example1")
    b = load_scenario("example1", {"problem.seed": "7", "population.mu.point": "0.5, 0"})
    assert b.seed == 7
    assert b.populations[0].params["point"].value == "0.5, 0"
    assert a.sha256 != b.sha256
    assert a.sha256 == load_scenario("example1").sha256
    with pytest.raises(ScenarioValidationError):
        load_scenario("no-such-scenario")


def test_builtins_all_load():
    for name in BUILTINS:
        assert load_scenario(name).name == name
