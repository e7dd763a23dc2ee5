import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualhom.coeffs import (
    Box,
    ExpressionField,
    InvalidProblemError,
    ProblemData,
    SampledField,
    load_problem,
    random_trig_field,
    read_grid_file,
    validate,
    write_grid_file,
)
from dualhom.expression import EvaluationError


def field(text, dim=1):
    return ExpressionField.parse(text, dim)


@pytest.mark.parametrize(
    "text, y, expected",
    [("3", 0.7, 3.0), ("sin(2*pi*y1)", 0.25, 1.0), ("1 + 0.5*sin(2*pi*y1)", 0.0, 1.0)],
)
def test_evaluate_examples(text, y, expected):
    assert float(field(text).evaluate(np.array([0.3]), np.array([y]))) == pytest.approx(expected, abs=1e-15)


def test_evaluation_error_propagates():
    with pytest.raises(EvaluationError):
        field("1/y1").evaluate(np.array([0.5]), np.array([0.0]))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True), st.integers(-3, 3))
def test_periodic_in_y(y1, y2, shift):
    f = field("cos(2*pi*y1) * (2 + sin(4*pi*y2)) + x1", dim=2)
    x = np.array([0.2, 0.4])
    a = f.evaluate(x, np.array([y1, y2]))
    b = f.evaluate(x, np.array([y1 + shift, y2 - shift]))
    assert abs(a - b) <= 1e-12


def test_sampled_field_wraps_in_y():
    vals = np.arange(12.0).reshape(3, 4)  # 3 x samples, 4 periodic y samples
    f = SampledField(vals, Box((0.0,), (1.0,)))
    x = np.array([0.5])
    assert float(f.evaluate(x, np.array([0.25]))) == pytest.approx(5.0)
    assert float(f.evaluate(x, np.array([1.25]))) == pytest.approx(5.0)
    # between the last sample and the wrapped first one
    assert float(f.evaluate(x, np.array([0.875]))) == pytest.approx(0.5 * (7.0 + 4.0))


@pytest.mark.parametrize("text", ["1", "y1", "2 + y1 - 3*y2", "y1*y2 + x1*y2"])
def test_cell_mean_exact_for_multilinear(text):
    # degree <= 1 per y variable, polynomial in [0, 1): average of y is 1/2
    f = field(text, dim=2)
    x = np.array([0.3, 0.6])
    y1, y2 = 0.5, 0.5
    exact = {"1": 1.0, "y1": y1, "2 + y1 - 3*y2": 2 + y1 - 3 * y2, "y1*y2 + x1*y2": y1 * y2 + 0.3 * y2}[text]
    assert f.cell_mean(x, 32) == pytest.approx(exact, abs=1e-13)


def test_validate_zero_mean_passes():
    data = ProblemData.from_expressions(1, kappa="1", exchange="sin(2*pi*y1)")
    rep = validate(data)
    assert rep.ok
    assert abs(rep["zero-mean:exchange"].worst_value) < 1e-12


def test_validate_nonzero_mean_fails():
    rep = validate(ProblemData.from_expressions(1, kappa="1", exchange="1"))
    assert not rep.ok
    assert rep["zero-mean:exchange"].worst_value == pytest.approx(1.0)


def test_validate_coercivity_fails_with_location():
    rep = validate(ProblemData.from_expressions(1, kappa=("cos(2*pi*y1)", "1")))
    c = rep["coercivity:kappa1"]
    assert not c.passed
    assert c.worst_value <= -1 + 1e-2
    assert c.location is not None
    assert rep["coercivity:kappa2"].passed


def test_validate_reports_unchecked_regularity():
    rep = validate(ProblemData.from_expressions(1, kappa="1"))
    assert any("regularity" in u for u in rep.unchecked)
    assert rep.to_dict()["ok"]


def test_validate_resolution_floor():
    with pytest.raises(ValueError):
        validate(ProblemData.from_expressions(1, kappa="1"), resolution=4)


def test_check_raises():
    with pytest.raises(InvalidProblemError):
        ProblemData.from_expressions(1, kappa="1", exchange="0.5").check()


@pytest.mark.parametrize("seed", range(10))
def test_validate_accepts_admissible_random_data(seed):
    rng = np.random.default_rng(seed)
    q = random_trig_field(rng, 2)
    k = random_trig_field(rng, 2, amplitude=0.3, offset=1.2)
    data = ProblemData.from_expressions(2, kappa=(k, "1 + 0.5*x1"), capacity=("2", "1 + 0.1*cos(2*pi*y2)"), exchange=q)
    assert validate(data, resolution=32).ok


def test_sampled_zero_mean_tolerance():
    vals = np.sin(2 * np.pi * np.arange(16) / 16)[None, :] + 1e-9
    data = ProblemData(Box((0.0,), (1.0,)), (field("1"),) * 2, (field("1"),) * 2,
                       SampledField(vals, Box((0.0,), (1.0,))), field("0"), (field("0"),) * 2)
    assert validate(data).ok  # 1e-9 < 1e-8 default for sampled data
    assert not validate(data, tol_mean=1e-10).ok


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
@pytest.mark.parametrize("has_y", [True, False])
def test_grid_file_round_trip(tmp_path, suffix, has_y):
    rng = np.random.default_rng(1)
    shape = (3, 2, 4, 6) if has_y else (3, 2)
    f = SampledField(rng.random(shape), Box((0.0, -1.0), (2.0, 1.0)), has_y)
    p = tmp_path / f"k{suffix}"
    write_grid_file(p, f)
    g = read_grid_file(p)
    assert g.has_y == has_y
    np.testing.assert_array_equal(g.values, f.values)
    assert g.domain == f.domain


def test_load_problem(tmp_path):
    grid = SampledField(np.full((1, 8), 2.0), Box((0.0,), (1.0,)))
    write_grid_file(tmp_path / "k2.csv", grid)
    (tmp_path / "p.yaml").write_text(
        "dimension: 1\nhorizon: 0.5\n"
        "coefficients:\n  kappa1: '1 + 0.5*sin(2*pi*y1)'\n  kappa2: {grid: k2.csv}\n"
        "  exchange: 'sin(2*pi*y1)'\n  source1: '1'\n"
        "run: {eps: [0.25, 0.125, 0.0625]}\n"
    )
    data, run = load_problem(tmp_path / "p.yaml")
    assert data.horizon == 0.5
    assert run["eps"] == [0.25, 0.125, 0.0625]
    assert float(data.kappa[1].evaluate(np.array([0.3]), np.array([0.1]))) == pytest.approx(2.0)
    s1, s2 = data.sources()
    assert s1.source == "1" and s2.source == "0"
    assert data.oscillatory and not data.depends_on_x


def test_load_problem_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="file not found"):
        load_problem(tmp_path / "nope.yaml")


def test_load_problem_unknown_key(tmp_path):
    (tmp_path / "p.yaml").write_text("coefficients: {kappa1: '1', kappa2: '1', kapa3: '1'}\n")
    with pytest.raises(ValueError, match="unknown coefficient"):
        load_problem(tmp_path / "p.yaml")


def test_fingerprint_tracks_coefficients():
    a = ProblemData.from_expressions(1, kappa="1 + 0.5*sin(2*pi*y1)")
    b = ProblemData.from_expressions(1, kappa="1 + 0.5*sin(2*pi*y1)")
    c = ProblemData.from_expressions(1, kappa="1 + 0.4*sin(2*pi*y1)")
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
