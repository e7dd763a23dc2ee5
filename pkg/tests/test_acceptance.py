"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run."""

import time

import numpy as np
import pytest

from dualhom.cell import UnitCellGrid, solve_exchange_M
from dualhom.coeffs import ProblemData, random_trig_field
from dualhom.effective import build_effective_field, effective_point
from dualhom.finesolve import FineRunSpec, fine_coefficients, solve_fine, solve_single_field
from dualhom.macrosolve import TimeGrid, solve_homogenized
from dualhom.verify import StudyConfig, run_study
from oracles import MMSProblem, spatial_orders, temporal_order

OSC = "1 + 0.5*sin(2*pi*y1)"
SIN = "sin(2*pi*y1)"
SWEEP = (1 / 8, 1 / 16, 1 / 32, 1 / 64)


def point(dim, n, **kw):
    return effective_point(ProblemData.from_expressions(dim, **kw), np.zeros(dim), UnitCellGrid(dim, n))[0]


def draws():
    """Twenty seeded random cells: kappa_k in [0.5, 2], zero-mean trigonometric Q."""
    rng = np.random.default_rng(2024)
    out = []
    for _ in range(20):
        k1 = random_trig_field(rng, 2, amplitude=0.15, offset=1.0)
        k2 = random_trig_field(rng, 2, amplitude=0.25, offset=1.25)
        data = ProblemData.from_expressions(2, kappa=(k1, k2), exchange=random_trig_field(rng, 2))
        out.append((data, effective_point(data, np.zeros(2), UnitCellGrid(2, 32))[0]))
    return out


@pytest.fixture(scope="module")
def random_draws():
    return draws()


@pytest.fixture(scope="module")
def study():
    data = ProblemData.from_expressions(1, kappa=(OSC, OSC), exchange=SIN, source="1", horizon=0.1)
    t0 = time.perf_counter()
    rep = run_study(data, StudyConfig(eps=SWEEP, rho=16, dt=1e-3))
    return rep, time.perf_counter() - t0


@pytest.mark.criterion(1, "cell oracle M = sin(2 pi y1)/(4 pi^2), nodal order 2.0 +- 0.2, < 10 s")
def test_cell_oracle(record_property):
    t0 = time.perf_counter()
    ns = np.array([16, 32, 64, 128])
    errs = []
    for n in ns:
        g = UnitCellGrid(2, int(n))
        M = solve_exchange_M(1.0, lambda y: np.sin(2 * np.pi * y[..., 0]), g)
        errs.append(np.max(np.abs(M.values - np.sin(2 * np.pi * g.nodes[:, 0]) / (4 * np.pi**2))))
    order = np.polyfit(np.log(1 / ns), np.log(errs), 1)[0]
    elapsed = time.perf_counter() - t0
    record_property("order", f"{order:.3f}")
    record_property("runtime_s", f"{elapsed:.2f}")
    assert order == pytest.approx(2.0, abs=0.2)
    assert elapsed < 10


@pytest.mark.criterion(2, "laminate kappa* = diag(sqrt(0.75), 1) within 1e-3, symmetry defect < 1e-10")
def test_laminate_tensor(record_property):
    p = point(2, 128, kappa=OSC)
    err = max(np.max(np.abs(p.kappa_star[k] - np.diag([np.sqrt(0.75), 1.0]))) for k in range(2))
    record_property("max_error", f"{err:.2e}")
    record_property("symmetry_defect", f"{p.symmetry_defect():.1e}")
    assert err <= 1e-3
    assert p.symmetry_defect() < 1e-10


@pytest.mark.criterion(3, "beta = 1/(4 pi^2) within 1e-4; beta >= -1e-10 and -beta <= 0 on 20 random draws")
def test_exchange_coefficient(random_draws, record_property):
    p = point(2, 128, kappa="1", exchange=SIN)
    record_property("beta", f"{p.beta:.6f}")
    assert p.beta == pytest.approx(1 / (4 * np.pi**2), abs=1e-4)
    y = UnitCellGrid(2, 32).quad_points
    betas = []
    for data, q in random_draws:
        for kap in data.kappa:
            vals = np.asarray(kap.evaluate(x=np.zeros(2), y=y))
            assert 0.5 <= vals.min() and vals.max() <= 2.0
        betas.append(q.beta)
    record_property("min_beta", f"{min(betas):.3e}")
    assert min(betas) >= -1e-10
    # the interaction coefficient in the homogenized system is -beta
    assert max(-b for b in betas) <= 1e-10


@pytest.mark.criterion(4, "energy identity |beta - sum_k int kappa_k |grad M_k|^2| <= 1e-8 max(1, beta)")
def test_energy_identity(random_draws, record_property):
    defects = [abs(q.beta - q.energy.sum()) / max(1.0, q.beta) for _, q in random_draws]
    record_property("max_relative_defect", f"{max(defects):.1e}")
    assert max(defects) <= 1e-8


@pytest.mark.criterion(5, "manufactured orders: space 2.0 +- 0.2, IE 1.0 +- 0.2, CN 2.0 +- 0.3, < 60 s")
def test_manufactured_orders(record_property):
    t0 = time.perf_counter()
    problem = MMSProblem()
    space, _ = spatial_orders(problem)
    ie, _ = temporal_order(problem, "implicit-euler", (8, 16, 32, 64))
    cn, _ = temporal_order(problem, "crank-nicolson", (16, 32, 64, 128))
    elapsed = time.perf_counter() - t0
    for name, v in (("space", space), ("ie", ie), ("cn", cn), ("runtime_s", elapsed)):
        record_property(name, f"{v:.3f}")
    assert space == pytest.approx(2.0, abs=0.2)
    assert ie == pytest.approx(1.0, abs=0.2)
    assert cn == pytest.approx(2.0, abs=0.3)
    assert elapsed < 60


@pytest.mark.criterion(6, "d = 1 rate study: corrector-gradient slope >= 0.4 for both continua, l2 distance decreasing, < 5 min")
def test_rate_study(study, record_property):
    rep, elapsed = study
    for k in range(2):
        record_property(f"slope_u{k + 1}", f"{rep.fits[f'grad_u{k + 1}'].slope:.3f}")
    record_property("runtime_s", f"{elapsed:.1f}")
    assert "degenerate: no oscillation" not in rep.flags
    for k in range(2):
        assert rep.fits[f"grad_u{k + 1}"].slope >= 0.4
        assert np.all(np.diff(rep.column("l2", k)) < 0)
    assert rep.checks["discretization_floor"]
    assert elapsed < 300


@pytest.mark.criterion(7, "||u1||_V + ||u2||_V within a factor 2 of its eps = 1/8 value")
def test_uniform_bound(study, record_property):
    rep, _ = study
    total = rep.column("energy", 0) + rep.column("energy", 1)
    ratio = total / total[0]
    record_property("ratio_range", f"[{ratio.min():.3f}, {ratio.max():.3f}]")
    assert np.all(ratio <= 2.0) and np.all(ratio >= 0.5)


@pytest.mark.criterion(8, "degenerate inputs: decoupling, fine = macro, u1 = u2, zero data")
def test_degenerate_inputs(record_property):
    tg = TimeGrid(0.1, 10)
    # Q = 0: the coupled fine solve equals two independent single-field solves bit for bit
    data = ProblemData.from_expressions(2, kappa=(OSC, "2 + cos(2*pi*y1) + x1"), capacity=("1 + x1", "2"),
                                        source=("1", "exp(-t)*x1"), initial=("sin(pi*x1)", "0"))
    spec = FineRunSpec(1 / 4, data, tg, rho=4)
    f = solve_fine(spec)
    mesh = spec.mesh()
    kap, cap, _ = fine_coefficients(data, 1 / 4, mesh)
    for k in range(2):
        ref = solve_single_field(mesh, kap[k], cap[k], data.sources()[k], data.initial[k], tg)
        assert np.array_equal(ref, f.u[k])
    # constant in y: fine and macro coincide
    data = ProblemData.from_expressions(2, kappa=("1 + 0.5*x1*x2", "2 + sin(x1)"), capacity=("1 + x1", "2"),
                                        source=("1 + x1*x2", "exp(-t)"), initial=("sin(pi*x1)", "0"))
    fine = solve_fine(FineRunSpec(1 / 4, data, tg, n=16, rho=1))
    eff = build_effective_field(data, UnitCellGrid(2, 8), points=fine.mesh.quad_points.reshape(-1, 2))
    macro = solve_homogenized(eff, data.sources(), data.initial, fine.mesh, tg)
    coincidence = np.max(np.abs(fine.u - macro.u))
    record_property("fine_vs_macro", f"{coincidence:.1e}")
    assert coincidence <= 1e-10
    # symmetric data: u1 = u2 in both solvers
    data = ProblemData.from_expressions(2, kappa=OSC, exchange=SIN, source="1", initial=("sin(pi*x1)*sin(pi*x2)",) * 2)
    fine = solve_fine(FineRunSpec(1 / 4, data, tg, rho=8))
    eff = build_effective_field(data, UnitCellGrid(2, 16))
    macro = solve_homogenized(eff, data.sources(), data.initial, fine.mesh, tg)
    sym = max(np.max(np.abs(fine.u[0] - fine.u[1])), np.max(np.abs(macro.u[0] - macro.u[1])))
    record_property("u1_minus_u2", f"{sym:.1e}")
    assert sym <= 1e-11
    # zero data: exact zeros
    data = ProblemData.from_expressions(2, kappa=(OSC, "2"), exchange=SIN)
    fine = solve_fine(FineRunSpec(1 / 4, data, tg, rho=4))
    macro = solve_homogenized(build_effective_field(data, UnitCellGrid(2, 8)), data.sources(), data.initial, fine.mesh, tg)
    assert np.all(fine.u == 0.0) and np.all(macro.u == 0.0)
