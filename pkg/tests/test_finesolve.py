import numpy as np
import pytest

from dualhom.cell import UnitCellGrid
from dualhom.coeffs import ProblemData
from dualhom.effective import build_effective_field
from dualhom.finesolve import FineRunSpec, ResolutionError, fine_coefficients, fine_operators, solve_fine, solve_single_field
from dualhom.macrosolve import MacroMesh, TimeGrid, solve_homogenized

OSC = "1 + 0.5*sin(2*pi*y1)"
TG = TimeGrid(0.1, 10)


def test_default_resolution():
    data = ProblemData.from_expressions(1, kappa=OSC)
    spec = FineRunSpec(1 / 8, data, TG)
    assert spec.n == (128,)
    assert FineRunSpec(1 / 8, data, TG, rho=4).n == (32,)


@pytest.mark.parametrize("eps, n", [(1 / 8, 64), (0.0, None), (1.0, None)])
def test_resolution_refused(eps, n):
    data = ProblemData.from_expressions(1, kappa=OSC)
    with pytest.raises(ResolutionError):
        FineRunSpec(eps, data, TG, n=n)


def test_fast_variable_reduced_mod_one():
    data = ProblemData.from_expressions(1, kappa="1 + y1")  # sawtooth in x / eps
    mesh = FineRunSpec(0.25, data, TG, rho=8).mesh()
    kap, _, _ = fine_coefficients(data, 0.25, mesh)
    x = mesh.quad_points[..., 0]
    np.testing.assert_allclose(kap[0], 1 + np.mod(x / 0.25, 1.0), atol=1e-14)


def test_exchange_blocks_antisymmetric():
    data = ProblemData.from_expressions(2, kappa=(OSC, "2"), exchange="sin(2*pi*y1)*cos(2*pi*y2) + x1*cos(2*pi*y2)")
    mesh = FineRunSpec(0.25, data, TG, rho=4).mesh()
    _, blocks, B = fine_operators(data, 0.25, mesh)
    K = [mesh.stiffness(k) for k in fine_coefficients(data, 0.25, mesh)[0]]
    assert abs(blocks[0][1] - blocks[1][0].T).max() == 0.0
    assert abs(blocks[0][0] - K[0] + blocks[0][1]).max() <= 1e-14 * max(abs(K[0]).max(), abs(K[1]).max())
    assert abs(blocks[1][1] - K[1] + blocks[1][0]).max() <= 1e-14 * max(abs(K[0]).max(), abs(K[1]).max())
    # the two exchange terms cancel when tested with (phi, phi)
    u1, u2 = np.random.default_rng(0).random((2, mesh.n_nodes))
    e1, e2 = B @ (u1 - u2), B @ (u2 - u1)
    assert np.max(np.abs(e1 + e2)) <= 1e-15 * np.max(np.abs(e1))


def test_zero_data():
    data = ProblemData.from_expressions(1, kappa=OSC, exchange="sin(2*pi*y1)")
    assert np.all(solve_fine(FineRunSpec(1 / 8, data, TG)).u == 0.0)


@pytest.mark.parametrize("exchange", ["0", "sin(2*pi*y1)"])
def test_symmetric_data(exchange):
    data = ProblemData.from_expressions(2, kappa=OSC, capacity=("1 + 0.5*cos(2*pi*y2)",) * 2, exchange=exchange,
                                        source="1", initial=("sin(pi*x1)*sin(pi*x2)",) * 2)
    f = solve_fine(FineRunSpec(1 / 4, data, TG, rho=8))
    assert np.max(np.abs(f.u[0] - f.u[1])) <= 1e-11


@pytest.mark.parametrize("dim", [1, 2])
def test_decoupling_is_bit_identical(dim):
    data = ProblemData.from_expressions(dim, kappa=(OSC, "2 + cos(2*pi*y1) + x1"), capacity=("1 + x1", "2"),
                                        source=("1", "exp(-t)*x1"), initial=("sin(pi*x1)", "0"))
    spec = FineRunSpec(1 / 4, data, TG, rho=8 if dim == 1 else 4)
    f = solve_fine(spec)
    mesh = spec.mesh()
    kap, cap, _ = fine_coefficients(data, 1 / 4, mesh)
    for k in range(2):
        ref = solve_single_field(mesh, kap[k], cap[k], data.sources()[k], data.initial[k], TG)
        assert np.array_equal(ref, f.u[k])


@pytest.mark.parametrize("dim", [1, 2])
def test_constant_in_y_matches_macro(dim):
    X = "x1" if dim == 1 else "x1*x2"
    data = ProblemData.from_expressions(dim, kappa=(f"1 + 0.5*{X}", "2 + sin(x1)"), capacity=("1 + x1", "2"),
                                        source=(f"1 + {X}", "exp(-t)"), initial=("sin(pi*x1)", "0"))
    outs = []
    for eps in (1 / 4, 1 / 16):
        spec = FineRunSpec(eps, data, TG, n=64 if dim == 1 else 16, rho=1)
        outs.append(solve_fine(spec))
    mesh = outs[0].mesh
    np.testing.assert_array_equal(outs[0].u, outs[1].u)  # epsilon-independent
    eff = build_effective_field(data, UnitCellGrid(dim, 8), points=mesh.quad_points.reshape(-1, dim))
    macro = solve_homogenized(eff, data.sources(), data.initial, mesh, TG)
    assert np.max(np.abs(outs[0].u - macro.u)) <= 1e-10


def test_bounded_energy_across_sweep():
    data = ProblemData.from_expressions(1, kappa=OSC, exchange="sin(2*pi*y1)", source="1")
    tg = TimeGrid(0.1, 20)
    norms = []
    for eps in (1 / 8, 1 / 16, 1 / 32, 1 / 64):
        f = solve_fine(FineRunSpec(eps, data, tg))
        m = f.mesh
        norms.append(sum(np.sqrt(sum(tg.dt * m.integrate(np.sum(m.gradients_at_quad(f.u[k, n]) ** 2, -1))
                                     for n in range(1, 21))) for k in range(2)))
    norms = np.array(norms)
    assert np.all(norms <= 2 * norms[0]) and np.all(norms >= norms[0] / 2)
