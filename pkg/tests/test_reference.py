import math

import numpy as np
import pytest

from oracles import forced_decay_exact, linear_exact
from qdl.devices import MicrogridParams, build_system, flat_start
from qdl.lim import GROUND, LimBranch, LimNode, NetlistGraph, assemble
from qdl.reference import (DenseSystem, EquilibriumError, RadauConfig, SnapResidualError,
                           StepFailure, build_dense_system, choose_step, fd_jacobian, integrate,
                           linear_system, radau_step, radau_tableau, solve_equilibrium, spectrum)

TIGHT = dict(newton_tol=1e-14, max_newton=20)


def scalar(f):
    return DenseSystem(["x"], lambda t, x: np.array([f(t, x[0])]))


# ----- tableau and single steps -----


def test_tableau_conditions():
    A, b, c = radau_tableau()
    assert A.sum(axis=1) == pytest.approx(c, abs=1e-15)
    assert np.array_equal(b, A[2])
    # quadrature exact up to degree 4
    for k in range(5):
        assert b @ c ** k == pytest.approx(1.0 / (k + 1), abs=1e-15)


def test_zero_field_step():
    x = np.array([1.0, -2.0, 3.0])
    sys = DenseSystem(["a", "b", "c"], lambda t, x: np.zeros(3))
    assert np.array_equal(radau_step(sys, 0.0, x, RadauConfig(0.5)), x)


def test_exponential_step():
    x1 = radau_step(linear_system([[-1.0]]), 0.0, [1.0], RadauConfig(0.1, **TIGHT))
    assert abs(x1[0] - math.exp(-0.1)) <= 1e-8


def test_stiff_decay():
    x1 = radau_step(linear_system([[-1e6]]), 0.0, [1.0], RadauConfig(1.0, **TIGHT))
    assert abs(x1[0]) <= 1e-5


def end_error(sys, exact, h, x0=0.0):
    tr = integrate(sys, [x0], 0.0, 1.0, RadauConfig(h, **TIGHT))
    return abs(tr.x[-1, 0] - exact)


def test_order_on_forced_decay():
    sys = scalar(lambda t, x: -x + math.sin(t))
    e1 = end_error(sys, forced_decay_exact(1.0), 0.25)
    e2 = end_error(sys, forced_decay_exact(1.0), 0.125)
    assert math.log2(e1 / e2) >= 4.5


def test_order_on_nonlinear_decay():
    # x' = -x^2, x(0) = 1 has x(t) = 1 / (1 + t)
    sys = DenseSystem(["x"], lambda t, x: -x * x)
    e1 = end_error(sys, 0.5, 0.25, 1.0)
    e2 = end_error(sys, 0.5, 0.125, 1.0)
    assert math.log2(e1 / e2) >= 4.5


def test_newton_failure_is_reported():
    # x' = x^2 from 1 has no implicit solution for a step this long
    sys = DenseSystem(["x"], lambda t, x: x * x)
    with pytest.raises(StepFailure) as info:
        integrate(sys, [1.0], 0.0, 4.0, RadauConfig(2.0))
    assert info.value.t == 0.0


def test_config_checks():
    with pytest.raises(ValueError):
        RadauConfig(0.0)
    with pytest.raises(ValueError):
        RadauConfig(0.1, newton_tol=0.0)


# ----- integration -----


def test_linear_system_matches_exponential():
    A = [[-1.0, 0.0], [500.0, -1000.0]]
    x0 = [1.0, 0.5]
    sys = linear_system(A)
    h = choose_step(sys, np.array(x0))
    assert h == pytest.approx(1e-4)
    tr = integrate(sys, x0, 0.0, 1.0, RadauConfig(h, **TIGHT))
    exact = linear_exact(A, x0, tr.t[::100])
    assert np.max(np.abs(tr.x[::100] - exact)) <= 1e-7
    assert np.allclose(np.diff(tr.t), h, rtol=0, atol=1e-15)


def test_switch_replaces_right_hand_side():
    before = DenseSystem(["x"], lambda t, x: np.zeros(1))
    after = DenseSystem(["x"], lambda t, x: np.ones(1))
    tr = integrate(before, [0.0], 0.0, 1.0, RadauConfig(0.1), switches=[(0.5, after)])
    assert tr.x[5, 0] == 0.0
    assert tr.x[-1, 0] == pytest.approx(0.5, abs=1e-12)


def test_trajectory_csv(tmp_path):
    tr = integrate(linear_system([[-1.0, 0.0], [0.0, -2.0]], labels=["a", "b"]), [1.0, 1.0],
                   0.0, 0.2, RadauConfig(0.1))
    p = tmp_path / "ref.csv"
    tr.write_csv(p, ["hello"])
    lines = p.read_text().splitlines()
    assert lines[:2] == ["# hello", "t,a,b"]
    assert len(lines) == 2 + 3
    assert tr.column("b")[0] == 1.0


# ----- dense export -----


def rc_loop():
    net = NetlistGraph()
    net.add(LimNode("n", C=1e-3, G=0.5), LimBranch("b", "n", GROUND, L=1e-2, R=2.0))
    return assemble(net)


def test_two_atom_jacobian():
    J = build_dense_system(rc_loop()).jacobian(0.0, np.array([1.0, 2.0]))
    assert J == pytest.approx(np.array([[-500.0, -1000.0], [100.0, -200.0]]), rel=1e-9)


def test_dense_calls_the_atom_closures():
    sys = build_system(MicrogridParams())
    x = np.random.default_rng(1).uniform(-100, 100, sys.n)
    assert np.array_equal(build_dense_system(sys).f(0.0, x), np.array(sys.rates(x.tolist())))


def test_sparse_jacobian_equals_full_differences():
    sys = build_system(MicrogridParams())
    dense = build_dense_system(sys)
    x = np.random.default_rng(2).uniform(1, 100, sys.n)
    assert np.allclose(dense.jacobian(0.0, x), fd_jacobian(dense.f, 0.0, x), rtol=1e-9, atol=1e-9)


# ----- equilibrium -----


def test_linear_equilibrium():
    A = np.array([[-2.0, 1.0], [0.5, -3.0]])
    xs = np.array([0.3, -1.7])
    x = solve_equilibrium(linear_system(A, -A @ xs), [10.0, 10.0])
    assert x == pytest.approx(xs, abs=1e-14)


def test_no_equilibrium():
    with pytest.raises(EquilibriumError) as info:
        solve_equilibrium(scalar(lambda t, x: 1.0), [0.0])
    assert len(info.value.history) > 1


def test_snapped_equilibrium_checked():
    A = np.array([[-1000.0]])
    sys = linear_system(A, [1000.0 * 0.1234])
    with pytest.raises(SnapResidualError):
        solve_equilibrium(sys, [0.0], quanta=[0.01], snap_tol=1e-6)
    x = solve_equilibrium(sys, [0.0], quanta=[0.0001], snap_tol=1e-6)
    assert x[0] == pytest.approx(0.1234)


@pytest.fixture(scope="module")
def microgrid():
    p = MicrogridParams()
    sys = build_system(p)
    dense = build_dense_system(sys)
    g = flat_start(p)
    return sys, dense, solve_equilibrium(dense, [g.get(lab, 0.0) for lab in sys.labels])


def test_microgrid_equilibrium(microgrid):
    sys, dense, x = microgrid
    assert dense.n == 32
    assert np.max(np.abs(dense.f(0.0, x))) <= 1e-9
    assert np.max(spectrum(dense, x).real) < 0.0


def test_microgrid_holds_equilibrium(microgrid):
    sys, dense, x = microgrid
    h = choose_step(dense, x)
    tr = integrate(dense, x, 0.0, 0.1, RadauConfig(h))
    drift = np.max(np.abs(tr.x - x), axis=0) / 0.1
    assert np.max(drift) <= 1e-8
