import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import linear_exact
from qdl.engine import (DerivativeClosure, Disturbance, Engine, EngineConfig, EventQueue,
                        QdlAtom, QdlSystem, SchedulingError, init_slope, liqss1_select_q, run,
                        time_to_boundary)


def linear(A, b=None):
    """Closures for dx/dt = A q + b."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    b = np.zeros(n) if b is None else np.asarray(b, dtype=float)
    out = []
    for i in range(n):
        row = [(k, float(A[i, k])) for k in range(n) if A[i, k] != 0.0]
        c = float(b[i])
        out.append(DerivativeClosure(
            lambda q, row=row, c=c: c + sum(a * q[k] for k, a in row),
            tuple(k for k, _ in row)))
    return out


def system(A, x0, dq, b=None):
    n = len(x0)
    return QdlSystem([f"x{i}" for i in range(n)], list(x0), list(dq), linear(A, b))


def sup_error(res, A, x0, t_end, samples=4001):
    """Largest |q(t) - x(t)| over a dense grid plus every event time."""
    worst = 0.0
    for j in range(len(x0)):
        ts, qs = res.trajectory(j)
        probe = np.union1d(np.linspace(0.0, t_end, samples), np.asarray(ts))
        exact = linear_exact(A, x0, probe)[:, j]
        idx = np.searchsorted(ts, probe, side="right") - 1
        held = np.asarray(qs)[idx]
        worst = max(worst, float(np.max(np.abs(held - exact))))
    return worst


# ----- time_to_boundary -----


def test_boundary_unit_slope():
    assert time_to_boundary(0.0, 0.0, 0.1, 1.0) == pytest.approx(0.1)


def test_boundary_zero_slope_is_infinite():
    assert time_to_boundary(0.3, 0.0, 0.1, 0.0) == math.inf


def test_boundary_falling():
    assert time_to_boundary(0.03, 0.0, 0.1, -2.0) == pytest.approx(0.065)


@given(st.floats(-1, 1), st.floats(1e-4, 1), st.floats(-1e3, 1e3))
def test_boundary_never_negative(off, dq, slope):
    assert time_to_boundary(off * dq, 0.0, dq, slope) >= 0.0


# ----- liqss1_select_q -----


def _atom_for(f, x, q, dq):
    a = QdlAtom(id=0, x=x, q=q, dq=dq)
    qv = [q]
    init_slope(a, f, qv)
    a.x = x
    return a, qv


def test_select_zero_field_holds():
    a, qv = _atom_for(lambda q: 0.0, 0.0, 0.0, 0.1)
    assert liqss1_select_q(a, lambda q: 0.0, qv) == (0.0, 0.0)


def test_select_upper_edge():
    f = lambda q: -100.0 * (q[0] - 1.0)
    a, qv = _atom_for(f, 0.0, 0.0, 0.1)
    q_new, d = liqss1_select_q(a, f, qv)
    assert q_new == pytest.approx(0.1)
    assert d == pytest.approx(90.0)
    assert d > 0.0


def test_select_implicit_root():
    f = lambda q: -100.0 * (q[0] - 0.05)
    a, qv = _atom_for(f, 0.0, 0.0, 0.1)
    q_new, d = liqss1_select_q(a, f, qv)
    assert q_new == pytest.approx(0.05)
    assert d == pytest.approx(0.0, abs=1e-9)
    assert a.a_diag == pytest.approx(-100.0)


def test_select_stalls_without_slope_estimate():
    # only the upper edge is reachable from x = 0.09 and it is rejected there;
    # with no slope estimate the output is held and the atom waits
    a = QdlAtom(id=0, x=0.09, q=0.0, dq=0.1, dxdt=5.0)
    qv = [0.0]
    assert liqss1_select_q(a, lambda q: -2.0, qv) == (0.0, 0.0)
    assert qv == [0.0]


# ----- single steps and small systems -----


def test_single_step_trace():
    res = run(system([[-1.0]], [1.0], [0.1]), EngineConfig(0.15))
    rows = list(res.log.rows())
    assert len(rows) == 1
    t, j, x, q, count = rows[0]
    assert t == pytest.approx(0.1)
    assert (j, count) == (0, 1)
    assert q == pytest.approx(0.9)
    assert x == pytest.approx(0.9)
    assert res.atoms[0].dxdt == pytest.approx(-0.9)
    assert res.atoms[0].t_next == pytest.approx(0.1 + 0.1 / 0.9)


def test_internal_transition_at_rest_returns_nothing():
    eng = Engine(system([[0.0, 0.0], [0.0, 0.0]], [0.0, 0.0], [0.1, 0.1]), EngineConfig(1.0))
    eng.initialize()
    assert eng.internal_transition(0, 0.5) == ()
    assert eng.atoms[0].q == 0.0


def test_internal_transition_rejects_past_time():
    eng = Engine(system([[-1.0]], [1.0], [0.1]), EngineConfig(1.0))
    eng.initialize(0.5)
    with pytest.raises(SchedulingError):
        eng.internal_transition(0, 0.1)


def test_external_transition_schedules_resting_atom():
    eng = Engine(system([[0.0, 0.0], [1.0, 0.0]], [0.0, 0.0], [0.1, 0.1]), EngineConfig(1.0))
    eng.initialize()
    assert eng.atoms[1].t_next == math.inf
    eng.qv[0] = 0.5
    eng.external_transition(1, 0.2)
    assert eng.atoms[1].dxdt == pytest.approx(0.5)
    assert eng.atoms[1].t_next == pytest.approx(0.2 + 0.1 / 0.5)


def test_external_transition_same_slope_keeps_schedule():
    eng = Engine(system([[-1.0, 0.0], [0.0, -2.0]], [1.0, 1.0], [0.1, 0.1]), EngineConfig(1.0))
    eng.initialize()
    before = eng.atoms[1].t_next
    eng.external_transition(1, 0.01)
    assert eng.atoms[1].t_next == pytest.approx(before, rel=1e-12)


def test_chain_reschedules_once_per_upstream_change():
    A = [[-1.0, 0.0], [1.0, -1.0]]
    res = run(system(A, [1.0, 0.0], [0.01, 0.01]), EngineConfig(5.0))
    ts, qs = res.log.for_atom(0)
    changes = sum(1 for a, b in zip([1.0] + qs, qs) if a != b)
    assert res.n_external[1] == changes
    assert res.n_external[0] == 0
    assert sup_error(res, A, [1.0, 0.0], 5.0) <= 4 * 0.01


def test_two_state_bounded_error():
    A = [[-1.0, 0.0], [500.0, -1000.0]]
    x0 = [1.0, 0.5]
    res = run(system(A, x0, [1e-3, 1e-3]), EngineConfig(10.0))
    assert sup_error(res, A, x0, 10.0) <= 4e-3


def test_zero_field_no_events():
    res = run(system([[0.0, 0.0], [0.0, 0.0]], [1.0, 2.0], [0.1, 0.1]), EngineConfig(3.0))
    assert res.total_updates == 0
    assert len(res.log) == 0


def test_empty_system():
    res = run(QdlSystem([], [], [], []), EngineConfig(2.0, sample_dt=0.5))
    assert res.total_updates == 0
    assert res.t_stop == 2.0
    assert not res.truncated
    assert res.grid_t == [0.0, 0.5, 1.0, 1.5, 2.0]


def test_equilibrium_start_is_silent():
    # x* = -A^-1 b lies on the quantum grid
    A = [[-2.0, 1.0], [1.0, -3.0]]
    b = [2.0 * 0.5 - 1.0 * 0.25, -1.0 * 0.5 + 3.0 * 0.25]
    res = run(system(A, [0.5, 0.25], [0.05, 0.05], b), EngineConfig(10.0))
    assert res.total_updates == 0


@pytest.mark.parametrize("R, dq", [(30.0, 1e-3), (1.0, 1e-2), (5.0, 1e-4)])
def test_ramp_update_count(R, dq):
    T = 2.0
    # the last crossing lands on T itself; a hair of slack keeps it inside the horizon
    res = run(system([[0.0]], [0.0], [dq], b=[R / T]), EngineConfig(T * (1 + 1e-9)))
    assert R / dq <= res.updates[0] <= 3 * R / dq


# ----- properties -----


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.5, 50.0), c=st.floats(-2.0, 2.0), k=st.floats(0.5, 200.0),
       dq=st.sampled_from([1e-3, 5e-3, 2e-2]))
def test_band_and_step_size(a, c, k, dq):
    A = [[-a, c], [k * 0.1, -k]]
    res = run(system(A, [1.0, -0.5], [dq, dq]), EngineConfig(1.0, event_cap=200_000))
    last = list(res.q0)
    for t, j, x, q, count in res.log.rows():
        assert abs(x - q) <= dq * (1 + 1e-6)
        step = abs(q - last[j])
        # band-edge moves are exactly one quantum; implicit moves stay within one
        assert step <= dq * (1 + 1e-9)
        last[j] = q


@settings(max_examples=20, deadline=None)
@given(rate=st.floats(0.1, 20.0), sign=st.sampled_from([-1.0, 1.0]),
       dq=st.sampled_from([1e-3, 1e-2, 0.1]))
def test_ramp_outputs_on_quantum_grid(rate, sign, dq):
    res = run(system([[0.0]], [0.0], [dq], b=[sign * rate]), EngineConfig(0.5))
    for *_, q, _ in res.log.rows():
        k = q / dq
        assert abs(k - round(k)) < 1e-6


@settings(max_examples=15, deadline=None)
@given(a=st.floats(0.5, 20.0), k=st.floats(0.5, 50.0))
def test_counts_monotone(a, k):
    res = run(system([[-a, 1.0], [1.0, -k]], [1.0, 1.0], [1e-2, 1e-2]), EngineConfig(2.0))
    seen = [0, 0]
    t_prev = 0.0
    for t, j, x, q, count in res.log.rows():
        assert t >= t_prev
        assert count > seen[j]
        seen[j] = count
        t_prev = t


# ----- scheduling -----


def test_queue_ties_go_to_lowest_id():
    qu = EventQueue(4)
    for j in (3, 1, 2):
        qu.update(j, 0.5)
    assert qu.peek() == (0.5, 1)
    qu.update(1, 0.7)
    assert qu.peek() == (0.5, 2)
    assert len(qu) == 3


def test_queue_empty():
    assert EventQueue(0).peek()[0] == math.inf
    assert EventQueue(3).peek()[0] == math.inf


def test_simultaneous_events_in_id_order():
    # identical independent atoms fire at identical times
    res = run(system([[0.0, 0.0, 0.0]] * 3, [0.0] * 3, [0.1] * 3, b=[1.0, 1.0, 1.0]),
              EngineConfig(0.35))
    ids = [j for _, j, *_ in res.log.rows()]
    assert ids == [0, 1, 2] * 3


def test_deterministic_log(tmp_path):
    A = [[-3.0, 2.0, 0.0], [1.0, -50.0, 5.0], [0.0, 4.0, -400.0]]
    paths = []
    for k in range(2):
        res = run(system(A, [1.0, -1.0, 0.3], [1e-3, 1e-3, 1e-3]), EngineConfig(2.0))
        p = tmp_path / f"ev{k}.csv"
        res.log.write_csv(p, ["run"])
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_text().splitlines()[1] == "t,atom_id,x,q,update_count"


def test_resting_atom_never_updated():
    # atom 2 has zero slope and only reads itself
    A = [[-1.0, 0.5, 0.0], [0.3, -2.0, 0.0], [0.0, 0.0, 0.0]]
    res = run(system(A, [1.0, 1.0, 7.0], [1e-2] * 3), EngineConfig(5.0))
    assert res.updates[2] == 0
    assert res.updates[0] > 0


def test_cap_truncates():
    res = run(system([[0.0]], [0.0], [1e-3], b=[1.0]), EngineConfig(10.0, event_cap=100))
    assert res.truncated
    assert res.total_updates == 100
    assert res.t_stop < 10.0


def test_grid_sampling_holds_outputs():
    res = run(system([[0.0]], [0.0], [0.1], b=[1.0]), EngineConfig(1.0, sample_dt=0.25))
    assert res.grid_t == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert [row[0] for row in res.grid_x] == pytest.approx(res.grid_t)
    for t, row in zip(res.grid_t, res.grid_q):
        assert abs(row[0] - t) <= 0.1 + 1e-12


# ----- disturbances -----


def _switch(j, fn, deps):
    return lambda: {j: DerivativeClosure(fn, deps)}


def test_disturbance_without_effect_is_silent():
    sys = system([[0.0, 0.0], [0.0, 0.0]], [0.0, 0.0], [0.1, 0.1])
    res = run(sys, EngineConfig(1.0), [Disturbance(0.5, _switch(1, lambda q: 0.0, (1,)))])
    assert res.total_updates == 0


def test_disturbance_reaches_only_changed_atoms():
    sys = system([[0.0, 0.0, 0.0]] * 3, [0.0] * 3, [0.1] * 3)
    step = Disturbance(0.5, _switch(1, lambda q: 1.0, (1,)))
    res = run(sys, EngineConfig(1.0), [step])
    assert res.n_external == [0, 1, 0]
    assert res.updates[0] == res.updates[2] == 0
    ts, _ = res.log.for_atom(1)
    assert ts[0] == pytest.approx(0.6)
