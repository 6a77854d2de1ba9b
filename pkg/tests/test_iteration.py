import numpy as np
import pytest

from degma.errors import LedgerInconsistencyError, ScheduleFailureError
from degma.geometry import CurveSpec
from degma.grids import GridField
from degma.iteration import (
    IterationFrame,
    IterationState,
    Schedule,
    _chain_bundle,
    _pbar,
    build_L8,
    build_rhs,
    monitor_statements,
    run,
    step,
    taylor_remainder,
)
from degma.linear_solver import galerkin_solve
from degma.problem import MAProblemSpec, phi as residual, scale
from degma.smoothing import smooth_on_window


# ---------------------------------------------------------------------------
# shared fixtures (flat reference problem, small grid)
# ---------------------------------------------------------------------------

SPEC = MAProblemSpec(0.0, 0.0, 0.0, 1.0, "v^3", CurveSpec("v"), 2)


@pytest.fixture(scope="module")
def sp():
    return scale(SPEC, 0.05, 0.5, 0.5)


@pytest.fixture(scope="module")
def frame(sp):
    return IterationFrame(sp, nx=65, ny=65, n_modes=16)


@pytest.fixture(scope="module")
def seed_bundle(sp, frame):
    state = IterationState.initial(sp, 65, 65)
    state.v = smooth_on_window(state.w, 1.0, frame.extend_ledger)
    return state, _chain_bundle(frame, state.v)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_schedule_practical_defaults():
    s = Schedule(0.05, 2, mu=2.0)
    assert s.delta == 0.05
    assert s.mu == 2.0 and s.mu_k(3) == 8.0


def test_schedule_mu_derived_from_epsilon():
    s = Schedule(0.05, 2, b=8, mu=None)
    assert s.mu == pytest.approx(0.05 ** (-1.0 / 9.0))
    assert s.mu > 1.0


def test_schedule_invariants_enforced():
    with pytest.raises(ValueError):
        Schedule(0.05, 2, mu=1.0)          # mu must exceed 1
    with pytest.raises(ValueError):
        Schedule(1.0, 2, mu=2.0)           # delta must lie in (0, 1)


def test_schedule_analysis_mode_rules():
    s = Schedule(0.05, 2, b=27, m_star=58, mu=2.0, analysis_mode=True)
    assert s.b == 27 and s.m_star == 58
    with pytest.raises(ValueError):
        Schedule(0.05, 2, b=27, m_star=57, mu=2.0, analysis_mode=True)
    with pytest.raises(ValueError):
        Schedule(0.05, 2, b=8, m_star=58, mu=2.0, analysis_mode=True)


# ---------------------------------------------------------------------------
# the solvable operator
# ---------------------------------------------------------------------------

def test_stabilizer_shrinks_as_mu_to_minus_four(frame, seed_bundle, sp):
    _, bundle = seed_bundle
    sched = Schedule(0.05, 2, mu=2.0)
    sups = []
    for k in (2, 3):
        L8 = build_L8(bundle, frame, sched, k)
        X, Y = L8.stabilizer.meshgrid()
        inner = (np.abs(X) <= frame.kit.y1) & (np.abs(Y) <= frame.kit.y1)
        sups.append(np.max(np.abs(L8.stabilizer.values[inner])))
    assert abs(sups[1] / sups[0] - sched.mu ** -4.0) < 1e-10


def test_stabilizer_is_linear_in_y_inside_window(frame, seed_bundle, sp):
    _, bundle = seed_bundle
    sched = Schedule(0.05, 2, mu=2.0)
    k = 2
    L8 = build_L8(bundle, frame, sched, k)
    X, Y = L8.stabilizer.meshgrid()
    kit = frame.kit
    inside = (np.abs(X) <= kit.x5) & (np.abs(Y) <= kit.y5)
    expect = sp.epsilon**sp.n * sched.mu_k(k) ** -4.0 * Y[inside]
    assert np.max(np.abs(L8.stabilizer.values[inside] - expect)) == 0.0


def test_far_field_profile_vanishes_on_inner_rectangle(frame):
    kit = frame.kit
    y = np.linspace(-kit.y2, kit.y2, 401)
    assert np.max(np.abs(kit.psi1(y))) == 0.0
    assert kit.psi1(kit.y3 + 2.0) == 1.0 and kit.psi1(-kit.y3 - 2.0) == -1.0


def test_l8_equals_l7_plus_stabilizer_inside(frame, seed_bundle):
    _, bundle = seed_bundle
    sched = Schedule(0.05, 2, mu=2.0)
    L8 = build_L8(bundle, frame, sched, 2)
    L7 = bundle["L7"]
    fe = L8.b11
    sx = int(round((L7.rect.x0 - fe.rect.x0) / fe.hx))
    sy = int(round((L7.rect.y0 - fe.rect.y0) / fe.hy))
    nx, ny = L7.b11.values.shape
    got = fe.values[sx : sx + nx, sy : sy + ny]
    stab = L8.stabilizer.values[sx : sx + nx, sy : sy + ny]
    assert np.max(np.abs(got - (L7.b11.values + stab))) < 1e-15


def test_certificate_attached_and_positive(frame, seed_bundle):
    _, bundle = seed_bundle
    sched = Schedule(0.05, 2, mu=2.0)
    L8 = build_L8(bundle, frame, sched, 0)
    cert = L8.certificate
    assert cert.margins["min_I4"] > 0.0
    assert cert.margins["min_I3_minus_gamma2"] >= 0.0


# ---------------------------------------------------------------------------
# ledger right-hand sides
# ---------------------------------------------------------------------------

def test_rhs_zero_ledger_is_zero_and_update_is_zero(sp, frame):
    sched = Schedule(0.05, 2, mu=2.0)
    state = IterationState.initial(sp, 65, 65)
    state.v = smooth_on_window(state.w, 1.0, frame.extend_ledger)
    bundle = _chain_bundle(frame, state.v)
    zero = GridField.constant(0.0, sp.rect, 65, 65)
    state.E = zero
    stuff, f_ext, _ = build_rhs(bundle, frame, state, sched, zero)
    assert stuff.sup_norm() == 0.0
    assert f_ext.sup_norm() == 0.0
    L8 = build_L8(bundle, frame, sched, 0)
    sol = galerkin_solve(L8, f_ext, frame.basis)
    assert sol.field.sup_norm() == 0.0


def test_rhs_matches_direct_formula(frame):
    # seed branch of the ledger: f = -T[S_k Phi(w_0) / (eps P_k)]; on the
    # flat reference Phi(w_0) = -eps^6 y^3, so the right-hand side must equal
    # T[S_k(eps^6 y^3) / (eps pbar P22^6)] evaluated independently
    sp1 = scale(SPEC, 0.1, 0.5, 0.5)
    sched = Schedule(0.1, 2, mu=2.0)
    fr = IterationFrame(sp1, nx=65, ny=65, n_modes=16)
    st = IterationState.initial(sp1, 65, 65)
    st.k = 3                      # mu_k = 8 passes real spectral content
    st.v = smooth_on_window(st.w, 8.0, fr.extend_ledger)
    bundle = _chain_bundle(fr, st.v)
    _, f_ext, _ = build_rhs(bundle, fr, st, sched, st.phi_w)
    X, Y = st.w.meshgrid()
    s0 = smooth_on_window(
        GridField(sp1.rect, sp1.epsilon**6 * Y**3), 8.0, fr.extend_ledger
    )
    pbar = _pbar(sp1, st.v)
    canon = bundle["canon"]
    direct_xy = GridField(sp1.rect, s0.values / (sp1.epsilon * pbar.values))
    direct = canon.sample_xy(direct_xy, bundle["L7"].rect, 65, 65)
    direct = direct.values / canon.stages["L6"].P22.values
    sx = int(round((bundle["L7"].rect.x0 - f_ext.rect.x0) / f_ext.hx))
    sy = int(round((bundle["L7"].rect.y0 - f_ext.rect.y0) / f_ext.hy))
    got = f_ext.values[sx : sx + 65, sy : sy + 65]
    assert np.max(np.abs(got)) > 1e-7          # the comparison has content
    assert np.max(np.abs(got - direct)) < 1e-10


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def test_taylor_remainder_is_quadratic(sp):
    rng = np.random.default_rng(7)
    w = GridField.from_function(
        lambda X, Y: 0.1 * np.sin(2 * X) * np.cos(Y), sp.rect, 65, 65
    )
    u = GridField.from_function(
        lambda X, Y: 0.05 * np.cos(X) * np.sin(2 * Y), sp.rect, 65, 65
    )
    r1 = taylor_remainder(sp, w, u).sup_norm()
    r2 = taylor_remainder(sp, w, u * 0.5).sup_norm()
    order = np.log2(r1 / r2)
    assert order >= 1.9


def test_two_steps_decrease_residual_and_telescope(sp, frame):
    # the sharp low-pass at scales below the extended rectangle's fundamental
    # frequency passes nothing, so the first productive step is the second
    sched = Schedule(0.05, 2, mu=2.0)
    state = IterationState.initial(sp, 65, 65)
    phi0 = state.phi_w
    r0 = phi0.sup_norm()
    for _ in range(2):
        state = step(frame, state, sched, phi0=phi0)
        assert state.telescoping_defect <= 1e-6 * r0
    assert state.phi_w.sup_norm() < r0
    assert state.error_split["total_sup"] == pytest.approx(
        state.e_prev.sup_norm()
    )


def test_corrupted_ledger_trips_telescoping_check(sp, frame):
    sched = Schedule(0.05, 2, mu=2.0)
    state = IterationState.initial(sp, 65, 65)
    phi0 = state.phi_w
    for _ in range(2):
        state = step(frame, state, sched, phi0=phi0)
    bump = 1e-3 * phi0.sup_norm()
    state.smoothed_ledger_prev = state.smoothed_ledger_prev.like(
        state.smoothed_ledger_prev.values + bump
    )
    with pytest.raises(LedgerInconsistencyError):
        step(frame, state, sched, phi0=phi0)


# ---------------------------------------------------------------------------
# monitors
# ---------------------------------------------------------------------------

def test_monitor_zero_seed(sp):
    sched = Schedule(0.05, 2, mu=2.0)
    state = IterationState.initial(sp, 65, 65)
    table = monitor_statements(state, sched)
    for name in ("II", "III"):
        for m, row in table[name].items():
            assert row["measured"] == 0.0
    for name in ("I", "IV", "V", "VI", "VII"):
        assert all(row is None for row in table[name].values())
    assert table["VIII"][0]["measured"] > 0.0


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def test_run_stops_immediately_below_tolerance(sp):
    sched = Schedule(0.05, 2, mu=2.0, stop_tolerance=1.0)
    w, rep = run(sp, sched, nx=65, ny=65, n_modes=16)
    assert rep["iterations"] == 0 and rep["converged"]
    assert w.sup_norm() == 0.0


def test_run_small_grid_converges(sp):
    sched = Schedule(0.05, 2, mu=2.0)
    w, rep = run(sp, sched, nx=65, ny=65, n_modes=16)
    res = rep["history"]["residual_sup"]
    best = rep["best_iteration"]
    decreases = sum(
        1 for i in range(1, best + 1) if res[i] < res[i - 1]
    )
    assert decreases >= 5
    assert rep["reduction"] <= 0.25
    assert rep["residual_trend"] < 0.0
    assert rep["cauchy_tail_ratio"] < 1.0
    # ledger growth stays far below the schedule envelope eps delta^2 mu_k
    E = rep["history"]["E_sup"]
    envelopes = [
        sp.epsilon * sched.delta**2 * sched.mu_k(k) for k in range(len(E))
    ]
    assert all(e <= env for e, env in zip(E, envelopes))
    # statement VIII trend: measured sup-norm ratio to envelope not exploding
    last = rep["history"]["monitors"][-1]["VIII"][0]
    assert last["measured"] <= rep["history"]["residual_sup"][best] * 1.001


def test_run_divergence_raises_schedule_failure(sp, monkeypatch):
    import degma.iteration as it

    sched = Schedule(0.05, 2, mu=2.0)
    base = IterationState.initial(sp, 33, 33)
    growth = {"r": base.phi_w.sup_norm()}

    def fake_step(frame, state, schedule, phi0=None):
        growth["r"] *= 2.0
        new = IterationState(
            state.k + 1,
            state.w,
            state.E,
            state.phi_w.like(
                np.full_like(state.phi_w.values, growth["r"])
            ),
            u_prev=state.w,
        )
        new.telescoping_defect = 0.0
        return new

    monkeypatch.setattr(it, "step", fake_step)
    with pytest.raises(ScheduleFailureError):
        it.run(sp, sched, nx=33, ny=33, n_modes=8)
