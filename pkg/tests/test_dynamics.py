from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import nodal_chain
from feeder_reduce.dynamics import (
    REFERENCE_FAULT_IMPEDANCE,
    ChainNetwork,
    ContactorParams,
    ContactorState,
    DynamicsParams,
    EventMetrics,
    NetworkSolveError,
    ScenarioError,
    ScenarioSpec,
    SphimParams,
    SphimState,
    contactor_step,
    during_fault_head_voltages,
    extract_metrics,
    positive_sequence,
    reference_scenario,
    scenario_sweep,
    simulate_scenario,
    solve_chain,
    sphim_step,
)
from feeder_reduce.dynamics.devices import CHATTERING, CLOSED, CONTACTOR_MODES, OPEN, RUNNING, SPHIM_MODES, STALLED
from feeder_reduce.dynamics.scenario import A_OP

# ---------------------------------------------------------------- contactor


def run_trace(volts, dt=0.5, params=ContactorParams()):
    c = ContactorState(params=params)
    modes = []
    for i, v in enumerate(volts):
        c = contactor_step(c, v, i * dt, dt)
        modes.append(c.mode)
    return c, modes


@pytest.mark.parametrize(
    "level,expected",
    [(0.95, CLOSED), (0.58, CLOSED), (0.55, CLOSED), (0.49, CHATTERING), (0.43, CHATTERING), (0.30, OPEN)],
)
def test_contactor_classifies_held_voltage(level, expected):
    c, _ = run_trace([level] * 200)
    assert c.mode == expected


def test_chatter_band_midpoint_chatters():
    p = ContactorParams()
    c, modes = run_trace([(p.v_dropout + p.v_chatter_high) / 2] * 100)
    assert c.mode == CHATTERING
    # the transition happens once the dropout delay has elapsed
    assert modes.index(CHATTERING) == int(p.dropout_delay_ms / 0.5) - 1


def test_short_sag_is_ridden_through():
    c, modes = run_trace([1.0] * 20 + [0.3] * 10 + [1.0] * 100)
    assert set(modes) == {CLOSED}


def test_trip_then_reconnect_after_delay():
    p = ContactorParams()
    volts = [0.2] * 100 + [0.9] * 200
    _, modes = run_trace(volts)
    assert OPEN in modes
    back = modes.index(CLOSED, 100)
    assert back == 100 + int(p.reconnect_delay_ms / 0.5) - 1


def test_chattering_connection_pattern():
    c, _ = run_trace([0.5] * 40)
    p = c.params
    pattern = [c.connected(c.chatter_since + k * p.chatter_period_ms / 4) for k in range(8)]
    assert pattern == [False, False, True, True] * 2


def test_deep_sag_from_chatter_opens():
    _, modes = run_trace([0.5] * 40 + [0.2] * 40)
    assert modes[-1] == OPEN


def test_invalid_contactor_params():
    with pytest.raises(ValueError):
        ContactorParams(v_dropout=0.6)
    with pytest.raises(ValueError):
        ContactorParams(chatter_duty=1.0)


# ---------------------------------------------------------------- motor


def test_motor_stalls_after_exposure_and_draws_more_reactive_power():
    m = SphimState.rated(0.01 + 0.005j)
    q_running = m.power(0.4).imag
    steps = 0
    while m.mode == RUNNING:
        m, s = sphim_step(m, 0.4, True, 0.5)
        steps += 1
    assert m.mode == STALLED and m.speed == 0.0
    assert steps * 0.5 == pytest.approx(m.params.stall_exposure_ms)
    assert s.imag > q_running
    assert s.imag / s.real == pytest.approx(m.params.lr_xr)


def test_locked_rotor_current_ratio():
    m = replace(SphimState.rated(0.02 + 0.01j), mode=STALLED)
    assert abs(m.power(1.0)) == pytest.approx(m.params.lr_current * abs(0.02 + 0.01j))


def test_brief_dip_does_not_stall():
    m = SphimState.rated(0.01 + 0.005j)
    for v in [0.4] * 20 + [1.0] * 100:
        m, _ = sphim_step(m, v, True, 0.5)
    assert m.mode == RUNNING and m.exposure_ms == 0


def test_episode_continues_until_recovery_level():
    p = SphimParams()
    m = SphimState.rated(0.01 + 0.005j)
    mid = (p.v_stall + p.v_recover) / 2
    trace = [0.5] * 20 + [mid] * 60
    for v in trace:
        m, _ = sphim_step(m, v, True, 0.5)
    assert m.mode == STALLED
    literal = SphimState.rated(0.01 + 0.005j, SphimParams(v_recover=p.v_stall))
    for v in trace:
        literal, _ = sphim_step(literal, v, True, 0.5)
    assert literal.mode == RUNNING


def test_disconnection_resets_exposure_and_coasts():
    m = SphimState.rated(0.01 + 0.005j)
    m, _ = sphim_step(m, 0.4, True, 10.0)
    m, s = sphim_step(m, 0.4, False, 10.0)
    assert m.exposure_ms == 0 and s == 0 and m.speed < 1.0


def test_reconnect_after_long_outage_stalls():
    m = SphimState.rated(0.01 + 0.005j)
    for _ in range(100):
        m, _ = sphim_step(m, 0.0, False, 1.0)
    assert m.speed < m.params.restart_speed
    m, _ = sphim_step(m, 1.0, True, 0.5)
    assert m.mode == STALLED


def test_reconnect_after_short_outage_runs():
    m = SphimState.rated(0.01 + 0.005j)
    m, _ = sphim_step(m, 0.0, False, 10.0)
    m, _ = sphim_step(m, 1.0, True, 0.5)
    assert m.mode == RUNNING


def test_invalid_motor_params():
    with pytest.raises(ValueError):
        SphimParams(v_recover=0.5)
    with pytest.raises(ValueError):
        SphimParams(lr_xr=0.5)


# ---------------------------------------------------------------- sequence divider


def test_bolted_slg_with_equal_sequence_impedances():
    sc = ScenarioSpec(fault_impedance=0j)
    v = during_fault_head_voltages(sc)
    e = sc.source_v
    assert abs(v[0]) < 1e-15
    assert v[1] == pytest.approx(e * A_OP**2, abs=1e-14)
    assert v[2] == pytest.approx(e * A_OP, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_faulted_phase_voltage_closed_form(rf, xf):
    zf = complex(rf, xf)
    sc = ScenarioSpec(fault_impedance=zf, source_z0=0.05 + 0.6j, source_z2=0.03 + 0.3j)
    total = sc.z1 + sc.z2 + sc.z0 + 3 * zf
    v = during_fault_head_voltages(sc)
    assert v[0] == pytest.approx(3 * zf * sc.source_v / total, abs=1e-12)


@pytest.mark.parametrize("phase,idx", [("A", 0), ("B", 1), ("C", 2)])
def test_faulted_phase_rotation(phase, idx):
    v = during_fault_head_voltages(ScenarioSpec(fault_impedance=0j, fault_phase=phase))
    assert abs(v[idx]) < 1e-14
    assert sorted(np.round(np.abs(v), 12)) == [0.0, 1.02, 1.02]


def test_three_phase_fault_and_no_fault():
    v = during_fault_head_voltages(ScenarioSpec(fault_type="threePhase", fault_impedance=0.25j, source_z=0.25j))
    assert np.abs(v) == pytest.approx([0.51] * 3)
    assert abs(positive_sequence(during_fault_head_voltages(ScenarioSpec(fault_impedance=None)))) == pytest.approx(1.02)


def test_scenario_validation_and_round_trip(tmp_path):
    with pytest.raises(ScenarioError):
        ScenarioSpec(fault_type="LL")
    with pytest.raises(ScenarioError):
        ScenarioSpec(fault_start_ms=990, fault_duration_ms=20)
    with pytest.raises(ScenarioError):
        ScenarioSpec(dt_ms=0.3)
    with pytest.raises(ScenarioError):
        reference_scenario("S4")
    sc = reference_scenario("S2", source_z0=0.1 + 0.7j)
    sc.to_json(tmp_path / "s.json")
    assert ScenarioSpec.from_json(tmp_path / "s.json") == sc
    with pytest.raises(ScenarioError):
        ScenarioSpec.from_dict({"bogus": 1})


# ---------------------------------------------------------------- network solve


@settings(max_examples=40, deadline=None)
@given(
    st.one_of(st.just(0.0), st.floats(1e-3, 0.1)),
    st.one_of(st.just(0.0), st.floats(1e-3, 0.1)),
    st.floats(0.05, 0.4),
    st.floats(0.0, 0.2),
    st.floats(0.4, 1.1),
)
def test_chain_solve_matches_nodal_oracle(z2, z3, load, cur, emf_mag):
    net = ChainNetwork(np.array([0j, z2 * (1 + 0.8j), z3 * (1 + 0.8j)]), np.array([0.05 + 0.2j] * 3), 0.1)
    y = np.array([load * (1 - 0.4j)] * 3)
    i_load = np.array([cur, cur / 2, cur])
    emf = emf_mag * np.exp(0.3j)
    vb, vt = solve_chain(net, emf, 0.03 + 0.3j, y, i_load, tol=1e-12, v_break=1e-6)
    if np.abs(vt).min() < 0.05:
        return
    rb, rt = nodal_chain(emf, 0.03 + 0.3j, 0.1, net.z_series, net.z_transformer, y, i_load)
    assert np.max(np.abs(vb - rb)) < 1e-8
    assert np.max(np.abs(vt - rt)) < 1e-8


def test_reference_steps_match_oracle(model_m):
    # one pre-fault and one during-fault step of the shipped feeder
    from feeder_reduce.dynamics.scenario import source_thevenin
    from feeder_reduce.dynamics.simulate import _load_arrays, _phase_loads, _transformer_z, head_capacitor_for

    params = DynamicsParams()
    sc = reference_scenario("S2")
    loads = _load_arrays(model_m)
    b = head_capacitor_for(model_m, sc, params)
    net = ChainNetwork(model_m.impedances, _transformer_z(model_m, params), b)
    motors = [SphimState.rated(ld.sphim) for ld in loads]
    y, i = _phase_loads(loads, motors, [True] * 3)
    for t in (0.0, 120.0):
        emf, zth = source_thevenin(sc, t)
        vb, vt = solve_chain(net, emf[0], zth[0], y, i)
        rb, rt = nodal_chain(emf[0], zth[0], b, net.z_series, net.z_transformer, y, i)
        assert np.max(np.abs(np.concatenate([vb - rb, vt - rt]))) < 1e-8


def test_chain_solve_errors():
    net = ChainNetwork(np.array([0j, 0.01j, 0.01j]), np.array([0.1j] * 3))
    with pytest.raises(NetworkSolveError):
        solve_chain(net, 1.0, 0j, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        ChainNetwork(np.array([0j] * 3), np.array([0j, 0.1j, 0.1j]))


# ---------------------------------------------------------------- simulation


def test_reruns_are_bit_identical(model_m):
    sc = reference_scenario("S2", t_end_ms=400.0)
    a = simulate_scenario(model_m, sc)
    b = simulate_scenario(model_m, sc)
    for field in ("v_head", "v_terminal", "contactor_mode", "sphim_mode", "speed", "p_head", "q_head"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_metrics_are_consistent(reference_runs):
    for (_, scen), (ts, met) in reference_runs.items():
        assert met.tms == sum(met.ims)
        assert met.scenario == scen


def test_healthy_phases_never_switch(reference_runs):
    closed = CONTACTOR_MODES.index(CLOSED)
    running = SPHIM_MODES.index(RUNNING)
    for ts, _ in reference_runs.values():
        assert np.all(ts.contactor_mode[:, 1:, :] == closed)
        assert np.all(ts.sphim_mode[:, 1:, :] == running)


def test_head_power_stays_nonnegative(reference_runs):
    for ts, _ in reference_runs.values():
        assert ts.p_head.min() >= 0


def test_pre_fault_head_sits_at_source_voltage(reference_runs):
    for ts, _ in reference_runs.values():
        assert ts.v_head_pos[0] == pytest.approx(1.02, abs=1e-9)


@pytest.mark.parametrize("scen", ["S1", "S2"])
def test_halving_the_step_moves_events_by_less_than_a_step(model_m, model_o, scen):
    for model in (model_o, model_m):
        coarse = extract_metrics(simulate_scenario(model, reference_scenario(scen)))
        fine = extract_metrics(simulate_scenario(model, reference_scenario(scen, dt_ms=0.25)))
        assert (fine.st, fine.tms, fine.ims) == (coarse.st, coarse.tms, coarse.ims)
        for a, b in ((coarse.t1, fine.t1), (coarse.t2, fine.t2)):
            assert (a is None) == (b is None)
            if a is not None:
                assert abs(a - b) <= 0.5


def test_severity_is_monotone(model_m):
    rank = {"noAffect": 0, "chatters": 1, "trips": 2}
    grid = [ScenarioSpec(name=f"z{z}", fault_impedance=z, t_end_ms=600.0) for z in (0.6, 0.3, 0.198, 0.1, 0.02)]
    cells = scenario_sweep(model_m, grid)
    levels = [rank[c.metrics.st] for c in cells]
    assert levels == sorted(levels)
    assert [c.scenario for c in cells] == [g.name for g in grid]


def test_sweep_records_failed_cells(model_o):
    params = DynamicsParams(network_max_iter=0)
    cells = scenario_sweep(model_o, [reference_scenario("S3", t_end_ms=200.0)], params)
    assert cells[0].metrics is None and "did not converge" in cells[0].error
    with pytest.raises(ValueError):
        scenario_sweep(model_o, [])


def test_parallel_sweep_matches_serial(model_o):
    grid = [reference_scenario(s, t_end_ms=300.0) for s in ("S1", "S3")]
    assert scenario_sweep(model_o, grid, workers=2) == scenario_sweep(model_o, grid)


def test_time_series_csv(tmp_path, reference_runs):
    ts, _ = reference_runs["O", "S3"]
    path = tmp_path / "ts.csv"
    ts.to_csv(path)
    lines = path.read_text().splitlines()
    assert len(lines) == ts.n_steps + 1
    assert lines[0].startswith("t_ms,v_head_pos")


def test_metrics_round_trip_and_validation():
    m = EventMetrics("chatters", 10.0, 0.4, 60.0, 0.9, 2, (1, 1, 0), "S2", "feeder-M")
    assert EventMetrics.from_dict(m.to_dict()) == m
    with pytest.raises(ValueError):
        EventMetrics("chatters", 10.0, 0.4, 60.0, 0.9, 1, (1, 1, 0))
    with pytest.raises(ValueError):
        EventMetrics("stuck", None, None, None, None, 0, (0, 0, 0))


def test_params_round_trip():
    p = DynamicsParams(sphim=SphimParams(v_stall=0.55, v_recover=0.55), dist_tx_pct=3.0)
    assert DynamicsParams.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        DynamicsParams.from_dict({"nope": 1})


def test_reference_impedances_are_ordered():
    z = REFERENCE_FAULT_IMPEDANCE
    assert z["S1"] < z["S2"] < z["S3"]
