import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain_dataset, random_radial
from oracles import OHM_PER_MILE, Z_BASE, gauss_seidel
from feeder_reduce.ingest import FeederDataset
from feeder_reduce.model import SectionRecord
from feeder_reduce.powerflow import (
    RadialNetwork,
    SweepError,
    TopologyError,
    collapse_parallel_paths,
    equivalent_impedance,
    head_reactive_compensation,
    parallel_equivalent,
    radial_sweep,
    sweep_voltage_drops,
)


def sec(cond, length, load=None):
    return SectionRecord(0, 1, cond, length, "ABC", load)


# ---------------------------------------------------------------- path equivalent


def test_no_load_sections_add_in_series():
    path = [sec("Type A", 1.0), sec("Type D", 2.0)]
    assert equivalent_impedance(path) == pytest.approx(complex(1.91 + 0.46, 0.37 + 0.62))


def test_loaded_sections_enter_as_their_mean():
    path = [sec("Type D", 1.0), sec("Type A", 1.0, 0.01j), sec("Type C", 1.0, 0.02 + 0j)]
    expected = complex(0.23, 0.31) + (complex(1.91, 0.37) + complex(0.25, 0.21)) / 2
    assert equivalent_impedance(path) == pytest.approx(expected, abs=1e-15)


def test_sum_switch_adds_loaded_sections():
    path = [sec("Type D", 1.0), sec("Type A", 1.0, 0.01j), sec("Type C", 1.0, 0.02 + 0j)]
    expected = complex(0.23, 0.31) + complex(1.91, 0.37) + complex(0.25, 0.21)
    assert equivalent_impedance(path, loaded_term="sum") == pytest.approx(expected, abs=1e-15)


def test_all_loaded_path_is_the_mean():
    path = [sec("Type B", 2.0, 0.01 + 0j), sec("Type B", 4.0, 0.01 + 0j)]
    assert equivalent_impedance(path) == pytest.approx(3.0 * complex(0.63, 0.38))


def test_equivalent_impedance_rejects_empty_path_and_bad_term():
    with pytest.raises(ValueError):
        equivalent_impedance([])
    with pytest.raises(ValueError):
        equivalent_impedance([sec("Type A", 1.0, 1j)], loaded_term="median")


def test_parallel_paths_take_the_mean():
    assert parallel_equivalent([1 + 1j, 3 + 5j]) == 2 + 3j
    with pytest.raises(ValueError):
        parallel_equivalent([])


def random_chain_expectation(rng, h):
    conds = list(OHM_PER_MILE)
    path, no_load, loaded = [], 0j, []
    for _ in range(h):
        c = conds[int(rng.integers(len(conds)))]
        length = float(rng.uniform(0.02, 0.5)) if c != "Busbar" else 0.0
        z = OHM_PER_MILE[c] * length
        if rng.random() < 0.5:
            path.append(sec(c, length, complex(rng.uniform(0, 0.1), rng.uniform(0, 0.05))))
            loaded.append(z)
        else:
            path.append(sec(c, length))
            no_load += z
    return path, no_load + (sum(loaded) / len(loaded) if loaded else 0j)


def test_twenty_random_chains_match_hand_formula():
    rng = np.random.default_rng(7)
    for _ in range(20):
        path, expected = random_chain_expectation(rng, int(rng.integers(1, 15)))
        assert abs(equivalent_impedance(path) - expected) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_equivalent_is_order_independent(seed):
    rng = np.random.default_rng(seed)
    path, _ = random_chain_expectation(rng, 8)
    perm = rng.permutation(len(path))
    shuffled = [path[i] for i in perm]
    assert equivalent_impedance(shuffled) == pytest.approx(equivalent_impedance(path), abs=1e-12)


def test_lumped_equivalent_tracks_sweep_for_long_feed_with_short_loaded_tail():
    # 2 miles of unloaded trunk, then two closely spaced loads
    d = chain_dataset([0.5, 0.5, 0.5, 0.5, 0.05, 0.05], [None] * 4 + [0.02 + 0.01j, 0.02 + 0.01j])
    sol = sweep_voltage_drops(d, head_v=1.0)
    exact = 1.0 - abs(sol.node_voltage[-1])
    z = equivalent_impedance(d.sections) / Z_BASE
    load = d.total_load
    lumped = RadialNetwork.from_arrays([-1, 0], [0, z], [0, load])
    v, *_ = radial_sweep(lumped, 1.0, tol=1e-12)
    approx = 1.0 - abs(v[1])
    assert abs(approx - exact) / exact < 0.05


# ---------------------------------------------------------------- sweep


def test_two_bus_closed_form():
    z, s = 0.01 + 0.03j, 0.3 + 0.1j
    net = RadialNetwork.from_arrays([-1, 0], [0, z], [0, s])
    v, j, *_ = radial_sweep(net, 1.0, tol=1e-14, max_iter=200)
    from scipy.optimize import fsolve

    def f(x):
        vv = complex(*x)
        r = vv - (1.0 - z * np.conj(s / vv))
        return [r.real, r.imag]

    ref = complex(*fsolve(f, [1.0, 0.0], xtol=1e-15))
    assert abs(v[1] - ref) < 1e-12
    assert abs(j[1] - np.conj(s / ref)) < 1e-11


def test_sweep_matches_gauss_seidel_on_random_feeders():
    rng = np.random.default_rng(11)
    for _ in range(100):
        d = random_radial(rng, int(rng.integers(2, 21)))
        sol = sweep_voltage_drops(d, head_v=1.02)
        ref = gauss_seidel(d, 1.02)
        assert np.max(np.abs(sol.node_voltage - ref)) < 1e-6


def test_power_balance(feeder_a):
    sol = sweep_voltage_drops(feeder_a)
    balance = sol.head_power - (sol.network.load.sum() + sol.losses)
    assert abs(balance) < 1e-8


def test_voltage_non_increasing_along_paths(feeder_a):
    sol = sweep_voltage_drops(feeder_a)
    mag = np.abs(sol.node_voltage)
    net = sol.network
    child = np.flatnonzero(net.parent >= 0)
    assert np.all(mag[child] <= mag[net.parent[child]] + 1e-12)


def test_fixture_head_power_and_voltage(feeder_a):
    sol = sweep_voltage_drops(feeder_a)
    assert abs(sol.head_power_mva) == pytest.approx(3.63, rel=0.01)
    assert sol.min_voltage >= 0.95
    assert sol.converged and sol.iterations <= 100


def test_collapse_parallel_pair_uses_mean_of_paths():
    secs = (
        SectionRecord(0, 1, "Type D", 0.2),
        SectionRecord(1, 2, "Type A", 0.1),
        SectionRecord(1, 3, "Type A", 0.3),
        SectionRecord(2, 4, "Type A", 0.1),
        SectionRecord(3, 4, "Type A", 0.1, load=0.01 + 0j),
    )
    d = FeederDataset(secs, 5, 0)
    radial, collapses = collapse_parallel_paths(d)
    assert len(collapses) == 1
    c = collapses[0]
    assert (c.split, c.merge) == (1, 4)
    za = OHM_PER_MILE["Type A"]
    # path via 2: two unloaded sections; path via 3: one unloaded plus one loaded
    assert c.path_impedances == pytest.approx((0.2 * za, 0.3 * za + 0.1 * za))
    assert c.equivalent == pytest.approx((0.2 * za + 0.4 * za) / 2)
    sol = sweep_voltage_drops(d)
    assert sol.converged and np.isclose(sol.network.load.sum(), 0.01)
    assert len(radial.sections) == 4


def test_parallel_sections_on_same_pair():
    secs = (SectionRecord(0, 1, "Type A", 1.0), SectionRecord(0, 1, "Type C", 1.0, load=0.01 + 0j))
    radial, collapses = collapse_parallel_paths(FeederDataset(secs, 2, 0))
    assert collapses[0].equivalent == pytest.approx((OHM_PER_MILE["Type A"] + OHM_PER_MILE["Type C"]) / 2)


def test_sweep_divergence_raises():
    net = RadialNetwork.from_arrays([-1, 0], [0, 0.5 + 2j], [0, 5 + 5j])
    with pytest.raises(SweepError):
        radial_sweep(net, 1.0, max_iter=50)


def test_disconnected_network_raises():
    with pytest.raises(TopologyError):
        RadialNetwork.from_arrays([-1, 0, -1], [0, 1j, 1j], [0, 0, 0])


def test_solution_export(tmp_path, feeder_a):
    sol = sweep_voltage_drops(feeder_a)
    path = tmp_path / "pf.json"
    sol.to_json(path)
    import json

    body = json.loads(path.read_text())
    assert len(body["nodes"]) == feeder_a.n_nodes
    assert body["head_voltage_pu"] == pytest.approx(1.02)
    assert {"v_pu", "angle_deg"} <= set(body["nodes"][0])


# ---------------------------------------------------------------- head compensation


def test_compensation_zero_load():
    sol = sweep_voltage_drops(chain_dataset([0.1], [0j]))
    assert head_reactive_compensation(sol) == 0


def test_compensation_cancels_reactive_demand():
    d = chain_dataset([0.0], [complex(1.0, 0.4)], conductor="Busbar")
    sol = sweep_voltage_drops(d, head_v=1.0)
    assert head_reactive_compensation(sol, target_pf=1.0) == pytest.approx(0.4j, abs=1e-12)


def test_compensation_holds_head_behind_source(feeder_a):
    sol = sweep_voltage_drops(feeder_a)
    zs = 0.02 + 0.25j
    qc = head_reactive_compensation(sol, target_v=1.02, source_z=zs, source_v=1.02).imag
    s_net = sol.head_power - 1j * qc
    v = 1.02 + 0j
    for _ in range(500):
        v = 1.02 - zs * np.conj(s_net / v)
    assert abs(v) == pytest.approx(1.02, abs=1e-10)
