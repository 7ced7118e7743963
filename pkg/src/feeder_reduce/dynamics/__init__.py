"""Phasor-domain fault studies on reduced three-segment feeders."""

from .devices import (
    ContactorParams,
    ContactorState,
    SphimParams,
    SphimState,
    contactor_step,
    sphim_connect,
    sphim_step,
)
from .network import ChainNetwork, NetworkSolveError, solve_chain
from .scenario import (
    REFERENCE_FAULT_IMPEDANCE,
    ScenarioError,
    ScenarioSpec,
    during_fault_head_voltages,
    positive_sequence,
    reference_scenario,
)
from .simulate import (
    DynamicsParams,
    EventMetrics,
    SweepCell,
    TimeSeries,
    extract_metrics,
    scenario_sweep,
    simulate_scenario,
)

__all__ = [
    "ChainNetwork",
    "ContactorParams",
    "ContactorState",
    "DynamicsParams",
    "EventMetrics",
    "NetworkSolveError",
    "REFERENCE_FAULT_IMPEDANCE",
    "ScenarioError",
    "ScenarioSpec",
    "SphimParams",
    "SphimState",
    "SweepCell",
    "TimeSeries",
    "contactor_step",
    "during_fault_head_voltages",
    "extract_metrics",
    "positive_sequence",
    "reference_scenario",
    "scenario_sweep",
    "simulate_scenario",
    "solve_chain",
    "sphim_connect",
    "sphim_step",
]
