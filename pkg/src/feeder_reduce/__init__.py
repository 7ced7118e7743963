"""Reduce detailed radial feeders to three-segment models and study faults on them."""

from .fixtures import load_feeder_a
from .ingest import FeederDataset, ParseError, build_adjacency, parse_sections, validate_topology
from .model import BASE_KV, BASE_MVA, BASE_OHM, ConductorLibrary, FeederError, SectionRecord
from .powerflow import SweepSolution, equivalent_impedance, sweep_voltage_drops
from .reduction import (
    Composition,
    FeederReducer,
    ReducedFeederModel,
    ReductionError,
    builtin_feeder_O,
    reduce_feeder,
)
from .topology import FeederGraph, KamadaKawaiLayout, kamada_kawai_layout

__version__ = "0.1.0"

__all__ = [
    "BASE_KV",
    "BASE_MVA",
    "BASE_OHM",
    "Composition",
    "ConductorLibrary",
    "FeederDataset",
    "FeederError",
    "FeederGraph",
    "FeederReducer",
    "KamadaKawaiLayout",
    "ParseError",
    "ReducedFeederModel",
    "ReductionError",
    "SectionRecord",
    "SweepSolution",
    "build_adjacency",
    "builtin_feeder_O",
    "equivalent_impedance",
    "kamada_kawai_layout",
    "load_feeder_a",
    "parse_sections",
    "reduce_feeder",
    "sweep_voltage_drops",
    "validate_topology",
]
