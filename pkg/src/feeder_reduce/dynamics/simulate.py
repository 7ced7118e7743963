"""Quasi-static fault simulation of a reduced feeder and event metrics."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from ..model import FeederError
from ..reduction import ReducedFeederModel
from .devices import (
    CHATTERING,
    CLOSED,
    CONTACTOR_MODES,
    DISCONNECTED,
    OPEN,
    RUNNING,
    SPHIM_MODES,
    STALLED,
    ContactorParams,
    ContactorState,
    SphimParams,
    SphimState,
    contactor_step,
    sphim_connect,
    sphim_step,
)
from .network import ChainNetwork, NetworkSolveError, solve_chain
from .scenario import PHASES, ScenarioSpec, positive_sequence, source_thevenin

N_SEG = 3


@dataclass(frozen=True)
class DynamicsParams:
    """Device and network settings shared by every simulation.

    ``dist_tx_pct`` and ``dist_tx_xr`` size the distribution transformer
    between each segment bus and its load terminal on the segment's own
    load base. ``head_capacitor`` is the head shunt in pu Mvar at 1 pu
    voltage, or ``None`` to size it so the head sits at the source voltage
    before the fault. ``load_v_break`` is the terminal voltage below which
    the voltage-dependent load currents turn into constant impedance.
    """

    contactor: ContactorParams = ContactorParams()
    sphim: SphimParams = SphimParams()
    dist_tx_pct: float = 2.0
    dist_tx_xr: float = 4.0
    head_capacitor: Optional[float] = None
    network_tol: float = 1e-10
    network_max_iter: int = 200
    load_v_break: float = 0.3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "DynamicsParams":
        if d is None:
            return cls()
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dynamics parameters: {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k not in ("contactor", "sphim")}
        return cls(
            contactor=ContactorParams.from_dict(d.get("contactor")),
            sphim=SphimParams.from_dict(d.get("sphim")),
            **kw,
        )


@dataclass(frozen=True)
class SegmentLoad:
    """Per-phase load of one segment at 1 pu terminal voltage."""

    sphim: complex
    motor: complex
    resistive: float

    @classmethod
    def from_segment(cls, s_seg: complex, shares) -> "SegmentLoad":
        p, q = s_seg.real, s_seg.imag
        motor_share = shares.sphim + shares.three_phase_motor
        if motor_share == 0:
            # a purely static segment keeps its reactive demand as impedance
            return cls(0j, 0j, p) if q == 0 else cls(0j, complex(0.0, q), p)
        q_s = q * shares.sphim / motor_share
        q_m = q * shares.three_phase_motor / motor_share
        return cls(complex(p * shares.sphim, q_s), complex(p * shares.three_phase_motor, q_m), p * shares.resistive)


@dataclass
class TimeSeries:
    """Per-step record of one simulation. Device arrays are indexed ``[step, phase, segment]``."""

    scenario: ScenarioSpec
    t_ms: np.ndarray
    v_head: np.ndarray  # complex, [step, phase]
    v_bus: np.ndarray  # magnitudes
    v_terminal: np.ndarray
    contactor_mode: np.ndarray  # index into CONTACTOR_MODES
    connected: np.ndarray
    sphim_mode: np.ndarray  # index into SPHIM_MODES
    speed: np.ndarray
    p_head: np.ndarray  # three-phase pu
    q_head: np.ndarray
    model_name: str = ""
    head_capacitor: float = 0.0

    @property
    def v_head_pos(self) -> np.ndarray:
        """Positive-sequence head voltage magnitude per step."""
        return np.array([abs(positive_sequence(v)) for v in self.v_head])

    @property
    def n_steps(self) -> int:
        return self.t_ms.size

    def to_csv(self, path) -> None:
        cols = ["t_ms", "v_head_pos", "v_head_a", "v_head_b", "v_head_c", "p_head", "q_head"]
        for ph in PHASES:
            for k in range(N_SEG):
                cols += [f"v_term_{ph}{k + 1}", f"connected_{ph}{k + 1}", f"speed_{ph}{k + 1}"]
        vpos = self.v_head_pos
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i in range(self.n_steps):
                row = [f"{self.t_ms[i]:.3f}", f"{vpos[i]:.6f}"]
                row += [f"{abs(v):.6f}" for v in self.v_head[i]]
                row += [f"{self.p_head[i]:.6f}", f"{self.q_head[i]:.6f}"]
                for p in range(3):
                    for k in range(N_SEG):
                        row += [
                            f"{self.v_terminal[i, p, k]:.6f}",
                            str(int(self.connected[i, p, k])),
                            f"{self.speed[i, p, k]:.4f}",
                        ]
                w.writerow(row)


def _load_arrays(model: ReducedFeederModel):
    return [SegmentLoad.from_segment(s.load_fraction * model.rated_load, s.composition) for s in model.segments]


def _transformer_z(model: ReducedFeederModel, params: DynamicsParams) -> np.ndarray:
    angle = np.arctan(params.dist_tx_xr)
    z = []
    for s in model.segments:
        base = abs(s.load_fraction * model.rated_load)
        scale = 1.0 / base if base > 0 else 1.0
        z.append(params.dist_tx_pct / 100.0 * scale * np.exp(1j * angle))
    return np.array(z)


def _phase_loads(loads, sphims, connected):
    """Constant-admittance part and in-phase current magnitudes for one phase."""
    y = np.zeros(N_SEG, dtype=complex)
    i = np.zeros(N_SEG)
    for k, (ld, m, conn) in enumerate(zip(loads, sphims, connected)):
        y[k] += ld.resistive - 1j * ld.motor.imag
        i[k] += ld.motor.real
        if not conn or m.mode == DISCONNECTED:
            continue
        if m.mode == STALLED:
            y[k] += 1.0 / m.locked_rotor_z
        else:
            y[k] += -1j * m.running_pq.imag
            i[k] += m.running_pq.real
    return y, i


def head_capacitor_for(model: ReducedFeederModel, scenario: ScenarioSpec, params: DynamicsParams) -> float:
    """Head shunt (pu Mvar at 1 pu) that holds the pre-fault head at the source voltage."""
    loads = _load_arrays(model)
    ztx = _transformer_z(model, params)
    emf, zth = source_thevenin(replace_fault(scenario), 0.0)
    sph = [SphimState.rated(ld.sphim, params.sphim) for ld in loads]
    y, i = _phase_loads(loads, sph, [True] * N_SEG)

    def err(b):
        net = ChainNetwork(model.impedances, ztx, b)
        vb, _ = solve_chain(net, emf[0], zth[0], y, i, tol=1e-13, max_iter=500, v_break=params.load_v_break)
        return abs(vb[0]) - scenario.source_v

    return float(brentq(err, -2.0, 5.0, xtol=1e-14))


def replace_fault(scenario: ScenarioSpec) -> ScenarioSpec:
    return replace(scenario, fault_impedance=None)


def simulate_scenario(
    model: ReducedFeederModel, scenario: ScenarioSpec, params: Optional[DynamicsParams] = None
) -> TimeSeries:
    """Step the reduced feeder through ``scenario``.

    Each step applies the source for the current fault state, solves every
    phase of the chain with the present device states, records, and then
    advances every contactor and motor with its terminal voltage.
    """
    params = DynamicsParams() if params is None else params
    loads = _load_arrays(model)
    ztx = _transformer_z(model, params)
    b_head = params.head_capacitor
    if b_head is None:
        b_head = head_capacitor_for(model, scenario, params)
    net = ChainNetwork(model.impedances, ztx, b_head)

    contactors = [
        [ContactorState(params=params.contactor, phase=ph, segment=k + 1) for k in range(N_SEG)] for ph in PHASES
    ]
    motors = [
        [SphimState.rated(loads[k].sphim, params.sphim, phase=ph, segment=k + 1) for k in range(N_SEG)]
        for ph in PHASES
    ]

    n = scenario.n_steps
    dt = scenario.dt_ms
    t_arr = np.arange(n) * dt
    v_head = np.zeros((n, 3), dtype=complex)
    v_bus = np.zeros((n, 3, N_SEG))
    v_term = np.zeros((n, 3, N_SEG))
    c_mode = np.zeros((n, 3, N_SEG), dtype=np.int8)
    conn_arr = np.zeros((n, 3, N_SEG), dtype=bool)
    m_mode = np.zeros((n, 3, N_SEG), dtype=np.int8)
    speed = np.zeros((n, 3, N_SEG))
    p_head = np.zeros(n)
    q_head = np.zeros(n)
    c_index = {m: i for i, m in enumerate(CONTACTOR_MODES)}
    m_index = {m: i for i, m in enumerate(SPHIM_MODES)}
    last = [None, None, None]
    cache: dict = {}

    for step in range(n):
        t = float(t_arr[step])
        emf, zth = source_thevenin(scenario, t)
        s_head = 0j
        for p in range(3):
            conn = [c.connected(t) for c in contactors[p]]
            # apply (dis)connection before the solve so the network sees it
            motors[p] = [sphim_connect(m, cn) for m, cn in zip(motors[p], conn)]
            y, i_mag = _phase_loads(loads, motors[p], conn)
            key = (p, complex(emf[p]), complex(zth[p]), tuple(y), tuple(i_mag))
            if key in cache:
                vb, vt = cache[key]
            else:
                vb, vt = solve_chain(
                    net,
                    emf[p],
                    zth[p],
                    y,
                    i_mag,
                    last[p],
                    params.network_tol,
                    params.network_max_iter,
                    step,
                    params.load_v_break,
                )
                cache[key] = (vb, vt)
            last[p] = (vb, vt)
            v_head[step, p] = vb[0]
            v_bus[step, p] = np.abs(vb[1:])
            v_term[step, p] = np.abs(vt)
            i_src = (emf[p] - vb[0]) / zth[p]
            i_feeder = i_src - 1j * b_head * vb[0]
            s_head += vb[0] * np.conj(i_feeder)
            for k in range(N_SEG):
                c_mode[step, p, k] = c_index[contactors[p][k].mode]
                conn_arr[step, p, k] = conn[k]
                m_mode[step, p, k] = m_index[motors[p][k].mode]
                speed[step, p, k] = motors[p][k].speed
        p_head[step] = s_head.real / 3
        q_head[step] = s_head.imag / 3

        for p in range(3):
            conn = conn_arr[step, p]
            for k in range(N_SEG):
                v = float(v_term[step, p, k])
                contactors[p][k] = contactor_step(contactors[p][k], v, t, dt)
                motors[p][k] = sphim_step(motors[p][k], v, bool(conn[k]), dt)[0]

    return TimeSeries(
        scenario, t_arr, v_head, v_bus, v_term, c_mode, conn_arr, m_mode, speed, p_head, q_head,
        model.name, float(b_head),
    )


@dataclass(frozen=True)
class EventMetrics:
    """Contactor and stall summary in the layout of the comparison table.

    Times are ms after fault inception; voltages are positive-sequence
    feeder-head magnitudes. Absent values are ``None``.
    """

    st: str
    t1: Optional[float]
    v1: Optional[float]
    t2: Optional[float]
    v2: Optional[float]
    tms: int
    ims: tuple[int, int, int]
    scenario: str = ""
    model: str = ""

    def __post_init__(self):
        if self.st not in ("trips", "chatters", "noAffect"):
            raise ValueError(f"unknown status {self.st!r}")
        if self.tms != sum(self.ims):
            raise ValueError("TMS must equal the number of stalled segments")
        if self.t1 is not None and self.t2 is not None and self.t2 < self.t1:
            raise ValueError("reconnection cannot precede the first disconnection")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ims"] = list(self.ims)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "EventMetrics":
        return cls(
            d["st"], d.get("t1"), d.get("v1"), d.get("t2"), d.get("v2"), int(d["tms"]),
            tuple(int(x) for x in d["ims"]), d.get("scenario", ""), d.get("model", ""),
        )


def extract_metrics(ts: TimeSeries, fault_start_ms: Optional[float] = None, phase: Optional[str] = None) -> EventMetrics:
    """Summarise the contactors and motors of the faulted phase.

    Any contactor opening makes the row a trip; otherwise any chattering
    makes it chatter. T1/V1 mark the first step at which some contactor has
    left the closed mode and T2/V2 the first later step at which one returns
    to it. IMS flags the segments whose motor is stalled at the end.
    """
    start = ts.scenario.fault_start_ms if fault_start_ms is None else fault_start_ms
    phase = ts.scenario.fault_phase if phase is None else phase
    p = PHASES.index(phase)
    modes = ts.contactor_mode[:, p, :]
    closed = CONTACTOR_MODES.index(CLOSED)
    opened = (modes == CONTACTOR_MODES.index(OPEN)).any()
    chatter = (modes == CONTACTOR_MODES.index(CHATTERING)).any()
    st = "trips" if opened else "chatters" if chatter else "noAffect"
    ims = tuple(int(ts.sphim_mode[-1, p, k] == SPHIM_MODES.index(STALLED)) for k in range(N_SEG))

    t1 = v1 = t2 = v2 = None
    if st != "noAffect":
        vpos = ts.v_head_pos
        away = (modes != closed).any(axis=1)
        i1 = int(np.argmax(away))
        t1, v1 = float(ts.t_ms[i1] - start), float(vpos[i1])
        was_away = modes[i1] != closed
        for i in range(i1 + 1, ts.n_steps):
            back = (modes[i] == closed) & was_away
            if back.any():
                t2, v2 = float(ts.t_ms[i] - start), float(vpos[i])
                break
            was_away |= modes[i] != closed
    return EventMetrics(st, t1, v1, t2, v2, sum(ims), ims, ts.scenario.name, ts.model_name)


@dataclass(frozen=True)
class SweepCell:
    scenario: str
    metrics: Optional[EventMetrics]
    error: Optional[str] = None


def _run_cell(args):
    model, scenario, params = args
    try:
        return SweepCell(scenario.name, extract_metrics(simulate_scenario(model, scenario, params)))
    except FeederError as exc:
        return SweepCell(scenario.name, None, str(exc))


def scenario_sweep(
    model: ReducedFeederModel,
    grid: Sequence[ScenarioSpec],
    params: Optional[DynamicsParams] = None,
    workers: int = 1,
) -> list[SweepCell]:
    """Simulate every scenario in ``grid`` and return the metrics in grid order.

    A cell that fails records its error and the sweep carries on.
    ``workers > 1`` runs cells in separate processes.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("scenario grid is empty")
    jobs = [(model, s, params) for s in grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]
