"""Per-phase phasor solve of the source, head bus and three-segment chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import FeederError


_NEWTON_START = 1e-3


class NetworkSolveError(FeederError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


@dataclass(frozen=True)
class ChainNetwork:
    """Series chain for one phase, all in pu on the system base.

    Node 0 is the feeder head, fed from ``emf`` through ``z_source`` and
    carrying a shunt susceptance ``b_head``. Segment ``k`` connects the
    previous bus to bus ``k`` through ``z_series[k]`` (zero merges the two
    buses) and its load terminal hangs off bus ``k`` through
    ``z_transformer[k]``.
    """

    z_series: np.ndarray
    z_transformer: np.ndarray
    b_head: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.z_transformer) == 0):
            raise ValueError("distribution transformer impedances must be nonzero")

    @property
    def bus_nodes(self) -> list[int]:
        """Matrix index of every bus, head first."""
        nodes = [0]
        nxt = 1
        for z in self.z_series:
            if z == 0:
                nodes.append(nodes[-1])
            else:
                nodes.append(nxt)
                nxt += 1
        return nodes

    def admittance(self, z_source: complex, y_load: np.ndarray) -> tuple[np.ndarray, list[int], list[int]]:
        """Nodal admittance matrix with constant-admittance loads folded in."""
        buses = self.bus_nodes
        n_bus = max(buses) + 1
        terms = [n_bus + k for k in range(len(self.z_series))]
        y = np.zeros((n_bus + len(terms),) * 2, dtype=complex)

        def branch(a, b, z):
            yy = 1.0 / z
            y[a, a] += yy
            y[b, b] += yy
            y[a, b] -= yy
            y[b, a] -= yy

        y[0, 0] += 1.0 / z_source + 1j * self.b_head
        for k, z in enumerate(self.z_series):
            if z != 0:
                branch(buses[k], buses[k + 1], z)
            branch(buses[k + 1], terms[k], self.z_transformer[k])
            y[terms[k], terms[k]] += y_load[k]
        return y, buses, terms


def solve_chain(
    net: ChainNetwork,
    emf: complex,
    z_source: complex,
    y_load: np.ndarray,
    i_load: np.ndarray,
    v_start: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    step: int | None = None,
    v_break: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Voltages at (head, bus1..3) and (terminal1..3).

    Loads at terminal ``k`` are ``y_load[k]`` (constant admittance) plus a
    current of magnitude ``i_load[k]`` in phase with the terminal voltage,
    which is how a load with P proportional to |V| behaves. That current is
    carried as a conductance ``i / |v|``, so only the three terminal
    magnitudes are unknown; they are found by Newton iteration and the
    solve stops once the magnitudes reproduce themselves within ``tol``.
    Below ``v_break`` the conductance is frozen at ``i / v_break``, the
    usual conversion of voltage-dependent loads to constant impedance that
    keeps a collapsed terminal solvable.
    """
    if z_source == 0:
        raise NetworkSolveError("source impedance must be nonzero", step)
    if v_break <= 0:
        raise NetworkSolveError("v_break must be positive", step)
    y, buses, terms = net.admittance(z_source, np.asarray(y_load))
    src = np.zeros(y.shape[0], dtype=complex)
    src[0] = emf / z_source
    i_load = np.asarray(i_load, dtype=float)
    if v_start is None:
        mag = np.ones(len(terms))
    else:
        mag = np.abs(np.asarray(v_start[1]))
    def evaluate(mag):
        m = np.maximum(mag, v_break)
        yk = y.copy()
        yk[terms, terms] += i_load / m
        y_inv = np.linalg.inv(yk)
        v = y_inv @ src
        return m, y_inv, v, np.abs(v[terms]) - mag

    # the in-phase current is a conductance i/|v| at magnitude ``mag``;
    # substitution until close, then damped Newton on the magnitudes with the exact Jacobian of |v(mag)|
    eye = np.eye(len(terms))
    m, y_inv, v, resid = evaluate(mag)
    delta = float(np.max(np.abs(resid)))
    for _ in range(max_iter):
        if delta < tol:
            return v[buses], v[terms]
        vt = v[terms]
        vt_abs = np.abs(vt)
        if delta > _NEWTON_START:
            # far from the solution a plain substitution is the safer move
            mag = vt_abs
            m, y_inv, v, resid = evaluate(mag)
            delta = float(np.max(np.abs(resid)))
            continue
        dv = y_inv[np.ix_(terms, terms)] * (vt * i_load / m**2 * (mag > v_break))[None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            jac = np.where(vt_abs[:, None] > 0, (np.conj(vt)[:, None] * dv).real / vt_abs[:, None], 0.0)
        try:
            step_m = np.linalg.solve(jac - eye, -resid)
        except np.linalg.LinAlgError:
            step_m = resid
        lam = 1.0
        while True:
            trial = np.maximum(mag + lam * step_m, 0.0)
            out = evaluate(trial)
            new_delta = float(np.max(np.abs(out[3])))
            if new_delta < delta or lam < 1e-3:
                break
            lam *= 0.5
        mag = trial
        m, y_inv, v, resid = out
        delta = new_delta
    raise NetworkSolveError(f"network solve did not converge (last change {delta:.2e} pu)", step)
