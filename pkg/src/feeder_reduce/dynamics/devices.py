"""Contactor and single-phase induction motor state machines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Mapping, Optional

import numpy as np

CLOSED, OPEN, CHATTERING = "closed", "open", "chattering"
RUNNING, STALLED, DISCONNECTED = "running", "stalled", "disconnected"
CONTACTOR_MODES = (CLOSED, OPEN, CHATTERING)
SPHIM_MODES = (RUNNING, STALLED, DISCONNECTED)


def _from_mapping(cls, d: Optional[Mapping]):
    if d is None:
        return cls()
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class ContactorParams:
    """Thresholds are load-terminal voltages in pu; times in ms."""

    v_dropout: float = 0.43
    v_chatter_high: float = 0.55
    v_reconnect: float = 0.60
    dropout_delay_ms: float = 10.0
    reconnect_delay_ms: float = 40.0
    chatter_period_ms: float = 20.0
    chatter_duty: float = 0.5  # fraction of each period spent connected

    def __post_init__(self):
        if not self.v_dropout < self.v_chatter_high <= self.v_reconnect:
            raise ValueError("need v_dropout < v_chatter_high <= v_reconnect")
        if self.dropout_delay_ms < 0 or self.reconnect_delay_ms < 0:
            raise ValueError("delays must be nonnegative")
        if self.chatter_period_ms <= 0 or not 0 < self.chatter_duty < 1:
            raise ValueError("chatter period must be positive and duty in (0, 1)")

    to_dict = asdict

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "ContactorParams":
        return _from_mapping(cls, d)


@dataclass(frozen=True)
class ContactorState:
    """One aggregate contactor. Timers hold the time a condition began, or None."""

    mode: str = CLOSED
    params: ContactorParams = ContactorParams()
    deep_since: Optional[float] = None  # v < v_dropout
    low_since: Optional[float] = None  # v < v_chatter_high
    high_since: Optional[float] = None  # v >= v_reconnect
    chatter_since: Optional[float] = None
    phase: str = "A"
    segment: int = 1

    def connected(self, t_ms: float) -> bool:
        """Whether the load is energised during the step starting at ``t_ms``."""
        if self.mode == CLOSED:
            return True
        if self.mode == OPEN:
            return False
        p = self.params
        into = (t_ms - self.chatter_since) % p.chatter_period_ms
        # open half first: chattering starts with a dropout
        return into >= (1.0 - p.chatter_duty) * p.chatter_period_ms - 1e-9


def contactor_step(c: ContactorState, v_terminal: float, t: float, dt: float) -> ContactorState:
    """Advance ``c`` over ``[t, t + dt)`` given the terminal voltage at ``t``.

    A condition that has held since ``t0`` fires once ``t + dt - t0``
    reaches its delay, so a step change at ``t0`` acts at ``t0 + delay``.
    Deep undervoltage opens the contactor; a sag inside the chatter band
    starts chattering; a long enough return above the reconnect level
    closes it again.
    """
    p = c.params
    deep = c.deep_since if v_terminal < p.v_dropout else None
    if v_terminal < p.v_dropout and deep is None:
        deep = t
    low = c.low_since if v_terminal < p.v_chatter_high else None
    if v_terminal < p.v_chatter_high and low is None:
        low = t
    high = c.high_since if v_terminal >= p.v_reconnect else None
    if v_terminal >= p.v_reconnect and high is None:
        high = t
    t_next = t + dt
    eps = 1e-9
    mode, chatter_since = c.mode, c.chatter_since

    if mode in (CLOSED, CHATTERING) and deep is not None and t_next - deep >= p.dropout_delay_ms - eps:
        mode, chatter_since = OPEN, None
    elif mode == CLOSED and low is not None and t_next - low >= p.dropout_delay_ms - eps:
        mode, chatter_since = CHATTERING, t_next
    elif mode in (OPEN, CHATTERING) and high is not None and t_next - high >= p.reconnect_delay_ms - eps:
        mode, chatter_since = CLOSED, None
    return replace(c, mode=mode, deep_since=deep, low_since=low, high_since=high, chatter_since=chatter_since)


@dataclass(frozen=True)
class SphimParams:
    """Aggregate single-phase induction motor behaviour.

    ``lr_current`` is the locked-rotor current at 1 pu voltage as a multiple
    of rated current and ``lr_xr`` its X/R ratio. Speed is tracked for
    reporting and for the restart check: it coasts down linearly over
    ``coast_ms`` while unpowered, recovers over ``accel_ms`` while
    running and is zero once stalled.

    An under-voltage episode starts when the terminal falls below
    ``v_stall`` and lasts until it recovers to ``v_recover`` or the motor
    is disconnected; the motor stalls once an episode has lasted
    ``stall_exposure_ms``. Setting ``v_recover`` equal to ``v_stall``
    makes the episode end as soon as the voltage is back above the stall
    level.
    """

    v_stall: float = 0.562
    v_recover: float = 0.60
    stall_exposure_ms: float = 30.0
    lr_current: float = 5.0
    lr_xr: float = 5.0
    restart_speed: float = 0.4
    coast_ms: float = 100.0
    accel_ms: float = 200.0

    def __post_init__(self):
        if self.v_recover < self.v_stall:
            raise ValueError("v_recover must not be below v_stall")
        if self.lr_xr <= 1:
            raise ValueError("locked-rotor X/R must exceed 1")
        if self.lr_current <= 0 or self.stall_exposure_ms < 0:
            raise ValueError("locked-rotor current must be positive and exposure nonnegative")
        if min(self.coast_ms, self.accel_ms) <= 0:
            raise ValueError("speed time constants must be positive")

    to_dict = asdict

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "SphimParams":
        return _from_mapping(cls, d)


@dataclass(frozen=True)
class SphimState:
    mode: str = RUNNING
    running_pq: complex = 0j  # pu at 1 pu voltage
    locked_rotor_z: complex = 0j
    params: SphimParams = SphimParams()
    speed: float = 1.0
    exposure_ms: float = 0.0
    phase: str = "A"
    segment: int = 1

    @classmethod
    def rated(cls, running_pq: complex, params: SphimParams = SphimParams(), **kw) -> "SphimState":
        """State for a motor drawing ``running_pq`` at 1 pu, with its locked-rotor impedance."""
        s = abs(running_pq)
        if s == 0:
            return cls(running_pq=0j, locked_rotor_z=complex(np.inf), params=params, **kw)
        mag = 1.0 / (params.lr_current * s)
        angle = np.arctan(params.lr_xr)
        return cls(running_pq=complex(running_pq), locked_rotor_z=mag * np.exp(1j * angle), params=params, **kw)

    def power(self, v: float) -> complex:
        """Complex power drawn at terminal voltage magnitude ``v``."""
        if self.mode == DISCONNECTED:
            return 0j
        if self.mode == STALLED:
            return v**2 / np.conj(self.locked_rotor_z)
        return complex(self.running_pq.real * v, self.running_pq.imag * v**2)


def sphim_connect(m: SphimState, connected: bool) -> SphimState:
    """Apply a change of supply: dropping out, or reconnecting (which fails
    to restart below ``restart_speed``)."""
    if not connected:
        return m if m.mode == DISCONNECTED else replace(m, mode=DISCONNECTED, exposure_ms=0.0)
    if m.mode == DISCONNECTED:
        if m.speed < m.params.restart_speed:
            return replace(m, mode=STALLED, speed=0.0)
        return replace(m, mode=RUNNING)
    return m


def sphim_step(m: SphimState, v_terminal: float, connected: bool, dt: float) -> tuple[SphimState, complex]:
    """Advance ``m`` by ``dt`` and return it with the power it now draws at ``v_terminal``.

    An under-voltage episode lasting ``stall_exposure_ms`` while energised
    stalls the motor;
    a stalled motor stays stalled until its contactor drops it. Reconnecting
    a motor that has coasted below ``restart_speed`` fails to restart and
    stalls at once.
    """
    p = m.params
    m = sphim_connect(m, connected)
    mode, speed, exposure = m.mode, m.speed, m.exposure_ms
    if not connected:
        speed = max(0.0, speed - dt / p.coast_ms)
    else:
        if mode == RUNNING:
            in_episode = v_terminal < p.v_stall or (exposure > 0 and v_terminal < p.v_recover)
            exposure = exposure + dt if in_episode else 0.0
            if exposure >= p.stall_exposure_ms - 1e-9:
                mode = STALLED
            else:
                speed = min(1.0, speed + dt / p.accel_ms)
        if mode == STALLED:
            exposure, speed = 0.0, 0.0
    new = replace(m, mode=mode, speed=speed, exposure_ms=exposure)
    return new, new.power(v_terminal)
