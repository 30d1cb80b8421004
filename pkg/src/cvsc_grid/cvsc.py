"""Capacitor-voltage synchronizing control.

Three pieces per WPG:

* the phase-angle law: the inverter angle integrates the per-unit
  capacitor-voltage deviation, d(delta_theta)/dt = K_a * dV*, which makes
  capacitor voltage play the role of rotor speed;
* an integral exciter driving the modulation index from the terminal
  voltage error;
* a governor realizing an active-power / capacitor-voltage droop.

Governor wiring (the droop role of k_pg1 is fixed; the rest is this
implementation's split):

* droop (k_pg1): p_me_ref = p_schedule + k_pg1 * (v_nom - v_dc)/v_nom * S;
* fast storage tracking (k_pg2): the storage current reference covers the
  gap between p_me_ref and the measured p_me.  The power error passes
  through a smooth deadband so that the storage is quiescent around the
  equilibrium (it only "functions after the inertial response"); large
  disturbances drive it hard, up to the storage power rating;
* slow restoration (k_pg3): p_in_ref walks toward p_me_ref at rate k_pg3,
  handing sustained load changes over to the machine side.

At steady state the storage current returns to zero and the machine
carries p_me_ref exactly, so the droop relation P_e = p_schedule +
k_pg1 * (-dV*) * S holds without the proportional-path offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBaseError


@dataclass(frozen=True)
class CvscGains:
    """Controller gains of one WPG; the slack machine has no governor."""

    k_a: float = 10.0
    k_e: float = 0.2
    k_pg1: float = 30.0
    k_pg2: float = 15.0
    k_pg3: float = 0.1
    v_dc_nom: float = 1110.0
    has_governor: bool = True

    def __post_init__(self):
        if self.k_a < 0.0:
            raise InvalidBaseError(f"k_a must be non-negative, got {self.k_a}")
        if self.v_dc_nom <= 0.0:
            raise InvalidBaseError(f"v_dc_nom must be positive, got {self.v_dc_nom}")


def delta_vdc_star(v_dc, v_dc_nom):
    """Per-unit capacitor-voltage deviation (v - v_nom) / v_nom."""
    if np.any(np.asarray(v_dc_nom) <= 0.0):
        raise InvalidBaseError(f"v_dc_nom must be positive, got {v_dc_nom}")
    return (v_dc - v_dc_nom) / v_dc_nom


def phase_angle_derivative(v_dc, gains: CvscGains):
    """d(delta_theta)/dt = K_a * dV*  (rad/s); linear in the deviation."""
    return gains.k_a * delta_vdc_star(v_dc, gains.v_dc_nom)


def exciter_derivative(v_t, v_t_ref, k_e, m=None, m_max=1.0):
    """Integral modulation-index exciter with conditional anti-windup.

    dm/dt = k_e (v_ref - v_t); when ``m`` is given and sits at a limit,
    integration against the limit is held (reported derivative 0).
    """
    dm = k_e * (np.asarray(v_t_ref) - np.asarray(v_t))
    if m is None:
        return dm
    m = np.asarray(m)
    blocked_hi = (m >= m_max) & (dm > 0.0)
    blocked_lo = (m <= 0.0) & (dm < 0.0)
    return np.where(blocked_hi | blocked_lo, 0.0, dm)


def smooth_deadband(error, width):
    """Odd, smooth deadband: ~0 inside +-width, error - width*sign outside.

    Implemented as e - width*tanh(e/width); the slope at the origin is
    exactly zero, which keeps the small-signal storage path severed.
    """
    if width <= 0.0:
        return np.asarray(error, dtype=float)
    e = np.asarray(error, dtype=float)
    return e - width * np.tanh(e / width)


def governor_update(v_dc, p_me, p_schedule, gains: CvscGains, s_machine,
                    p_me_meas=None, p_in_ref=None, p_deadband=0.0):
    """Droop + storage + restoration references of the governor.

    Returns (p_me_ref, i_s_ref, dp_in_ref) in (W, A, W/s).  For a WPG
    without governor the schedule passes through untouched, the storage
    reference is zero and p_in_ref is held.

    ``p_me`` is the measured capacitor input power; ``p_in_ref`` the
    current machine-side power reference state (defaults to schedule).
    """
    v_dc = np.asarray(v_dc, dtype=float)
    p_me = np.asarray(p_me, dtype=float)
    p_schedule = np.asarray(p_schedule, dtype=float)
    if p_in_ref is None:
        p_in_ref = p_schedule
    gov = 1.0 if gains.has_governor else 0.0

    droop = gains.k_pg1 * (gains.v_dc_nom - v_dc) / gains.v_dc_nom * s_machine
    p_me_ref = p_schedule + gov * droop
    err = smooth_deadband(p_me_ref - p_me, p_deadband)
    i_s_ref = gov * gains.k_pg2 * err / gains.v_dc_nom
    dp_in_ref = gov * gains.k_pg3 * (p_me_ref - np.asarray(p_in_ref, dtype=float))
    if not gains.has_governor:
        p_me_ref = p_schedule
    return p_me_ref, i_s_ref, dp_in_ref


def capacitor_energy(v_dc, v_dc0, c):
    """Energy moved in or out of the capacitor since v_dc0: C/2 (v^2 - v0^2)."""
    if c <= 0.0:
        raise InvalidBaseError(f"capacitance must be positive, got {c}")
    return 0.5 * c * (np.asarray(v_dc) ** 2 - np.asarray(v_dc0) ** 2)
