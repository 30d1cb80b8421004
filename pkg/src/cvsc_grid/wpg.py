"""Dynamic models of one full-scale WPG.

Machine-side synchronous generator (flux-linkage form with stator
transients, one field winding, one damper per axis), two-mass drive
train, turbine governor, dc-link capacitor, storage boost path, and the
grid-side inverter terminal phasor.

All functions are pure and broadcast over numpy arrays, so the same code
evaluates a single device (scalars) or a whole fleet (shape ``(n,)``
arrays) in one call.

Sign conventions: generator convention with stator currents positive out
of the machine; rotor currents positive into their windings.  The
machine is loaded by a diode rectifier, modelled as a stiff terminal of
magnitude proportional to the dc-link voltage at unity power factor
(fundamental current in phase with terminal voltage).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CvscGridError
from .sysmodel import WpgParameters, WpgState

# line-to-line RMS of a sine-PWM inverter per volt of dc link at m = 1
K_MOD = math.sqrt(6.0) / 4.0

# average output of an ideal three-phase diode bridge per volt of ac
# line-to-line RMS input
K_RECT = 3.0 * math.sqrt(2.0) / math.pi


@dataclass(frozen=True)
class SgInputs:
    """Terminal conditions driving the machine electrical equations."""

    e_f: float          # excitation voltage, pu (R_f * i_f at steady state)
    v_d: float          # stator terminal voltage, rotor frame, pu
    v_q: float
    omega_r: float      # speed, pu


@dataclass(frozen=True)
class DcLinkInputs:
    """Power bookkeeping at the dc link: p_me = p_in + i_s * v_dc."""

    p_in: float         # W, machine-side injection
    i_s: float          # A, storage current
    p_e: float          # W, inverter draw


@dataclass(frozen=True)
class MachineConstants:
    """Internal machine model constants derived from nameplate reactances.

    Classical conversion from (x_d, x_d', x_d'', x_q, x_q'', x_l, T_d0',
    T_d0'', T_q0''): mutual and leakage reactances per winding plus rotor
    resistances that reproduce the open-circuit time constants.
    """

    x_ad: float
    x_aq: float
    x_fd: float       # field leakage
    x_kd: float       # d damper leakage
    x_kq: float       # q damper leakage
    r_f: float
    r_kd: float
    r_kq: float
    # inverses of the winding inductance matrices (currents from fluxes)
    minv_d: np.ndarray   # 3x3, maps (psi_d, psi_f, psi_kd) -> (-i_d, i_f, i_kd)
    minv_q: np.ndarray   # 2x2, maps (psi_q, psi_kq) -> (-i_q, i_kq)

    @property
    def x_ffd(self):
        return self.x_ad + self.x_fd

    @property
    def x_kkd(self):
        return self.x_ad + self.x_kd

    @property
    def x_kkq(self):
        return self.x_aq + self.x_kq


def machine_constants(p: WpgParameters) -> MachineConstants:
    """Derive winding constants from the nameplate parameter block."""
    w_b = p.omega_base
    x_ad = p.x_d - p.x_l
    x_aq = p.x_q - p.x_l

    x_fd = x_ad * (p.x_d_p - p.x_l) / (p.x_d - p.x_d_p)
    # subtransient: x_d'' = x_l + (x_ad || x_fd || x_kd)
    a = p.x_d_pp - p.x_l
    x_kd = 1.0 / (1.0 / a - 1.0 / x_ad - 1.0 / x_fd)
    b = p.x_q_pp - p.x_l
    x_kq = 1.0 / (1.0 / b - 1.0 / x_aq)

    r_f = (x_ad + x_fd) / (w_b * p.t_d0_p)
    x_par = x_ad * x_fd / (x_ad + x_fd)
    r_kd = (x_kd + x_par) / (w_b * p.t_d0_pp)
    r_kq = (x_kq + x_aq) / (w_b * p.t_q0_pp)

    x_ffd = x_ad + x_fd
    x_kkd = x_ad + x_kd
    x_kkq = x_aq + x_kq
    # psi = M @ (-i_d, i_f, i_kd); solve for currents given fluxes
    m_d = np.array([[p.x_d, x_ad, x_ad],
                    [x_ad, x_ffd, x_ad],
                    [x_ad, x_ad, x_kkd]])
    m_q = np.array([[p.x_q, x_aq],
                    [x_aq, x_kkq]])
    return MachineConstants(
        x_ad=x_ad, x_aq=x_aq, x_fd=x_fd, x_kd=x_kd, x_kq=x_kq,
        r_f=r_f, r_kd=r_kd, r_kq=r_kq,
        minv_d=np.linalg.inv(m_d), minv_q=np.linalg.inv(m_q))


def stator_currents(psi_d, psi_q, psi_f, psi_kd, psi_kq, mc: MachineConstants):
    """Recover all winding currents from flux linkages.

    Returns (i_d, i_q, i_f, i_kd, i_kq); i_d/i_q positive out of the
    stator.  Broadcasts over leading array dimensions.
    """
    md = mc.minv_d
    mq = mc.minv_q
    neg_id = md[0, 0] * psi_d + md[0, 1] * psi_f + md[0, 2] * psi_kd
    i_f = md[1, 0] * psi_d + md[1, 1] * psi_f + md[1, 2] * psi_kd
    i_kd = md[2, 0] * psi_d + md[2, 1] * psi_f + md[2, 2] * psi_kd
    neg_iq = mq[0, 0] * psi_q + mq[0, 1] * psi_kq
    i_kq = mq[1, 0] * psi_q + mq[1, 1] * psi_kq
    return -neg_id, -neg_iq, i_f, i_kd, i_kq


def sg_electrical_derivatives(state: WpgState, inputs: SgInputs, params: WpgParameters):
    """Flux-linkage derivatives of the five machine windings (pu/s).

    Returns (dpsi_d, dpsi_q, dpsi_f, dpsi_kd, dpsi_kq).
    """
    mc = machine_constants(params)
    return _sg_flux_derivatives(
        state.psi_d, state.psi_q, state.psi_f, state.psi_kd, state.psi_kq,
        inputs.v_d, inputs.v_q, inputs.e_f, inputs.omega_r,
        params.r_s, params.omega_base, mc)


def _sg_flux_derivatives(psi_d, psi_q, psi_f, psi_kd, psi_kq,
                         v_d, v_q, e_f, omega_r, r_s, w_b, mc):
    i_d, i_q, i_f, i_kd, i_kq = stator_currents(psi_d, psi_q, psi_f, psi_kd, psi_kq, mc)
    dpsi_d = w_b * (v_d + r_s * i_d + omega_r * psi_q)
    dpsi_q = w_b * (v_q + r_s * i_q - omega_r * psi_d)
    dpsi_f = w_b * (e_f - mc.r_f * i_f)
    dpsi_kd = -w_b * mc.r_kd * i_kd
    dpsi_kq = -w_b * mc.r_kq * i_kq
    return dpsi_d, dpsi_q, dpsi_f, dpsi_kd, dpsi_kq


def electromagnetic_torque(state: WpgState, params: WpgParameters = None):
    """Air-gap torque psi_d*i_q - psi_q*i_d in machine pu."""
    mc = machine_constants(params if params is not None else WpgParameters())
    i_d, i_q, _f, _kd, _kq = stator_currents(
        state.psi_d, state.psi_q, state.psi_f, state.psi_kd, state.psi_kq, mc)
    return state.psi_d * i_q - state.psi_q * i_d


def drive_train_derivatives(omega_t, omega_r, theta_tw, t_mech, t_e, params: WpgParameters):
    """Two-mass shaft: returns (domega_t, domega_r, dtheta_tw).

    2 H_t w_t' = t_mech - K theta - D (w_t - w_r)
    2 H_g w_r' = K theta + D (w_t - w_r) - t_e
    theta'     = w_base (w_t - w_r)
    """
    slip = omega_t - omega_r
    t_shaft = params.k_shaft * theta_tw + params.d_shaft * slip
    domega_t = (t_mech - t_shaft) / (2.0 * params.h_t)
    domega_r = (t_shaft - t_e) / (2.0 * params.h_g)
    dtheta_tw = params.omega_base * slip
    return domega_t, domega_r, dtheta_tw


def rectifier_terminal_voltage(v_dc, params: WpgParameters):
    """Stator terminal voltage magnitude implied by the dc link (machine pu).

    The boost converter fixes V_rect = v_dc * (1 - d_duty); an ideal diode
    bridge maps that back to the ac side, V_ll = V_rect / (3*sqrt(2)/pi).
    """
    return v_dc * (1.0 - params.d_duty) / (K_RECT * params.v_n)


def rectifier_quasi_steady(e_d, e_q, v_mag, omega_r, r_s, xpp_d, xpp_q,
                           r_comm=0.0, i_init=None, tol=1e-13, max_iter=40):
    """Fundamental-frequency rectifier interface of the machine stator.

    Given the subtransient EMF components (e_d, e_q) held by the rotor
    fluxes, solves the quasi-steady stator equations under the diode
    bridge constraints: terminal magnitude ``v_mag + r_comm * I`` set by
    the dc link plus the commutation-overlap drop, fundamental current
    in phase with the terminal voltage.  With s = sin, c = cos of the
    common voltage/current angle and current magnitude I,

        (v + (R + r_c) I) s - w x''_q I c = e_d
        (v + (R + r_c) I) c + w x''_d I s = e_q

    which is linear in (s, c) for given I; the magnitude follows from
    s^2 + c^2 = 1 by a safeguarded scalar Newton iteration.  Below the
    conduction threshold (w |psi''| <= v_mag) the bridge blocks: I = 0
    and the terminal floats at the EMF.

    Returns (v_d, v_q, i_qs), the terminal voltage components (drop
    included) and the current magnitude.  Broadcasts over arrays.
    """
    e_d = np.atleast_1d(np.asarray(e_d, dtype=float))
    e_q = np.atleast_1d(np.asarray(e_q, dtype=float))
    v_mag, omega_r, r_s, xpp_d, xpp_q, r_comm = np.broadcast_arrays(
        np.atleast_1d(np.asarray(v_mag, dtype=float)), omega_r, r_s,
        xpp_d, xpp_q, r_comm)
    bd = omega_r * xpp_d
    bq = omega_r * xpp_q
    r_eff = r_s + r_comm

    cur = np.zeros_like(e_d) if i_init is None \
        else np.maximum(np.atleast_1d(np.asarray(i_init, dtype=float)), 0.0)
    cur = np.broadcast_arrays(cur, e_d)[0].copy()

    def parts(i):
        a = v_mag + r_eff * i
        det = a * a + bd * bq * i * i
        num_s = a * e_d + bq * i * e_q
        num_c = -bd * i * e_d + a * e_q
        return a, det, num_s, num_c

    converged = np.zeros(e_d.shape, dtype=bool)
    for _ in range(max_iter):
        a, det, num_s, num_c = parts(cur)
        g = (num_s ** 2 + num_c ** 2) / det ** 2 - 1.0
        at_block = (cur <= 0.0) & (g <= tol)
        converged = at_block | (np.abs(g) < tol)
        if np.all(converged):
            break
        dnum_s = r_eff * e_d + bq * e_q
        dnum_c = -bd * e_d + r_eff * e_q
        ddet = 2.0 * a * r_eff + 2.0 * bd * bq * cur
        gp = 2.0 * ((num_s * dnum_s + num_c * dnum_c)
                    - (num_s ** 2 + num_c ** 2) / det * ddet) / det ** 2
        step = np.where(np.abs(gp) > 1e-300, g / gp, 0.0)
        cur = np.where(converged, cur, np.maximum(cur - step, 0.0))
    else:
        a, det, num_s, num_c = parts(cur)
        g = (num_s ** 2 + num_c ** 2) / det ** 2 - 1.0
        bad = ~(((cur <= 0.0) & (g <= tol)) | (np.abs(g) < tol))
        if np.any(bad):
            raise CvscGridError("rectifier interface iteration did not converge")

    _a, det, num_s, num_c = parts(cur)
    v_eff = v_mag + r_comm * cur
    v_d = v_eff * num_s / det
    v_q = v_eff * num_c / det
    return v_d, v_q, cur


def turbine_governor(omega_r, p_in, p_in_ref, x_pwr, t_wind0, params: WpgParameters,
                     omega_ref=1.0, beta_trim=None):
    """Pitch plus power-PI torque shaping.

    Returns (beta_deg, t_mech, dx_pwr).  ``x_pwr`` is the PI integrator
    state (pu torque); a constant power error e ramps it at k_i_comp * e
    per second.  Pitch is a proportional speed trim riding on the
    curtailment pitch ``beta_trim``, clamped to [0, beta_max].
    """
    if beta_trim is None:
        beta_trim = params.beta_trim
    beta = np.clip(beta_trim + params.k_p_pitch * (omega_r - omega_ref),
                   0.0, params.beta_max)
    e_p = (p_in_ref - p_in) / params.p_n
    t_avail = t_wind0 * (1.0 - params.k_beta * beta)
    t_mech = t_avail + params.k_p_comp * e_p + x_pwr
    dx_pwr = params.k_i_comp * e_p
    return beta, t_mech, dx_pwr


def dc_link_derivative(v_dc, inputs: DcLinkInputs, c):
    """Capacitor voltage motion: dv/dt = (p_me - p_e) / (C v)."""
    if np.any(np.asarray(v_dc) <= 0.0):
        raise CvscGridError(f"dc-link voltage must stay positive, got {v_dc}")
    p_me = inputs.p_in + inputs.i_s * v_dc
    return (p_me - inputs.p_e) / (c * v_dc)


def storage_current_derivative(i_s, i_s_ref, v_dc, params: WpgParameters):
    """First-order current tracking through the boost inductor.

    The reference is clamped so the storage never exchanges more than its
    power rating: |i_s_ref * v_dc| <= storage_p_max.
    """
    if np.any(np.asarray(v_dc) <= 0.0):
        raise CvscGridError(f"dc-link voltage must stay positive, got {v_dc}")
    i_lim = params.storage_p_max / v_dc
    ref = np.clip(i_s_ref, -i_lim, i_lim)
    return params.k_track * (ref - i_s) / params.l_boost


def inverter_terminal_phasor(m, v_dc, delta_theta, params: WpgParameters):
    """Internal phasor E at angle delta_theta in the synchronous frame.

    |E| = K_MOD * m * v_dc / v_tn in per unit on the terminal voltage
    base; the carrier-frequency rotation is absorbed by the frame.
    """
    e_mag = K_MOD * m * v_dc / params.v_tn
    return e_mag * np.exp(1j * np.asarray(delta_theta, dtype=float))
