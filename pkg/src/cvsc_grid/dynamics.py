"""Equilibrium trim, implicit time stepping, and the scenario engine.

The stacked model is an explicit ODE: every algebraic quantity (network
voltages, machine currents, controller references) is an explicit
function of the state, with the quasi-static network solved by one
factorized linear pass inside each derivative evaluation.  Time stepping
is implicit trapezoidal with a chord Newton iteration; the iteration
matrix is refreshed per topology segment and on slow convergence.

State layout: per WPG, fifteen entries in ``sysmodel.STATE_FIELDS``
order (twelve core states plus the turbine-power integrator, the
field-exciter integrator, and the machine power reference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import wpg as wpg_mod
from .errors import (CvscGridError, IntegrationError, LinearizationError,
                     TrimError, ValidationError)
from .network import (AdmittanceMatrix, NetworkSolver, PowerFlowSolution,
                      SourceSpec, apply_event, build_ybus, solve_powerflow)
from .sysmodel import (NetworkModel, STATE_FIELDS, N_STATES, rebase_impedance)

NEWTON_TOL = 1e-9
TRIM_TOL = 1e-10


@dataclass(frozen=True)
class Scenario:
    """Timed disturbance run: horizon, step, events, channel options."""

    t_end: float
    dt: float = 1e-3
    events: tuple = ()
    waveforms: bool = False
    waveform_buses: tuple = ()

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValidationError("dt must be positive")
        times = [ev.time for ev in self.events]
        if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
            raise ValidationError("events must be time-sorted")
        if any(t >= self.t_end for t in times):
            raise ValidationError("all event times must lie before t_end")


@dataclass
class TimeSeries:
    """Channel arrays on a shared time grid.

    Event instants appear twice in the grid (pre- and post-event sample)
    so discontinuities in algebraic channels are represented exactly.
    """

    time: np.ndarray
    channels: dict
    event_times: tuple = ()
    diagnostic: str = ""

    def __getitem__(self, name):
        return self.channels[name]

    def validate(self):
        n = len(self.time)
        for name, arr in self.channels.items():
            if len(arr) != n:
                raise ValidationError(f"channel {name} length {len(arr)} != grid {n}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"channel {name} contains non-finite samples")


class SimSystem:
    """Assembled network + devices + controllers, ready for trim and runs."""

    def __init__(self, model: NetworkModel, params, gains, wpg_buses,
                 dispatch, slack_bus):
        self.model = model
        self.params = tuple(params)
        self.gains = tuple(gains)
        self.wpg_buses = tuple(wpg_buses)
        self.dispatch = dict(dispatch)
        self.slack_bus = slack_bus
        self.n_wpg = len(self.params)
        if not (self.n_wpg == len(self.gains) == len(self.wpg_buses)):
            raise ValidationError("params, gains and buses must have equal length")

        self._pack_parameters()
        self.state_labels = tuple(
            f"{name}_{i + 1}" for i in range(self.n_wpg) for name in STATE_FIELDS)
        self.n_states = self.n_wpg * N_STATES
        self.core_mask = np.array(
            [not lbl.startswith(("x_pwr", "x_fld", "p_in_ref"))
             for lbl in self.state_labels])
        self.state_scales = np.tile(self._field_scales(), self.n_wpg)

        self.pf: PowerFlowSolution | None = None
        self.base_y: AdmittanceMatrix | None = None
        self.solver: NetworkSolver | None = None
        self.x_eq = None
        # per-WPG references fixed at trim
        self.p_schedule = np.zeros(self.n_wpg)
        self.v_t_ref = np.ones(self.n_wpg)
        self.psi_ref = np.ones(self.n_wpg)
        self.t_wind0 = np.ones(self.n_wpg)

    # -- construction ------------------------------------------------------

    def _pack_parameters(self):
        def arr(getter):
            return np.array([getter(p) for p in self.params], dtype=float)

        self.s_sys = self.model.base.s_system
        self.w_b = arr(lambda q: q.omega_base)
        self.r_s = arr(lambda q: q.r_s)
        self.p_n = arr(lambda q: q.p_n)
        self.c_dc = arr(lambda q: q.c)
        self.l_boost = arr(lambda q: q.l_boost)
        self.k_track = arr(lambda q: q.k_track)
        self.h_t = arr(lambda q: q.h_t)
        self.h_g = arr(lambda q: q.h_g)
        self.k_shaft = arr(lambda q: q.k_shaft)
        self.d_shaft = arr(lambda q: q.d_shaft)
        self.r_comm = arr(lambda q: q.r_comm)
        self.k_p_pitch = arr(lambda q: q.k_p_pitch)
        self.k_p_comp = arr(lambda q: q.k_p_comp)
        self.k_i_comp = arr(lambda q: q.k_i_comp)
        self.k_p_field = arr(lambda q: q.k_p_field)
        self.k_i_field = arr(lambda q: q.k_i_field)
        self.k_beta = arr(lambda q: q.k_beta)
        self.beta_trim = arr(lambda q: q.beta_trim)
        self.beta_max = arr(lambda q: q.beta_max)
        self.m_max = arr(lambda q: q.m_max)
        self.p_deadband = arr(lambda q: q.p_deadband)
        self.storage_p_max = arr(lambda q: q.storage_p_max)
        self.rect_coef = np.array(
            [wpg_mod.rectifier_terminal_voltage(1.0, q) for q in self.params])
        self.e_coef = arr(lambda q: wpg_mod.K_MOD / q.v_tn)

        g = self.gains
        self.k_a = np.array([gg.k_a for gg in g])
        self.k_e = np.array([gg.k_e for gg in g])
        self.k_pg1 = np.array([gg.k_pg1 for gg in g])
        self.k_pg2 = np.array([gg.k_pg2 for gg in g])
        self.k_pg3 = np.array([gg.k_pg3 for gg in g])
        self.v_dc_nom = np.array([gg.v_dc_nom for gg in g])
        self.gov_mask = np.array([1.0 if gg.has_governor else 0.0 for gg in g])

        mcs = [wpg_mod.machine_constants(q) for q in self.params]
        self.mc = mcs
        self.minv_d = np.stack([mc.minv_d for mc in mcs])
        self.minv_q = np.stack([mc.minv_q for mc in mcs])
        self.r_f = np.array([mc.r_f for mc in mcs])
        self.r_kd = np.array([mc.r_kd for mc in mcs])
        self.r_kq = np.array([mc.r_kq for mc in mcs])
        self.x_ad = np.array([mc.x_ad for mc in mcs])
        self.x_aq = np.array([mc.x_aq for mc in mcs])
        self.x_ffd = np.array([mc.x_ffd for mc in mcs])
        self.x_d = arr(lambda q: q.x_d)
        self.x_q = arr(lambda q: q.x_q)
        # subtransient flux composition: psi''_d = cf_f psi_f + cf_kd psi_kd,
        # psi''_q = cf_kq psi_kq, with the matching subtransient reactances
        det_d = np.array([mc.x_ffd * mc.x_kkd - mc.x_ad ** 2 for mc in mcs])
        self.cf_f = np.array([mc.x_ad * mc.x_kd for mc in mcs]) / det_d
        self.cf_kd = np.array([mc.x_ad * mc.x_fd for mc in mcs]) / det_d
        self.cf_kq = np.array([mc.x_aq / mc.x_kkq for mc in mcs])
        self.xpp_d = self.x_d - self.x_ad ** 2 * np.array(
            [(mc.x_kd + mc.x_fd) for mc in mcs]) / det_d
        self.xpp_q = self.x_q - np.array([mc.x_aq ** 2 / mc.x_kkq for mc in mcs])
        # field voltage in reciprocal pu: e_f_native = E_fd * r_f / x_ad
        self.efd_scale = self.r_f / self.x_ad
        # inverse of the d-axis rotor inductance block [[x_ffd, x_ad],
        # [x_ad, x_kkd]] for rotor currents given stator current
        self.x_kkq = np.array([mc.x_kkq for mc in mcs])
        x_kkd = np.array([mc.x_kkd for mc in mcs])
        det_ad = self.x_ffd * x_kkd - self.x_ad ** 2
        self.ad_inv11 = x_kkd / det_ad
        self.ad_inv12 = -self.x_ad / det_ad
        self.ad_inv22 = self.x_ffd / det_ad

    def _field_scales(self):
        scale = {"v_dc": float(np.mean([g.v_dc_nom for g in self.gains])),
                 "i_s": float(np.mean([p.storage_p_max for p in self.params]) /
                              np.mean([g.v_dc_nom for g in self.gains])),
                 "p_in_ref": float(np.mean([p.p_n for p in self.params]))}
        return np.array([scale.get(name, 1.0) for name in STATE_FIELDS])

    def filter_impedances(self):
        """Per-WPG filter impedance in system per unit."""
        zs = []
        for p, bus in zip(self.params, self.wpg_buses):
            z_mach = complex(p.r_filter, p.l_filter)
            v_bus = self.model.bus(bus).v_base
            zs.append(rebase_impedance(z_mach, (p.p_n, p.v_tn),
                                       (self.s_sys, v_bus)))
        return zs

    def build_network(self, y: AdmittanceMatrix) -> NetworkSolver:
        sources = [SourceSpec(bus=b, z_filter=z)
                   for b, z in zip(self.wpg_buses, self.filter_impedances())]
        return NetworkSolver(y, sources)

    # -- model evaluation ----------------------------------------------------

    def unpack(self, x):
        return np.asarray(x, dtype=float).reshape(self.n_wpg, N_STATES).T

    def evaluate(self, x, solver=None):
        """All algebraic quantities and state derivatives at state x.

        Returns a dict; key "dx" holds the stacked derivative.  Pure
        function of (x, topology): identical inputs give bit-identical
        outputs.
        """
        if solver is None:
            solver = self.solver
        (psi_d, psi_q, psi_f, psi_kd, psi_kq, omega_r, omega_t, theta_tw,
         v_dc, delta_theta, m, i_s, x_pwr, x_fld, p_in_ref) = self.unpack(x)

        if np.any(v_dc <= 0.0):
            raise CvscGridError("dc-link voltage left the positive domain")

        # instantaneous stator currents from fluxes (stator transient only)
        vec_d = np.stack([psi_d, psi_f, psi_kd], axis=1)
        sol_d = np.einsum("nij,nj->ni", self.minv_d, vec_d)
        i_d = -sol_d[:, 0]
        vec_q = np.stack([psi_q, psi_kq], axis=1)
        sol_q = np.einsum("nij,nj->ni", self.minv_q, vec_q)
        i_q = -sol_q[:, 0]

        # rectifier-coupled stator terminal: magnitude from the dc link,
        # direction and power transfer from the quasi-steady
        # (fundamental-frequency) solution held by the slow rotor fluxes.
        # The diode bridge averages over the carrier, so torque, dc-side
        # power and the sensed flux magnitude all follow the quasi-steady
        # values; the stator flux states keep their own fast transient.
        v_s = self.rect_coef * v_dc
        psi_pp_d = self.cf_f * psi_f + self.cf_kd * psi_kd
        psi_pp_q = self.cf_kq * psi_kq
        e_d = -omega_r * psi_pp_q
        e_q = omega_r * psi_pp_d
        v_d, v_q, i_qs = wpg_mod.rectifier_quasi_steady(
            e_d, e_q, v_s, omega_r, self.r_s, self.xpp_d, self.xpp_q,
            r_comm=self.r_comm, i_init=np.hypot(i_d, i_q))
        v_norm = np.hypot(v_d, v_q)
        dir_safe = np.maximum(v_norm, 1e-12)
        i_d_qs = i_qs * v_d / dir_safe          # current in phase with v
        i_q_qs = i_qs * v_q / dir_safe
        p_in = v_norm * i_qs * self.p_n         # W into the dc link

        # rotor winding currents respond to the fundamental-frequency
        # stator current; the fast dq ripple stays on the stator states
        rhs_f = psi_f + self.x_ad * i_d_qs
        rhs_kd = psi_kd + self.x_ad * i_d_qs
        i_f = (self.ad_inv11 * rhs_f + self.ad_inv12 * rhs_kd)
        i_kd = (self.ad_inv12 * rhs_f + self.ad_inv22 * rhs_kd)
        i_kq = (psi_kq + self.x_aq * i_q_qs) / self.x_kkq

        # grid side; the modulator feeds the measured dc voltage forward
        # (pwm index = m * v_dc_nom / v_dc) so the realized magnitude
        # tracks the commanded one regardless of dc-link swings
        e_mag = self.e_coef * m * self.v_dc_nom
        e_phasor = e_mag * np.exp(1j * delta_theta)
        v_bus, p_e_pu, q_e_pu = solver.solve(e_phasor)
        p_e = p_e_pu * self.s_sys
        q_e = q_e_pu * self.s_sys
        v_t = solver.terminal_voltages(v_bus)

        # capacitor-voltage governor
        dvs = (v_dc - self.v_dc_nom) / self.v_dc_nom
        p_me = p_in + i_s * v_dc
        p_me_ref = self.p_schedule + self.gov_mask * self.k_pg1 * (-dvs) * self.p_n
        err = p_me_ref - p_me
        err_db = err - self.p_deadband * np.tanh(err / self.p_deadband)
        i_s_ref = self.gov_mask * self.k_pg2 * err_db / self.v_dc_nom
        i_lim = self.storage_p_max / v_dc
        i_s_ref = np.clip(i_s_ref, -i_lim, i_lim)
        # p_me_ref equals the schedule for ungoverned machines, so this
        # also pins their p_in_ref (no free integrator on the slack WPG)
        dp_in_ref = self.k_pg3 * (p_me_ref - p_in_ref)

        # turbine governor and drive train
        beta = np.clip(self.beta_trim + self.k_p_pitch * (omega_r - 1.0),
                       0.0, self.beta_max)
        e_p = (p_in_ref - p_in) / self.p_n
        t_mech = self.t_wind0 * (1.0 - self.k_beta * beta) \
            + self.k_p_comp * e_p + x_pwr
        dx_pwr = self.k_i_comp * e_p
        # air-gap torque of the quasi-steady solution: terminal power plus
        # stator copper loss, divided by speed
        t_e = (v_norm * i_qs + self.r_s * i_qs ** 2) / omega_r
        slip = omega_t - omega_r
        t_shaft = self.k_shaft * theta_tw + self.d_shaft * slip
        domega_t = (t_mech - t_shaft) / (2.0 * self.h_t)
        domega_r = (t_shaft - t_e) / (2.0 * self.h_g)
        dtheta_tw = self.w_b * slip

        # machine-side flux exciter (constant stator flux); the controller
        # senses the fundamental-frequency flux, not the fast dq ripple,
        # and commands field voltage in reciprocal per unit (1 pu field
        # voltage = 1 pu open-circuit stator flux)
        psi_mag = np.hypot(psi_pp_d - self.xpp_d * i_d_qs,
                           psi_pp_q - self.xpp_q * i_q_qs)
        e_psi = self.psi_ref - psi_mag
        e_f = (self.k_p_field * e_psi + x_fld) * self.efd_scale
        dx_fld = self.k_i_field * e_psi

        dpsi_d = self.w_b * (v_d + self.r_s * i_d + omega_r * psi_q)
        dpsi_q = self.w_b * (v_q + self.r_s * i_q - omega_r * psi_d)
        dpsi_f = self.w_b * (e_f - self.r_f * i_f)
        dpsi_kd = -self.w_b * self.r_kd * i_kd
        dpsi_kq = -self.w_b * self.r_kq * i_kq

        # dc link, storage, inverter controls
        dv_dc = (p_me - p_e) / (self.c_dc * v_dc)
        di_s = self.k_track * (i_s_ref - i_s) / self.l_boost
        ddelta_theta = self.k_a * dvs
        dm_raw = self.k_e * (self.v_t_ref - v_t)
        blocked = ((m >= self.m_max) & (dm_raw > 0.0)) | ((m <= 0.0) & (dm_raw < 0.0))
        dm = np.where(blocked, 0.0, dm_raw)

        dx = np.stack([dpsi_d, dpsi_q, dpsi_f, dpsi_kd, dpsi_kq,
                       domega_r, domega_t, dtheta_tw, dv_dc, ddelta_theta,
                       dm, di_s, dx_pwr, dx_fld, dp_in_ref], axis=1)
        return {
            "dx": dx.reshape(-1),
            "p_e": p_e, "q_e": q_e, "p_in": p_in, "p_me": p_me,
            "p_storage": i_s * v_dc, "v_t": v_t, "v_bus": v_bus,
            "beta": beta, "t_e": t_e, "t_mech": t_mech,
            "i_stator": np.hypot(i_d, i_q), "i_qs": i_qs,
            "e_phasor": e_phasor,
            "p_me_ref": p_me_ref, "i_s_ref": i_s_ref,
        }

    def derivatives(self, x, solver=None):
        return self.evaluate(x, solver=solver)["dx"]

    def scaled_residual(self, x, solver=None):
        return float(np.max(np.abs(self.derivatives(x, solver=solver) /
                                   self.state_scales)))


def assemble_system(model, params, gains, wpg_buses, dispatch, slack_bus,
                    trim=True) -> SimSystem:
    """Build and (optionally) trim a simulation system.

    ``dispatch`` maps generator bus -> (p_watts, v_setpoint).
    """
    sys_ = SimSystem(model, params, gains, wpg_buses, dispatch, slack_bus)
    sys_.pf = solve_powerflow(model, dispatch, slack_bus)
    sys_.base_y = fold_loads(model, sys_.pf)
    sys_.solver = sys_.build_network(sys_.base_y)
    if trim:
        sys_.x_eq = trim_equilibrium(sys_, sys_.pf)
    return sys_


def fold_loads(model: NetworkModel, pf: PowerFlowSolution) -> AdmittanceMatrix:
    """Dynamic-phase admittance matrix with every load folded in as a
    constant impedance at its power-flow voltage."""
    y_loads = {}
    s_base = model.base.s_system
    for ld in model.loads:
        if ld.model == "impedance":
            y_l = complex(ld.p, -ld.q) / s_base
        else:
            v = abs(pf.v_at(ld.bus))
            y_l = complex(ld.p, -ld.q) / s_base / v ** 2
        y_loads[ld.bus] = y_loads.get(ld.bus, 0j) + y_l
    return build_ybus(model, load_admittances=y_loads if y_loads else None)


def trim_equilibrium(system: SimSystem, pf: PowerFlowSolution):
    """Back-solve device states from the power flow, then Newton-polish.

    Raises TrimError if the scaled derivative norm cannot be brought
    below the trim tolerance.
    """
    n = system.n_wpg
    x = np.zeros((n, N_STATES))
    z_f = system.filter_impedances()
    ix = {name: STATE_FIELDS.index(name) for name in STATE_FIELDS}

    p_e_int = np.zeros(n)
    for k, bus in enumerate(system.wpg_buses):
        v = pf.v_at(bus)
        s_pu = complex(pf.p_gen[bus], pf.q_gen[bus]) / system.s_sys
        i_pcc = np.conj(s_pu / v)
        e = v + z_f[k] * i_pcc
        p_e_int[k] = (e * np.conj(i_pcc)).real
        x[k, ix["delta_theta"]] = np.angle(e)
        x[k, ix["m"]] = abs(e) / (system.e_coef[k] * system.v_dc_nom[k])
        x[k, ix["v_dc"]] = system.v_dc_nom[k]
        system.v_t_ref[k] = abs(v)

    p_in_w = p_e_int * system.s_sys
    system.p_schedule = p_in_w.copy()

    for k in range(n):
        p = system.params[k]
        mc = system.mc[k]
        v_s = system.rect_coef[k] * system.v_dc_nom[k]
        p_mach = p_in_w[k] / p.p_n
        # terminal magnitude rises with current by the commutation drop:
        # p = (v_s + r_c I) I  ->  quadratic in I
        if p.r_comm > 0.0:
            i0 = (-v_s + math.sqrt(v_s * v_s + 4.0 * p.r_comm * p_mach)) \
                / (2.0 * p.r_comm)
        else:
            i0 = p_mach / v_s
        v_eff = v_s + p.r_comm * i0
        gam = math.atan2(p.x_q * i0, v_eff + p.r_s * i0)
        i_d0, i_q0 = i0 * math.sin(gam), i0 * math.cos(gam)
        psi_d0 = (v_eff + p.r_s * i0) * math.cos(gam)
        psi_q0 = -p.x_q * i_q0
        i_f0 = (psi_d0 + p.x_d * i_d0) / mc.x_ad
        e_f0 = mc.r_f * i_f0
        t_e0 = psi_d0 * i_q0 - psi_q0 * i_d0

        x[k, ix["psi_d"]] = psi_d0
        x[k, ix["psi_q"]] = psi_q0
        x[k, ix["psi_f"]] = -mc.x_ad * i_d0 + mc.x_ffd * i_f0
        x[k, ix["psi_kd"]] = mc.x_ad * (i_f0 - i_d0)
        x[k, ix["psi_kq"]] = -mc.x_aq * i_q0
        x[k, ix["omega_r"]] = 1.0
        x[k, ix["omega_t"]] = 1.0
        x[k, ix["theta_tw"]] = t_e0 / p.k_shaft
        x[k, ix["x_fld"]] = e_f0 * mc.x_ad / mc.r_f
        x[k, ix["p_in_ref"]] = p_in_w[k]
        system.psi_ref[k] = math.hypot(psi_d0, psi_q0)
        system.t_wind0[k] = t_e0 / (1.0 - p.k_beta * p.beta_trim)

    x = refine_equilibrium(system, x.reshape(-1))
    res = system.scaled_residual(x)
    if res > TRIM_TOL:
        raise TrimError(f"trim residual {res:.3e} above tolerance {TRIM_TOL}",
                        residual=res)
    return x


def refine_equilibrium(system, x, tol=TRIM_TOL, max_iter=25):
    """Newton with a minimum-norm step (the common-angle direction is a
    gauge freedom, so the Jacobian is singular by one dimension)."""
    w = system.state_scales
    x = np.asarray(x, dtype=float).copy()
    res = system.scaled_residual(x)
    for _ in range(max_iter):
        if res < tol * 1e-2:
            break
        jac = fd_jacobian(system.derivatives, x)
        f = system.derivatives(x)
        # row/column scaling keeps the least-squares solve well conditioned
        js = jac * (w[None, :] / w[:, None])
        dx_s, *_ = np.linalg.lstsq(js, -f / w, rcond=None)
        step = dx_s * w
        lam, improved = 1.0, False
        for _ in range(8):
            try:
                trial = x + lam * step
                r_try = system.scaled_residual(trial)
            except CvscGridError:
                r_try = np.inf
            if r_try < res:
                x, res, improved = trial, r_try, True
                break
            lam *= 0.5
        if not improved:
            break
    return x


def fd_jacobian(fun, x, h_floor=1e-6, h_rel=1e-6):
    """Central-difference Jacobian with per-state step max(h_floor, h_rel|x|)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    f0 = np.asarray(fun(x))
    jac = np.empty((f0.size, n))
    for i in range(n):
        h = max(h_floor, h_rel * abs(x[i]))
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        col = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h)
        if not np.all(np.isfinite(col)):
            raise LinearizationError(f"non-finite derivative in column {i}")
        jac[:, i] = col
    return jac


class TrapezoidalStepper:
    """Implicit trapezoidal rule with a chord Newton iteration.

    The Jacobian is frozen between rebuilds; iteration matrices
    (I - dt/2 J) are LU-factorized per step size and cached.
    """

    def __init__(self, system, dt, solver=None, x_ref=None):
        self.system = system
        self.solver = solver if solver is not None else getattr(system, "solver", None)
        self.dt = dt
        self.scales = getattr(system, "state_scales", None)
        self._jac = None
        self._lu_cache = {}
        if x_ref is not None:
            self.rebuild(np.asarray(x_ref, dtype=float))

    def f(self, x):
        if self.solver is not None:
            return self.system.derivatives(x, solver=self.solver)
        return self.system.derivatives(x)

    def rebuild(self, x):
        self._jac = fd_jacobian(self.f, x)
        self._lu_cache = {}

    def _lu(self, dt):
        lu = self._lu_cache.get(dt)
        if lu is None:
            a = np.eye(self._jac.shape[0]) - 0.5 * dt * self._jac
            lu = sla.lu_factor(a)
            self._lu_cache[dt] = lu
        return lu

    def _newton(self, x, f_x, dt, max_iter=12):
        z = x + dt * f_x                     # explicit Euler predictor
        w = self.scales if self.scales is not None else np.ones_like(x)
        lu = self._lu(dt)
        for _ in range(max_iter):
            g = z - x - 0.5 * dt * (f_x + self.f(z))
            if np.max(np.abs(g / w)) < NEWTON_TOL:
                return z
            z = z - sla.lu_solve(lu, g)
        g = z - x - 0.5 * dt * (f_x + self.f(z))
        if np.max(np.abs(g / w)) < NEWTON_TOL:
            return z
        raise IntegrationError("Newton iteration stalled")

    def step(self, x, dt=None):
        """Advance one step (default size: the stepper's dt)."""
        dt = self.dt if dt is None else dt
        if self._jac is None:
            self.rebuild(x)
        f_x = self.f(x)
        try:
            return self._newton(x, f_x, dt)
        except (IntegrationError, CvscGridError):
            pass
        self.rebuild(x)                      # fresh Jacobian at x
        try:
            return self._newton(x, f_x, dt)
        except (IntegrationError, CvscGridError):
            pass
        # bisect the step down to dt / 2**10
        t_done, x_cur, sub, depth = 0.0, x, dt / 2.0, 1
        while t_done < dt * (1.0 - 1e-12):
            try:
                x_cur = self._newton(x_cur, self.f(x_cur), sub)
                t_done += sub
            except (IntegrationError, CvscGridError):
                depth += 1
                if depth > 10:
                    raise IntegrationError(
                        f"step failed even at dt = {sub:.3e}") from None
                sub /= 2.0
                self.rebuild(x_cur)
        return x_cur


def integrate_step(system, state, t, dt):
    """One implicit-trapezoidal step of the assembled system.

    ``system`` needs a ``derivatives(x)`` callable; SimSystem qualifies,
    as does any small test shim.  Second-order accurate; Newton residual
    held below the module tolerance.
    """
    del t  # autonomous model
    x = np.asarray(state, dtype=float)
    stepper = TrapezoidalStepper(system, dt, x_ref=x)
    return stepper.step(x)


def _channel_names(system, scenario):
    names = []
    for i in range(system.n_wpg):
        k = i + 1
        names += [f"v_dc_{k}", f"p_e_{k}", f"q_e_{k}", f"p_in_{k}",
                  f"p_storage_{k}", f"v_t_{k}", f"delta_theta_{k}",
                  f"omega_r_{k}", f"omega_t_{k}", f"m_{k}", f"beta_{k}"]
    for bus in system.model.bus_ids():
        names.append(f"v_bus_{bus}")
    if scenario.waveforms:
        buses = scenario.waveform_buses or tuple(system.model.bus_ids())
        for bus in buses:
            names += [f"v_a_bus_{bus}", f"v_b_bus_{bus}", f"v_c_bus_{bus}"]
    return names


def _sample(system, scenario, x, t, vals, out):
    cols = system.unpack(x)
    ix = {name: STATE_FIELDS.index(name) for name in
          ("v_dc", "delta_theta", "omega_r", "omega_t", "m")}
    for i in range(system.n_wpg):
        k = i + 1
        out[f"v_dc_{k}"].append(cols[ix["v_dc"]][i])
        out[f"p_e_{k}"].append(vals["p_e"][i])
        out[f"q_e_{k}"].append(vals["q_e"][i])
        out[f"p_in_{k}"].append(vals["p_in"][i])
        out[f"p_storage_{k}"].append(vals["p_storage"][i])
        out[f"v_t_{k}"].append(vals["v_t"][i])
        out[f"delta_theta_{k}"].append(cols[ix["delta_theta"]][i])
        out[f"omega_r_{k}"].append(cols[ix["omega_r"]][i])
        out[f"omega_t_{k}"].append(cols[ix["omega_t"]][i])
        out[f"m_{k}"].append(cols[ix["m"]][i])
        out[f"beta_{k}"].append(vals["beta"][i])
    v_bus = vals["v_bus"]
    ids = system.model.bus_ids()
    for j, bus in enumerate(ids):
        out[f"v_bus_{bus}"].append(abs(v_bus[j]))
    if scenario.waveforms:
        buses = scenario.waveform_buses or tuple(ids)
        w_n = 2.0 * math.pi * system.model.base.f_n
        for bus in buses:
            v = v_bus[ids.index(bus)]
            mag, ph = math.sqrt(2.0) * abs(v), np.angle(v)
            out[f"v_a_bus_{bus}"].append(mag * math.cos(w_n * t + ph))
            out[f"v_b_bus_{bus}"].append(mag * math.cos(w_n * t + ph - 2 * math.pi / 3))
            out[f"v_c_bus_{bus}"].append(mag * math.cos(w_n * t + ph + 2 * math.pi / 3))


def run_scenario(system: SimSystem, scenario: Scenario,
                 initial_state=None) -> TimeSeries:
    """Integrate through all events with exact event-time alignment.

    Step boundaries are inserted at event times (never rounded); the
    network is re-factorized at each topology event.  On integration
    failure the partial series rides on the raised error (``.partial``).
    """
    x = np.array(system.x_eq if initial_state is None else initial_state,
                 dtype=float)
    names = _channel_names(system, scenario)
    out = {name: [] for name in names}
    times = []

    y_cur = system.base_y
    solver = system.solver
    stepper = TrapezoidalStepper(system, scenario.dt, solver=solver, x_ref=x)

    # group events by (strictly increasing) time, then add the horizon
    marks = []
    for ev in scenario.events:
        if marks and ev.time == marks[-1][0]:
            marks[-1][1].append(ev)
        else:
            marks.append((ev.time, [ev]))
    marks.append((scenario.t_end, []))

    def record(t):
        vals = system.evaluate(x, solver=solver)
        times.append(t)
        _sample(system, scenario, x, t, vals, out)

    t = 0.0
    record(t)
    try:
        for t_mark, evs in marks:
            span = t_mark - t
            n_full = int(math.floor(span / scenario.dt + 1e-9))
            rem = span - n_full * scenario.dt
            if rem < 1e-9 * scenario.dt:
                rem = 0.0
            t0 = t
            for k in range(n_full):
                x = stepper.step(x)
                t = t_mark if (k == n_full - 1 and rem == 0.0) \
                    else t0 + (k + 1) * scenario.dt
                record(t)
            if rem > 0.0:
                x = stepper.step(x, rem)
                t = t_mark
                record(t)
            t = t_mark
            if evs:
                for ev in evs:
                    y_cur = apply_event(y_cur, ev)
                solver = system.build_network(y_cur)
                stepper = TrapezoidalStepper(system, scenario.dt,
                                             solver=solver, x_ref=x)
                record(t)  # post-event duplicate sample
    except (IntegrationError, CvscGridError) as exc:
        partial = TimeSeries(
            time=np.array(times),
            channels={k: np.array(v) for k, v in out.items()},
            event_times=tuple(ev.time for ev in scenario.events),
            diagnostic=f"integration aborted at t = {t:.6f} s: {exc}")
        err = IntegrationError(partial.diagnostic)
        err.partial = partial
        raise err from exc

    ts = TimeSeries(time=np.array(times),
                    channels={k: np.array(v) for k, v in out.items()},
                    event_times=tuple(ev.time for ev in scenario.events))
    ts.validate()
    return ts
