"""Linearization, eigenanalysis, participation factors, mode report.

Linearization is numerical (central finite differences) around a trimmed
state; every column evaluates the full right-hand side including the
quasi-static network solve.  The state mix spans several decades (fluxes
in pu next to a dc voltage in volts), so the eigensolver balances the
matrix before reduction; the LAPACK driver underneath does balancing,
Hessenberg reduction, Francis QR and inverse iteration, and the wrapper
enforces an explicit residual contract on every pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .dynamics import SimSystem, assemble_system, fd_jacobian
from .errors import EigenSolverError, LinearizationError
from .sysmodel import STATE_FIELDS


@dataclass(frozen=True)
class StateSpaceModel:
    """Reduced ODE Jacobian at an operating point, with state labels."""

    a: np.ndarray
    labels: tuple
    x_eq: np.ndarray
    core_mask: np.ndarray = None

    @property
    def n(self):
        return self.a.shape[0]


@dataclass(frozen=True)
class Mode:
    """One eigenvalue (conjugate pairs reported once, Im >= 0)."""

    eigenvalue: complex
    participation: np.ndarray
    dominant_state: str
    is_pair: bool
    is_core: bool = True
    reliable: bool = True

    @property
    def frequency(self):
        """Hz; None for real modes."""
        if not self.is_pair:
            return None
        return abs(self.eigenvalue.imag) / (2.0 * math.pi)

    @property
    def damping_ratio(self):
        if not self.is_pair:
            return None
        return -self.eigenvalue.real / abs(self.eigenvalue)

    def top_participants(self, labels, k=3):
        order = np.argsort(self.participation)[::-1][:k]
        return [(labels[i], float(self.participation[i])) for i in order]


@dataclass(frozen=True)
class ModeReport:
    """Table of modes in display order plus the labels they refer to."""

    modes: tuple
    labels: tuple
    operating_note: str = ""

    def core_modes(self):
        return [m for m in self.modes if m.is_core]

    def extension_modes(self):
        return [m for m in self.modes if not m.is_core]


def finite_difference_jacobian(system: SimSystem, x_eq) -> StateSpaceModel:
    """Central-difference system Jacobian at a trimmed state."""
    x_eq = np.asarray(x_eq, dtype=float)
    try:
        a = fd_jacobian(system.derivatives, x_eq)
    except LinearizationError as exc:
        # name the offending state for easier diagnosis
        msg = str(exc)
        if "column" in msg:
            idx = int(msg.rsplit(" ", 1)[1])
            raise LinearizationError(
                f"non-finite derivative while perturbing state "
                f"{system.state_labels[idx]}") from exc
        raise
    return StateSpaceModel(a=a, labels=tuple(system.state_labels), x_eq=x_eq,
                           core_mask=np.asarray(system.core_mask, dtype=bool))


def eig_nonsymmetric(a, residual_tol=1e-8):
    """Eigen decomposition of a real nonsymmetric matrix.

    Returns (values, right, left) where right[:, i] and left[:, i] belong
    to values[i]; the true left row vector is left[:, i].conj().T.  Every
    pair must satisfy ||A v - lambda v|| / ||A|| < residual_tol.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise EigenSolverError(f"matrix must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise EigenSolverError("matrix contains non-finite entries")
    try:
        vals, vl, vr = sla.eig(a, left=True, right=True)
    except Exception as exc:  # LAPACK convergence failure
        raise EigenSolverError(f"QR iteration failed: {exc}") from exc

    norm_a = np.linalg.norm(a, "fro")
    if norm_a == 0.0:
        return vals, vr, vl
    res_r = np.linalg.norm(a @ vr - vr * vals[None, :], axis=0) / norm_a
    res_l = np.linalg.norm(vl.conj().T @ a - vals[:, None] * vl.conj().T,
                           axis=1) / norm_a
    worst = float(max(res_r.max(), res_l.max()))
    if worst > residual_tol:
        raise EigenSolverError(
            f"eigenpair residual {worst:.3e} above contract {residual_tol:.1e}")
    return vals, vr, vl


def participation_factors(right, left):
    """Per-mode participation vectors from right/left eigenvector pairs.

    p[k, i] = |l_ki r_ki| / sum_k |l_ki r_ki|; returns (p, reliable) where
    ``reliable`` flags modes whose normalization is not degenerate.
    """
    prod = np.abs(np.conj(left) * right)
    sums = prod.sum(axis=0)
    scale_r = np.linalg.norm(right, axis=0)
    scale_l = np.linalg.norm(left, axis=0)
    reliable = sums > 1e-12 * np.maximum(scale_r * scale_l, 1e-300)
    if not np.all(reliable):
        import warnings
        bad = int(np.sum(~reliable))
        warnings.warn(f"{bad} mode(s) have degenerate left/right normalization; "
                      "participation factors marked unreliable", RuntimeWarning)
    safe = np.where(sums > 0.0, sums, 1.0)
    return prod / safe[None, :], reliable


def compute_modes(ssm: StateSpaceModel, pair_tol=1e-9):
    """Eigenanalysis of a state-space model; conjugate pairs collapsed."""
    vals, vr, vl = eig_nonsymmetric(ssm.a)
    p, reliable = participation_factors(vr, vl)
    core = ssm.core_mask if ssm.core_mask is not None \
        else np.ones(ssm.n, dtype=bool)

    modes = []
    used = np.zeros(len(vals), dtype=bool)
    order = np.lexsort((vals.real, -np.abs(vals.imag)))
    for i in order:
        if used[i]:
            continue
        used[i] = True
        lam = vals[i]
        is_pair = abs(lam.imag) > pair_tol
        if is_pair:
            # consume the conjugate partner
            cands = np.flatnonzero(~used)
            if len(cands):
                j = cands[np.argmin(np.abs(vals[cands] - np.conj(lam)))]
                if abs(vals[j] - np.conj(lam)) <= 1e-6 * max(1.0, abs(lam)):
                    used[j] = True
            lam = complex(lam.real, abs(lam.imag))
        dom = int(np.argmax(p[:, i]))
        modes.append(Mode(eigenvalue=lam, participation=p[:, i].copy(),
                          dominant_state=ssm.labels[dom], is_pair=is_pair,
                          is_core=bool(core[dom]), reliable=bool(reliable[i])))
    return modes


def build_mode_report(modes, labels, note="") -> ModeReport:
    """Rows sorted by |Im| descending, then real part; real modes leave the
    frequency and damping columns empty."""
    key = lambda m: (-abs(m.eigenvalue.imag), m.eigenvalue.real)
    return ModeReport(modes=tuple(sorted(modes, key=key)), labels=tuple(labels),
                      operating_note=note)


def analyze_system(system: SimSystem) -> ModeReport:
    """Trimmed-system linearization straight to a mode report."""
    ssm = finite_difference_jacobian(system, system.x_eq)
    return build_mode_report(compute_modes(ssm), ssm.labels)


def mode_classes(report: ModeReport):
    """Bucket core modes by dominant-state family for class-level checks."""
    buckets = {"stator": [], "v_dc": [], "omega_r": [], "omega_t": [],
               "delta_theta": [], "psi_f": [], "psi_kd": [], "psi_kq": [],
               "m": [], "i_s": [], "other": []}
    for mode in report.core_modes():
        name = mode.dominant_state.rsplit("_", 1)[0]
        if name in ("psi_d", "psi_q"):
            buckets["stator"].append(mode)
        elif name in buckets:
            buckets[name].append(mode)
        else:
            buckets["other"].append(mode)
    return buckets


def _rebuild_with_ka(system: SimSystem, k_a) -> SimSystem:
    gains = [replace(g, k_a=float(k_a)) for g in system.gains]
    return assemble_system(system.model, system.params, gains,
                           system.wpg_buses, system.dispatch, system.slack_bus)


def frequency_response(ssm: StateSpaceModel, b, c, omegas):
    """|c (jwI - A)^-1 b| over a frequency grid (rad/s)."""
    a = ssm.a
    n = a.shape[0]
    eye = np.eye(n)
    return np.array([abs(c @ np.linalg.solve(1j * w * eye - a, b))
                     for w in omegas])


def ka_sweep(system: SimSystem, ka_values, omegas=None, wpg_index=0):
    """Gain of the capacitor-voltage to active-power channel versus K_a.

    For each K_a the system is re-trimmed and linearized; the channel is
    a unit disturbance on the selected WPG's dc-voltage state to its
    active power output (machine pu).  Returns (omegas, {k_a: gains});
    values whose trim fails are skipped with a warning.
    """
    if omegas is None:
        omegas = np.logspace(math.log10(0.1), math.log10(1000.0), 121)
    omegas = np.asarray(omegas, dtype=float)
    curves = {}
    for k_a in ka_values:
        try:
            sys_k = _rebuild_with_ka(system, k_a)
        except Exception as exc:
            import warnings
            warnings.warn(f"skipping K_a = {k_a}: trim failed ({exc})",
                          RuntimeWarning)
            continue
        ssm = finite_difference_jacobian(sys_k, sys_k.x_eq)
        b = np.zeros(ssm.n)
        b[list(ssm.labels).index(f"v_dc_{wpg_index + 1}")] = 1.0
        c = _output_gradient(sys_k, sys_k.x_eq, wpg_index)
        curves[float(k_a)] = frequency_response(ssm, b, c, omegas)
    return omegas, curves


def _output_gradient(system: SimSystem, x_eq, wpg_index, h_floor=1e-6, h_rel=1e-6):
    """Finite-difference gradient of P_e[wpg_index] (machine pu) w.r.t. x."""
    x_eq = np.asarray(x_eq, dtype=float)
    p_n = system.p_n[wpg_index]

    def out(x):
        return system.evaluate(x)["p_e"][wpg_index] / p_n

    grad = np.empty(x_eq.size)
    for i in range(x_eq.size):
        h = max(h_floor, h_rel * abs(x_eq[i]))
        xp = x_eq.copy()
        xp[i] += h
        xm = x_eq.copy()
        xm[i] -= h
        grad[i] = (out(xp) - out(xm)) / (2.0 * h)
    return grad
