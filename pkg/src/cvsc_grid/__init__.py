"""Phasor-domain simulator and small-signal toolkit for a fully
inverter-supplied wind power system under capacitor-voltage
synchronizing control."""

from .cvsc import (CvscGains, capacitor_energy, delta_vdc_star,
                   exciter_derivative, governor_update, phase_angle_derivative)
from .dynamics import (Scenario, SimSystem, TimeSeries, assemble_system,
                       integrate_step, run_scenario, trim_equilibrium)
from .network import (AdmittanceMatrix, Event, PowerFlowSolution, apply_event,
                      build_ybus, kron_reduce, network_algebraic_solve,
                      solve_powerflow)
from .smallsignal import (Mode, ModeReport, StateSpaceModel, analyze_system,
                          build_mode_report, compute_modes, eig_nonsymmetric,
                          finite_difference_jacobian, ka_sweep, mode_classes,
                          participation_factors)
from .sysmodel import (BaseSet, Branch, Bus, Load, NetworkModel, Shunt,
                       WpgParameters, WpgState, rebase_impedance, rebase_power)
from .wpg import (DcLinkInputs, SgInputs, dc_link_derivative,
                  drive_train_derivatives, electromagnetic_torque,
                  inverter_terminal_phasor, machine_constants,
                  sg_electrical_derivatives, storage_current_derivative,
                  turbine_governor)

__version__ = "0.1.0"
