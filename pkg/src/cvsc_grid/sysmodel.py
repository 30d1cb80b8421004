"""Canonical data model: buses, branches, loads, generator parameters, bases.

Conventions used throughout the package:

* the transmission network is described in per unit on the system base
  (``BaseSet.s_system``, 100 MVA for the built-in benchmark);
* each wind power generator (WPG) is modelled in per unit on its own
  machine base (``p_n``, ``v_n``);
* dc-link quantities (capacitor voltage, storage current) stay in SI units
  (V, A) because the capacitor law and the shipped parameter table are
  stated that way.

All types are immutable value objects; they can be shared freely between
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from .errors import InvalidBaseError, ValidationError

BUS_KINDS = ("generator", "load", "junction")
LOAD_MODELS = ("power", "impedance")

#: Names of the per-WPG dynamic states, in stacking order.  The first twelve
#: are the core states reported by the small-signal mode table; the last
#: three are controller integrators kept out of the core ordering and
#: flagged as extension modes in reports.
CORE_STATE_FIELDS = (
    "psi_d", "psi_q", "psi_f", "psi_kd", "psi_kq",
    "omega_r", "omega_t", "theta_tw",
    "v_dc", "delta_theta", "m", "i_s",
)
EXTENSION_STATE_FIELDS = ("x_pwr", "x_fld", "p_in_ref")
STATE_FIELDS = CORE_STATE_FIELDS + EXTENSION_STATE_FIELDS


def _require_positive(name, value):
    if not (math.isfinite(value) and value > 0.0):
        raise InvalidBaseError(f"{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class BaseSet:
    """Per-unit bases: system power, machine power, voltage zone, frequency."""

    s_system: float = 100e6    # VA
    s_machine: float = 889e6   # VA, one aggregated WPG
    v_base: float = 575.0      # V, machine terminal zone
    f_n: float = 60.0          # Hz

    def __post_init__(self):
        for name in ("s_system", "s_machine", "v_base", "f_n"):
            _require_positive(name, getattr(self, name))

    @property
    def omega_base(self):
        return 2.0 * math.pi * self.f_n


@dataclass(frozen=True)
class Bus:
    id: int
    v_base: float            # V
    kind: str = "junction"   # generator | load | junction

    def __post_init__(self):
        _require_positive("v_base", self.v_base)
        if self.kind not in BUS_KINDS:
            raise ValidationError(f"bus {self.id}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Branch:
    """Series branch (line or transformer), pi model, system per unit."""

    name: str
    from_bus: int
    to_bus: int
    r: float = 0.0
    x: float = 0.0
    b_shunt: float = 0.0     # total charging susceptance
    tap: float = 1.0         # off-nominal ratio on the from side
    in_service: bool = True

    def __post_init__(self):
        if self.x == 0.0:
            raise ValidationError(f"branch {self.name}: x must be nonzero")
        if not (self.tap > 0.0):
            raise ValidationError(f"branch {self.name}: tap must be positive")


@dataclass(frozen=True)
class Load:
    """Bus load at nominal voltage.

    ``model`` selects the power-flow treatment: "power" is a constant-PQ
    injection, "impedance" enters the admittance matrix.  During dynamic
    simulation every load is folded into the admittance matrix at its
    pre-disturbance voltage regardless of this field.
    """

    bus: int
    p: float                 # W, consumption positive
    q: float = 0.0           # var, inductive positive
    model: str = "power"

    def __post_init__(self):
        if self.model not in LOAD_MODELS:
            raise ValidationError(f"load at bus {self.bus}: unknown model {self.model!r}")


@dataclass(frozen=True)
class Shunt:
    """Fixed shunt admittance (capacitor bank / reactor), system per unit."""

    bus: int
    g: float = 0.0
    b: float = 0.0


@dataclass(frozen=True)
class WpgParameters:
    """Constants of one aggregated full-scale WPG.

    Default values are the shipped per-machine parameter set.  Fields in
    the ``calibrated`` block are not part of that set: they are implementer
    calibrations chosen so the drive-train mode classes land in their
    documented frequency bands (see the benchmark config for the same
    values, marked calibrated-not-nameplate).
    """

    # ratings and bases
    p_mn: float = 800e6      # W, nominal mechanical power
    p_n: float = 889e6       # W, nominal electrical power (machine VA base)
    v_n: float = 730.0       # V, stator line-to-line
    v_tn: float = 575.0      # V, point-of-common-coupling line-to-line
    f_n: float = 60.0        # Hz

    # grid-side filter, machine base
    l_filter: float = 0.15   # pu
    r_filter: float = 0.003  # pu

    # dc link and storage path
    v_dc_nom: float = 1110.0  # V
    c: float = 36.0           # F
    l_boost: float = 0.0012   # H
    d_duty: float = 0.19      # boost duty cycle

    # turbine governor
    k_p_pitch: float = 15.0
    k_p_comp: float = 1.5
    k_i_comp: float = 6.0

    # stator-flux exciter of the machine-side generator
    k_p_field: float = 10.0
    k_i_field: float = 20.0

    # capacitor-voltage governor gains
    k_pg1: float = 30.0
    k_pg2: float = 15.0
    k_pg3: float = 0.1

    pole_pairs: int = 1

    # inverter-side control
    k_a: float = 10.0        # phase-angle loop gain
    k_e: float = 0.2         # modulation-index integral gain

    # machine-side synchronous generator, machine per unit
    x_d: float = 1.305
    x_d_p: float = 0.296
    x_d_pp: float = 0.252
    x_q: float = 0.474
    x_q_pp: float = 0.243
    x_l: float = 0.18
    t_d0_p: float = 4.49     # s
    t_d0_pp: float = 0.0681  # s
    t_q0_pp: float = 0.0513  # s
    r_s: float = 0.006       # pu
    # commutation voltage drop of the diode bridge, reflected to the ac
    # side as a lossless series resistance (pu, average-value model)
    r_comm: float = 0.2

    # ---- calibrated, not nameplate -------------------------------------
    # two-mass drive train (pu torque / rad, inertias in s)
    h_t: float = 4.0
    h_g: float = 0.16
    k_shaft: float = 0.70
    d_shaft: float = 0.40
    # pitch-to-torque sensitivity (pu torque per degree) and trim pitch
    k_beta: float = 0.03
    beta_trim: float = 5.0   # deg
    # storage current tracking resistance (ohm): bandwidth k_track/l_boost
    k_track: float = 0.144
    # smooth deadband half-width of the storage power correction (W)
    p_deadband: float = 5e6
    # limits
    beta_max: float = 27.0   # deg
    m_max: float = 1.0
    storage_p_max: float = 300e6  # W, rating of the energy storage

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.x_d > self.x_d_p > self.x_d_pp > 0.0):
            raise ValidationError(
                f"d-axis reactances must satisfy x_d > x_d' > x_d'' > 0, got "
                f"{self.x_d}, {self.x_d_p}, {self.x_d_pp}")
        if not (self.x_q > self.x_q_pp > 0.0):
            raise ValidationError(
                f"q-axis reactances must satisfy x_q > x_q'' > 0, got "
                f"{self.x_q}, {self.x_q_pp}")
        if not (0.0 < self.x_l < self.x_d_pp):
            raise ValidationError(f"stator leakage x_l must lie in (0, x_d''), got {self.x_l}")
        for name in ("t_d0_p", "t_d0_pp", "t_q0_pp"):
            if getattr(self, name) <= 0.0:
                raise ValidationError(f"time constant {name} must be positive")
        for name in ("p_mn", "p_n", "v_n", "v_tn", "f_n", "c", "v_dc_nom",
                     "l_boost", "h_t", "h_g", "k_shaft"):
            _require_positive(name, getattr(self, name))
        if not (0.0 < self.d_duty < 1.0):
            raise ValidationError(f"d_duty must lie in (0, 1), got {self.d_duty}")

    @property
    def omega_base(self):
        return 2.0 * math.pi * self.f_n

    def with_overrides(self, **kwargs) -> "WpgParameters":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class WpgState:
    """Dynamic state of one WPG: exactly the twelve core entries.

    Fluxes and speeds are machine per unit, angles in rad, ``v_dc`` in V
    and ``i_s`` in A.
    """

    psi_d: float = 0.0
    psi_q: float = 0.0
    psi_f: float = 0.0
    psi_kd: float = 0.0
    psi_kq: float = 0.0
    omega_r: float = 1.0
    omega_t: float = 1.0
    theta_tw: float = 0.0
    v_dc: float = 1110.0
    delta_theta: float = 0.0
    m: float = 0.9
    i_s: float = 0.0

    def __post_init__(self):
        if not (self.v_dc > 0.0):
            raise ValidationError(f"v_dc must be positive, got {self.v_dc}")

    def as_tuple(self):
        return tuple(getattr(self, name) for name in CORE_STATE_FIELDS)

    @classmethod
    def field_names(cls):
        return CORE_STATE_FIELDS


# number of core dynamic states per WPG; a four-machine benchmark therefore
# exposes a 48-entry core state stack
N_CORE_STATES = len(CORE_STATE_FIELDS)
N_STATES = len(STATE_FIELDS)


def rebase_power(value, from_base, to_base):
    """Re-express a per-unit power on a different power base."""
    _require_positive("from_base", from_base)
    _require_positive("to_base", to_base)
    return value * (from_base / to_base)


def rebase_impedance(z, from_base, to_base):
    """Re-express a per-unit impedance between (power, voltage) base pairs.

    ``from_base`` and ``to_base`` are ``(s, v)`` tuples.  The physical
    impedance z_ohm = z_pu * v**2 / s is held fixed.
    """
    s_from, v_from = from_base
    s_to, v_to = to_base
    _require_positive("s_from", s_from)
    _require_positive("v_from", v_from)
    _require_positive("s_to", s_to)
    _require_positive("v_to", v_to)
    return z * (v_from ** 2 / s_from) / (v_to ** 2 / s_to)


@dataclass(frozen=True)
class NetworkModel:
    """Static grid: buses, branches, loads, shunts, and the base set."""

    buses: tuple
    branches: tuple
    loads: tuple = ()
    shunts: tuple = ()
    base: BaseSet = field(default_factory=BaseSet)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "shunts", tuple(self.shunts))
        self.validate()

    def validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("bus ids must be unique")
        known = set(ids)
        names = [br.name for br in self.branches]
        if len(set(names)) != len(names):
            raise ValidationError("branch names must be unique")
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise ValidationError(
                    f"branch {br.name}: endpoint {br.from_bus}-{br.to_bus} references unknown bus")
        for ld in self.loads:
            if ld.bus not in known:
                raise ValidationError(f"load references unknown bus {ld.bus}")
        for sh in self.shunts:
            if sh.bus not in known:
                raise ValidationError(f"shunt references unknown bus {sh.bus}")

    def bus_ids(self):
        return [b.id for b in self.buses]

    def bus(self, bus_id) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise ValidationError(f"no bus with id {bus_id}")

    def branch(self, name) -> Branch:
        for br in self.branches:
            if br.name == name:
                return br
        raise ValidationError(f"no branch named {name!r}")

    def generator_buses(self):
        return [b.id for b in self.buses if b.kind == "generator"]


def table_default_parameters() -> WpgParameters:
    """The shipped per-machine constants with all defaults applied."""
    return WpgParameters()


def parameter_field_names():
    return tuple(f.name for f in fields(WpgParameters))
