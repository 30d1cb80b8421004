"""Admittance matrix, Newton power flow, Kron reduction, network events.

The admittance matrix is dense: the benchmark has eleven buses plus a
handful of synthetic nodes, so sparse machinery would be overhead with no
payoff.  Matrices are rebuilt, never mutated; every topology (base case,
faulted, post-clearing, ...) gets its own immutable ``AdmittanceMatrix``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (ConvergenceError, ReductionError, ReferenceError_,
                     SolveError, TopologyError, ValidationError)
from .sysmodel import NetworkModel

EVENT_KINDS = ("load-step", "fault", "clear", "reclose")


@dataclass(frozen=True)
class Event:
    """One timed network disturbance.

    payload keys by kind:
      load-step : bus, p (W), q (var), v_ref (pu, default 1.0)
      fault     : branch, location (0..1 from-side fraction, default 0.5),
                  y_fault (pu, default 1e6)
      clear     : branch
      reclose   : branch
    """

    time: float
    kind: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValidationError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class FaultSpec:
    branch: str
    location: float = 0.5
    y_fault: float = 1e6


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Bus admittance matrix plus the topology state it was built from.

    ``nodes`` lists the node labels in row order: the model's bus ids,
    then the synthetic fault node (if a fault is active).  ``matrix`` is
    the dense complex admittance in system per unit.
    """

    model: NetworkModel
    nodes: tuple
    matrix: np.ndarray
    removed_branches: frozenset = frozenset()
    fault: FaultSpec | None = None
    step_shunts: tuple = ()   # ((bus, g, b), ...) accumulated load steps

    @property
    def n(self):
        return len(self.nodes)

    def index(self, node):
        try:
            return self.nodes.index(node)
        except ValueError:
            raise ReferenceError_(f"no node {node!r} in admittance matrix") from None

    def copy_matrix(self):
        return self.matrix.copy()


FAULT_NODE = "fault-point"


def _stamp_branch(y, idx, br, sign=+1.0):
    """Add (or with sign=-1 remove) a pi-model branch stamp."""
    i, j = idx[br.from_bus], idx[br.to_bus]
    ys = 1.0 / complex(br.r, br.x)
    t = br.tap
    jb2 = 1j * br.b_shunt / 2.0
    y[i, i] += sign * (ys / t ** 2 + jb2)
    y[j, j] += sign * (ys + jb2)
    y[i, j] -= sign * ys / t
    y[j, i] -= sign * ys / t


def _build_matrix(model, removed=frozenset(), fault=None, step_shunts=()):
    nodes = list(model.bus_ids())
    if fault is not None:
        nodes.append(FAULT_NODE)
    idx = {node: k for k, node in enumerate(nodes)}
    n = len(nodes)
    y = np.zeros((n, n), dtype=complex)

    active = []
    for br in model.branches:
        if not br.in_service or br.name in removed:
            continue
        if fault is not None and br.name == fault.branch:
            continue
        active.append(br)
        _stamp_branch(y, idx, br)

    if fault is not None:
        br = model.branch(fault.branch)
        if br.name in removed:
            raise ReferenceError_(f"cannot fault removed branch {br.name!r}")
        lam = fault.location
        if not (0.0 <= lam <= 1.0):
            raise ValidationError(f"fault location must lie in [0, 1], got {lam}")
        # split the branch at the fault point; charging splits pro rata and
        # any off-nominal tap stays with the from-side section
        if lam <= 0.0 or lam >= 1.0:
            # fault directly at a terminal: keep the full branch, shunt at bus
            _stamp_branch(y, idx, br)
            k = idx[br.from_bus if lam <= 0.0 else br.to_bus]
            y[idx[FAULT_NODE], idx[FAULT_NODE]] += fault.y_fault
            # tie the synthetic node rigidly to the faulted terminal
            big = fault.y_fault
            y[k, k] += big
            y[k, idx[FAULT_NODE]] -= big
            y[idx[FAULT_NODE], k] -= big
        else:
            half_a = replace(br, name=br.name + "#a", to_bus=FAULT_NODE,
                             r=br.r * lam, x=br.x * lam, b_shunt=br.b_shunt * lam)
            half_b = replace(br, name=br.name + "#b", from_bus=FAULT_NODE,
                             r=br.r * (1 - lam), x=br.x * (1 - lam),
                             b_shunt=br.b_shunt * (1 - lam), tap=1.0)
            _stamp_branch(y, idx, half_a)
            _stamp_branch(y, idx, half_b)
            y[idx[FAULT_NODE], idx[FAULT_NODE]] += fault.y_fault
        active.append(br)

    for sh in model.shunts:
        k = idx[sh.bus]
        y[k, k] += complex(sh.g, sh.b)

    for bus, g, b in step_shunts:
        k = idx[bus]
        y[k, k] += complex(g, b)

    _check_connected(nodes, active, fault)
    return tuple(nodes), y


def _check_connected(nodes, branches, fault):
    """All nodes must belong to one connected component."""
    adj = {node: set() for node in nodes}
    for br in branches:
        if fault is not None and br.name == fault.branch:
            a, b = br.from_bus, br.to_bus
            adj[a].add(FAULT_NODE)
            adj[FAULT_NODE].add(a)
            adj[b].add(FAULT_NODE)
            adj[FAULT_NODE].add(b)
        else:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    seen = set()
    stack = [nodes[0]]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        stack.extend(adj[node] - seen)
    if len(seen) != len(nodes):
        missing = sorted(str(x) for x in set(nodes) - seen)
        raise TopologyError(f"network is disconnected; unreachable nodes: {missing}")


def build_ybus(model: NetworkModel, load_admittances=None) -> AdmittanceMatrix:
    """Standard Y-bus: series branches stamped +/-, shunts on the diagonal.

    ``load_admittances`` is an optional {bus: complex y} map used to fold
    constant-impedance loads in (the dynamic-simulation network).
    """
    extra = ()
    if load_admittances:
        extra = tuple((bus, y.real, y.imag) for bus, y in load_admittances.items())
    nodes, y = _build_matrix(model, step_shunts=extra)
    return AdmittanceMatrix(model=model, nodes=nodes, matrix=y, step_shunts=extra)


def apply_event(y: AdmittanceMatrix, event: Event) -> AdmittanceMatrix:
    """Return the admittance matrix after a topology/load event."""
    model = y.model
    kind = event.kind
    pay = event.payload
    removed = set(y.removed_branches)
    fault = y.fault
    steps = list(y.step_shunts)

    if kind == "load-step":
        bus = pay["bus"]
        if bus not in model.bus_ids():
            raise ReferenceError_(f"load-step references unknown bus {bus}")
        v_ref = float(pay.get("v_ref", 1.0))
        s_base = model.base.s_system
        g = (pay.get("p", 0.0) / s_base) / v_ref ** 2
        b = -(pay.get("q", 0.0) / s_base) / v_ref ** 2
        steps.append((bus, g, b))
    elif kind == "fault":
        name = pay["branch"]
        model.branch(name)  # raises if unknown
        if fault is not None:
            raise ValidationError("a fault is already active")
        fault = FaultSpec(branch=name,
                          location=float(pay.get("location", 0.5)),
                          y_fault=float(pay.get("y_fault", 1e6)))
    elif kind == "clear":
        name = pay["branch"]
        model.branch(name)
        if fault is not None and fault.branch == name:
            fault = None
        removed.add(name)
    elif kind == "reclose":
        name = pay["branch"]
        model.branch(name)
        if name not in removed:
            raise ReferenceError_(f"cannot reclose branch {name!r}: not open")
        removed.discard(name)

    nodes, matrix = _build_matrix(model, frozenset(removed), fault, tuple(steps))
    return AdmittanceMatrix(model=model, nodes=nodes, matrix=matrix,
                            removed_branches=frozenset(removed), fault=fault,
                            step_shunts=tuple(steps))


def kron_reduce(y: AdmittanceMatrix, keep) -> AdmittanceMatrix:
    """Eliminate all nodes not in ``keep``: Y_kk - Y_ke Y_ee^-1 Y_ek."""
    keep = list(keep)
    for node in keep:
        y.index(node)
    kept_idx = [y.index(node) for node in keep]
    elim_idx = [k for k in range(y.n) if k not in kept_idx]
    if not elim_idx:
        return AdmittanceMatrix(model=y.model, nodes=tuple(keep),
                                matrix=y.matrix[np.ix_(kept_idx, kept_idx)].copy(),
                                removed_branches=y.removed_branches,
                                fault=y.fault, step_shunts=y.step_shunts)
    ykk = y.matrix[np.ix_(kept_idx, kept_idx)]
    yke = y.matrix[np.ix_(kept_idx, elim_idx)]
    yek = y.matrix[np.ix_(elim_idx, kept_idx)]
    yee = y.matrix[np.ix_(elim_idx, elim_idx)]
    try:
        sol = np.linalg.solve(yee, yek)
    except np.linalg.LinAlgError as exc:
        raise ReductionError(f"interior block is singular: {exc}") from exc
    red = ykk - yke @ sol
    return AdmittanceMatrix(model=y.model, nodes=tuple(keep), matrix=red,
                            removed_branches=y.removed_branches,
                            fault=y.fault, step_shunts=y.step_shunts)


@dataclass(frozen=True)
class PowerFlowSolution:
    """Converged operating point of the static network."""

    bus_ids: tuple
    voltage: np.ndarray        # complex pu, aligned with bus_ids
    p_gen: dict                # bus -> W
    q_gen: dict                # bus -> var
    slack_bus: int
    mismatch_norm: float
    iterations: int

    def v_at(self, bus):
        return self.voltage[self.bus_ids.index(bus)]


def solve_powerflow(model: NetworkModel, dispatch, slack,
                    tol=1e-8, max_iter=30) -> PowerFlowSolution:
    """Newton-Raphson power flow in polar coordinates.

    ``dispatch`` maps generator bus id -> (p_watts, v_setpoint_pu); the
    slack bus takes its voltage setpoint from the same map and its active
    power from the solution.  Constant-power loads enter the mismatch,
    impedance-model loads and shunts enter the admittance matrix.
    """
    bus_ids = model.bus_ids()
    n = len(bus_ids)
    pos = {b: k for k, b in enumerate(bus_ids)}
    if slack not in dispatch:
        raise ValidationError(f"slack bus {slack} missing from dispatch")
    for b in dispatch:
        if b not in pos:
            raise ValidationError(f"dispatch references unknown bus {b}")

    z_loads = {}
    for ld in model.loads:
        if ld.model == "impedance":
            y_l = complex(ld.p, -ld.q) / model.base.s_system
            z_loads[ld.bus] = z_loads.get(ld.bus, 0j) + y_l
    ybus = build_ybus(model, load_admittances=z_loads if z_loads else None)
    y = ybus.matrix
    g, b_mat = y.real, y.imag
    s_base = model.base.s_system

    p_sched = np.zeros(n)
    q_sched = np.zeros(n)
    for ld in model.loads:
        if ld.model == "power":
            p_sched[pos[ld.bus]] -= ld.p / s_base
            q_sched[pos[ld.bus]] -= ld.q / s_base
    for bus, (p_set, _v_set) in dispatch.items():
        if bus != slack:
            p_sched[pos[bus]] += p_set / s_base

    pv = [pos[bus] for bus in dispatch if bus != slack]
    sl = pos[slack]
    pq = [k for k in range(n) if k not in pv and k != sl]
    ang_idx = [k for k in range(n) if k != sl]        # unknown angles
    mag_idx = list(pq)                                # unknown magnitudes

    vm = np.ones(n)
    va = np.zeros(n)
    for bus, (_p, v_set) in dispatch.items():
        vm[pos[bus]] = v_set

    def calc_injections():
        v = vm * np.exp(1j * va)
        s = v * np.conj(y @ v)
        return s.real, s.imag

    mismatch_norm = np.inf
    for it in range(max_iter):
        p_calc, q_calc = calc_injections()
        dp = p_sched[ang_idx] - p_calc[ang_idx]
        dq = q_sched[mag_idx] - q_calc[mag_idx]
        f = np.concatenate([dp, dq])
        mismatch_norm = float(np.max(np.abs(f))) if f.size else 0.0
        if mismatch_norm < tol:
            v = vm * np.exp(1j * va)
            s_all = v * np.conj(y @ v)
            p_gen, q_gen = {}, {}
            for bus in dispatch:
                k = pos[bus]
                p_load = sum(ld.p for ld in model.loads
                             if ld.bus == bus and ld.model == "power")
                q_load = sum(ld.q for ld in model.loads
                             if ld.bus == bus and ld.model == "power")
                p_gen[bus] = s_all[k].real * s_base + p_load
                q_gen[bus] = s_all[k].imag * s_base + q_load
            return PowerFlowSolution(bus_ids=tuple(bus_ids), voltage=v,
                                     p_gen=p_gen, q_gen=q_gen, slack_bus=slack,
                                     mismatch_norm=mismatch_norm, iterations=it)

        # polar Jacobian
        v = vm * np.exp(1j * va)
        vm_c = vm[:, None] * vm[None, :]
        cos_t = np.cos(va[:, None] - va[None, :])
        sin_t = np.sin(va[:, None] - va[None, :])
        p_calc_full, q_calc_full = p_calc, q_calc

        # dP/dtheta, dQ/dtheta, dP/dV, dQ/dV (standard expressions)
        h = vm_c * (g * sin_t - b_mat * cos_t)
        np.fill_diagonal(h, -q_calc_full - b_mat.diagonal() * vm ** 2)
        nmat = vm_c * (g * cos_t + b_mat * sin_t) / vm[None, :]
        np.fill_diagonal(nmat, p_calc_full / vm + g.diagonal() * vm)
        jmat = -vm_c * (g * cos_t + b_mat * sin_t)
        np.fill_diagonal(jmat, p_calc_full - g.diagonal() * vm ** 2)
        lmat = vm_c * (g * sin_t - b_mat * cos_t) / vm[None, :]
        np.fill_diagonal(lmat, q_calc_full / vm - b_mat.diagonal() * vm)

        jac = np.block([
            [h[np.ix_(ang_idx, ang_idx)], nmat[np.ix_(ang_idx, mag_idx)]],
            [jmat[np.ix_(mag_idx, ang_idx)], lmat[np.ix_(mag_idx, mag_idx)]],
        ])
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"power-flow Jacobian singular: {exc}",
                                   mismatch=mismatch_norm) from exc
        va[ang_idx] += dx[:len(ang_idx)]
        vm[mag_idx] += dx[len(ang_idx):]
        if np.any(vm <= 0) or not np.all(np.isfinite(vm)):
            raise ConvergenceError("power flow diverged (negative or non-finite voltage)",
                                   mismatch=mismatch_norm)

    raise ConvergenceError(
        f"power flow did not converge in {max_iter} iterations "
        f"(final mismatch {mismatch_norm:.3e} pu)", mismatch=mismatch_norm)


@dataclass(frozen=True)
class SourceSpec:
    """Internal phasor source behind an RL filter at a network bus."""

    bus: int
    z_filter: complex      # system per unit


class NetworkSolver:
    """Factorized algebraic network for one topology.

    Augments the (load-folded) admittance matrix with one internal node
    per source behind its filter impedance, then reduces to the internal
    nodes.  ``solve`` maps internal phasors to injected powers and bus
    voltages in a single matrix-vector pass.
    """

    def __init__(self, y: AdmittanceMatrix, sources):
        self.y = y
        self.sources = tuple(sources)
        n = y.n
        m = len(self.sources)
        aug = np.zeros((n + m, n + m), dtype=complex)
        aug[:n, :n] = y.matrix
        for k, src in enumerate(self.sources):
            i = y.index(src.bus)
            yf = 1.0 / src.z_filter
            aug[n + k, n + k] += yf
            aug[i, i] += yf
            aug[i, n + k] -= yf
            aug[n + k, i] -= yf
        ykk = aug[n:, n:]
        yke = aug[n:, :n]
        yek = aug[:n, n:]
        yee = aug[:n, :n]
        try:
            sol = np.linalg.solve(yee, yek)
        except np.linalg.LinAlgError as exc:
            raise SolveError(f"network block singular: {exc}") from exc
        self.y_red = ykk - yke @ sol       # internal-node admittance
        self.recover = -sol                # bus voltages = recover @ e
        self.n_net = n

    def solve(self, e):
        """Solve for internal phasors ``e`` (complex array, system pu).

        Returns (bus_voltages, p_e, q_e) with powers in system pu measured
        at the internal nodes (what each dc link sees).
        """
        e = np.asarray(e, dtype=complex)
        if not np.all(np.isfinite(e)):
            raise SolveError("non-finite source phasor")
        i_int = self.y_red @ e
        s = e * np.conj(i_int)
        v_bus = self.recover @ e
        return v_bus, s.real, s.imag

    def terminal_voltages(self, v_bus):
        """|V| at each source's network bus."""
        return np.abs([v_bus[self.y.index(src.bus)] for src in self.sources])


def network_algebraic_solve(y: AdmittanceMatrix, sources, e):
    """One-shot quasi-static solve.

    ``sources`` is a sequence of SourceSpec, ``e`` the matching complex
    internal phasors.  Returns (bus_voltages, p_e, q_e, v_t) in system pu.
    """
    solver = NetworkSolver(y, sources)
    v_bus, p_e, q_e = solver.solve(e)
    return v_bus, p_e, q_e, solver.terminal_voltages(v_bus)
