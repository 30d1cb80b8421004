"""Config ingestion, subcommand orchestration, CSV emission.

Subcommands: ``powerflow``, ``linearize``, ``simulate``, ``ka-sweep``,
``validate``.  All emitted CSVs are deterministic: fixed 17-significant-
digit formatting, comma separators, ``\\n`` line endings, one header row.

Exit codes: 0 success, 2 config error, 3 solver/convergence error,
4 integration error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .cvsc import CvscGains, delta_vdc_star
from .dynamics import Scenario, TimeSeries, assemble_system, run_scenario
from .errors import (ConfigError, ConvergenceError, CvscGridError,
                     EigenSolverError, IntegrationError, ReductionError,
                     ReferenceError_, SolveError, TopologyError, TrimError,
                     ValidationError)
from .network import Event, solve_powerflow
from .smallsignal import analyze_system, ka_sweep
from .sysmodel import (BaseSet, Branch, Bus, Load, NetworkModel, Shunt,
                       WpgParameters)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INTEGRATION = 4

_WPG_FIELDS = {f.name: f.type for f in fields(WpgParameters)}
_CVSC_FIELDS = {f.name: f.type for f in fields(CvscGains)}
_BOOL_TRUE = ("true", "yes", "on", "1")
_BOOL_FALSE = ("false", "no", "off", "0")


@dataclass
class SystemConfig:
    """Parsed system file: network plus per-WPG parameter/gain blocks."""

    model: NetworkModel
    wpg_params: list
    gains: list
    wpg_buses: list
    dispatch: dict
    slack_bus: int

    def assemble(self, trim=True):
        return assemble_system(self.model, self.wpg_params, self.gains,
                               self.wpg_buses, self.dispatch, self.slack_bus,
                               trim=trim)


# ---------------------------------------------------------------------------
# structured-text parsing


def _tokenize(text):
    """Yield (lineno, section, key, value_tokens) for every payload line."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            yield lineno, section, None, None
            continue
        if "=" not in line:
            yield lineno, section, line, None
            continue
        key, value = line.split("=", 1)
        yield lineno, section, key.strip(), value.strip()


def _parse_bool(tok):
    low = tok.lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise ValueError(f"not a boolean: {tok!r}")


def parse_system_config(text) -> SystemConfig:
    """Parse the structured system text into a validated model.

    Unspecified WPG fields fall back to the shipped per-machine defaults;
    every schema violation is collected and reported with its line number.
    """
    problems = []
    buses, branches, loads, shunts = [], [], [], []
    base_kv = {}
    wpg_sections, cvsc_sections = {}, {}
    seen = {"buses": set(), "branches": set(), "loads": set(), "shunts": set()}

    for lineno, section, key, value in _tokenize(text):
        if key is None:
            if section and not (section in ("bases", "buses", "branches",
                                            "loads", "shunts")
                                or section.startswith(("wpg.", "cvsc."))):
                problems.append(f"line {lineno}: unknown section [{section}]")
            continue
        if section is None:
            problems.append(f"line {lineno}: key {key!r} outside any section")
            continue
        if value is None:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        toks = value.split()
        try:
            if section == "bases":
                if key not in ("s_system", "f_n"):
                    raise ValueError(f"unknown base {key!r}")
                base_kv[key] = float(toks[0])
            elif section == "buses":
                bus_id = int(key)
                if bus_id in seen["buses"]:
                    raise ValueError(f"duplicate bus {bus_id}")
                seen["buses"].add(bus_id)
                buses.append(Bus(id=bus_id, v_base=float(toks[0]),
                                 kind=toks[1] if len(toks) > 1 else "junction"))
            elif section == "branches":
                if key in seen["branches"]:
                    raise ValueError(f"duplicate branch {key!r}")
                seen["branches"].add(key)
                if len(toks) < 5:
                    raise ValueError("expected: from to r x b [tap]")
                branches.append(Branch(
                    name=key, from_bus=int(toks[0]), to_bus=int(toks[1]),
                    r=float(toks[2]), x=float(toks[3]), b_shunt=float(toks[4]),
                    tap=float(toks[5]) if len(toks) > 5 else 1.0))
            elif section == "loads":
                bus_id = int(key)
                if bus_id in seen["loads"]:
                    raise ValueError(f"duplicate load at bus {bus_id}")
                seen["loads"].add(bus_id)
                loads.append(Load(bus=bus_id, p=float(toks[0]),
                                  q=float(toks[1]) if len(toks) > 1 else 0.0,
                                  model=toks[2] if len(toks) > 2 else "power"))
            elif section == "shunts":
                bus_id = int(key)
                if bus_id in seen["shunts"]:
                    raise ValueError(f"duplicate shunt at bus {bus_id}")
                seen["shunts"].add(bus_id)
                shunts.append(Shunt(bus=bus_id, g=float(toks[0]),
                                    b=float(toks[1]) if len(toks) > 1 else 0.0))
            elif section.startswith("wpg."):
                idx = int(section.split(".", 1)[1])
                wpg_sections.setdefault(idx, {})[key] = (lineno, value)
            elif section.startswith("cvsc."):
                idx = int(section.split(".", 1)[1])
                cvsc_sections.setdefault(idx, {})[key] = (lineno, value)
            else:
                raise ValueError(f"unknown section [{section}]")
        except (ValueError, IndexError, ValidationError) as exc:
            problems.append(f"line {lineno}: {exc}")

    wpg_params, gains, wpg_buses = [], [], []
    dispatch, slack_bus = {}, None
    for idx in sorted(wpg_sections):
        sec = wpg_sections[idx]
        kw, bus, p_set, v_set, slack = {}, None, None, None, False
        for key, (lineno, value) in sec.items():
            try:
                if key == "bus":
                    bus = int(value)
                elif key == "p_set":
                    p_set = float(value)
                elif key == "v_set":
                    v_set = float(value)
                elif key == "slack":
                    slack = _parse_bool(value)
                elif key in _WPG_FIELDS:
                    kw[key] = int(value) if key == "pole_pairs" else float(value)
                else:
                    raise ValueError(f"unknown key {key!r} in [wpg.{idx}]")
            except ValueError as exc:
                problems.append(f"line {lineno}: {exc}")
        if bus is None:
            problems.append(f"[wpg.{idx}]: missing 'bus'")
            continue
        try:
            params = WpgParameters(**kw)
        except (ValidationError, CvscGridError) as exc:
            problems.append(f"[wpg.{idx}]: {exc}")
            continue
        gain_kw = {"k_a": params.k_a, "k_e": params.k_e, "k_pg1": params.k_pg1,
                   "k_pg2": params.k_pg2, "k_pg3": params.k_pg3,
                   "v_dc_nom": params.v_dc_nom, "has_governor": True}
        for key, (lineno, value) in cvsc_sections.get(idx, {}).items():
            try:
                if key == "has_governor":
                    gain_kw[key] = _parse_bool(value)
                elif key in _CVSC_FIELDS:
                    gain_kw[key] = float(value)
                else:
                    raise ValueError(f"unknown key {key!r} in [cvsc.{idx}]")
            except ValueError as exc:
                problems.append(f"line {lineno}: {exc}")
        wpg_params.append(params)
        gains.append(CvscGains(**gain_kw))
        wpg_buses.append(bus)
        if p_set is None or v_set is None:
            problems.append(f"[wpg.{idx}]: missing p_set or v_set")
        else:
            dispatch[bus] = (p_set, v_set)
        if slack:
            if slack_bus is not None:
                problems.append(f"[wpg.{idx}]: more than one slack WPG")
            slack_bus = bus

    for idx in cvsc_sections:
        if idx not in wpg_sections:
            problems.append(f"[cvsc.{idx}]: no matching [wpg.{idx}] section")

    if not problems and not buses:
        problems.append("no [buses] section")
    if not problems and not wpg_params:
        problems.append("no [wpg.N] sections")
    if not problems and slack_bus is None:
        problems.append("no WPG is marked 'slack = true'")
    if problems:
        raise ConfigError(problems)

    try:
        base = BaseSet(s_system=base_kv.get("s_system", 100e6),
                       s_machine=wpg_params[0].p_n,
                       v_base=wpg_params[0].v_tn,
                       f_n=base_kv.get("f_n", 60.0))
        model = NetworkModel(buses=tuple(buses), branches=tuple(branches),
                             loads=tuple(loads), shunts=tuple(shunts), base=base)
    except (ValidationError, CvscGridError) as exc:
        raise ConfigError([str(exc)]) from exc
    return SystemConfig(model=model, wpg_params=wpg_params, gains=gains,
                        wpg_buses=wpg_buses, dispatch=dispatch,
                        slack_bus=slack_bus)


def serialize_system_config(cfg: SystemConfig) -> str:
    """Emit config text that parses back to an identical configuration."""
    out = ["[bases]",
           f"s_system = {cfg.model.base.s_system!r}",
           f"f_n = {cfg.model.base.f_n!r}",
           "", "[buses]"]
    for b in cfg.model.buses:
        out.append(f"{b.id} = {b.v_base!r} {b.kind}")
    out += ["", "[branches]"]
    for br in cfg.model.branches:
        out.append(f"{br.name} = {br.from_bus} {br.to_bus} {br.r!r} {br.x!r} "
                   f"{br.b_shunt!r} {br.tap!r}")
    if cfg.model.loads:
        out += ["", "[loads]"]
        for ld in cfg.model.loads:
            out.append(f"{ld.bus} = {ld.p!r} {ld.q!r} {ld.model}")
    if cfg.model.shunts:
        out += ["", "[shunts]"]
        for sh in cfg.model.shunts:
            out.append(f"{sh.bus} = {sh.g!r} {sh.b!r}")
    defaults = WpgParameters()
    for i, (params, gain, bus) in enumerate(zip(cfg.wpg_params, cfg.gains,
                                                cfg.wpg_buses), start=1):
        out += ["", f"[wpg.{i}]", f"bus = {bus}"]
        if bus in cfg.dispatch:
            p_set, v_set = cfg.dispatch[bus]
            out.append(f"p_set = {p_set!r}")
            out.append(f"v_set = {v_set!r}")
        if bus == cfg.slack_bus:
            out.append("slack = true")
        for f in fields(WpgParameters):
            val = getattr(params, f.name)
            if val != getattr(defaults, f.name):
                out.append(f"{f.name} = {val!r}")
        out += ["", f"[cvsc.{i}]"]
        out.append(f"has_governor = {'true' if gain.has_governor else 'false'}")
        for name in ("k_a", "k_e", "k_pg1", "k_pg2", "k_pg3", "v_dc_nom"):
            if getattr(gain, name) != getattr(params, name if name != "v_dc_nom"
                                              else "v_dc_nom"):
                out.append(f"{name} = {getattr(gain, name)!r}")
    return "\n".join(out) + "\n"


def parse_scenario_config(text) -> Scenario:
    """Parse a scenario file: [scenario] block plus an [events] list."""
    problems = []
    t_end, dt, waveforms = None, 1e-3, False
    events = []
    for lineno, section, key, value in _tokenize(text):
        if key is None:
            if section not in ("scenario", "events"):
                problems.append(f"line {lineno}: unknown section [{section}]")
            continue
        if value is None:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        try:
            if section == "scenario":
                if key == "t_end":
                    t_end = float(value)
                elif key == "dt":
                    dt = float(value)
                elif key == "waveforms":
                    waveforms = _parse_bool(value)
                else:
                    raise ValueError(f"unknown key {key!r} in [scenario]")
            elif section == "events":
                toks = value.split()
                if len(toks) < 2:
                    raise ValueError("expected: time kind key=value...")
                time, kind = float(toks[0]), toks[1]
                payload = {}
                for tok in toks[2:]:
                    if "=" not in tok:
                        raise ValueError(f"bad payload token {tok!r}")
                    k, v = tok.split("=", 1)
                    payload[k] = v if k == "branch" else float(v)
                if "bus" in payload:
                    payload["bus"] = int(payload["bus"])
                events.append(Event(time=time, kind=kind, payload=payload))
            else:
                raise ValueError(f"key {key!r} outside [scenario]/[events]")
        except (ValueError, ValidationError) as exc:
            problems.append(f"line {lineno}: {exc}")
    if t_end is None:
        problems.append("missing t_end in [scenario]")
    if problems:
        raise ConfigError(problems)
    events.sort(key=lambda ev: ev.time)
    try:
        return Scenario(t_end=t_end, dt=dt, events=tuple(events),
                        waveforms=waveforms)
    except ValidationError as exc:
        raise ConfigError([str(exc)]) from exc


def apply_overrides(cfg: SystemConfig, overrides) -> SystemConfig:
    """Apply dotted-path 'key=value' overrides (e.g. wpg.2.k_a = 5)."""
    problems = []
    wpg_params = list(cfg.wpg_params)
    gains = list(cfg.gains)
    loads = list(cfg.model.loads)
    base = cfg.model.base
    dispatch = dict(cfg.dispatch)
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r}: expected key=value")
            continue
        path, value = (s.strip() for s in item.split("=", 1))
        parts = path.split(".")
        try:
            if parts[0] == "wpg" and len(parts) == 3:
                idx = int(parts[1]) - 1
                name = parts[2]
                if name == "p_set":
                    bus = cfg.wpg_buses[idx]
                    dispatch[bus] = (float(value), dispatch[bus][1])
                elif name == "v_set":
                    bus = cfg.wpg_buses[idx]
                    dispatch[bus] = (dispatch[bus][0], float(value))
                elif name in _WPG_FIELDS:
                    cast = int if name == "pole_pairs" else float
                    wpg_params[idx] = replace(wpg_params[idx], **{name: cast(value)})
                    if name in ("k_a", "k_e", "k_pg1", "k_pg2", "k_pg3", "v_dc_nom"):
                        gains[idx] = replace(gains[idx], **{name: float(value)})
                else:
                    raise ValueError(f"unknown WPG field {name!r}")
            elif parts[0] == "cvsc" and len(parts) == 3:
                idx = int(parts[1]) - 1
                name = parts[2]
                if name == "has_governor":
                    gains[idx] = replace(gains[idx], has_governor=_parse_bool(value))
                elif name in _CVSC_FIELDS:
                    gains[idx] = replace(gains[idx], **{name: float(value)})
                else:
                    raise ValueError(f"unknown CVSC field {name!r}")
            elif parts[0] == "load" and len(parts) == 3:
                bus = int(parts[1])
                name = parts[2]
                if name not in ("p", "q"):
                    raise ValueError(f"unknown load field {name!r}")
                hit = False
                for k, ld in enumerate(loads):
                    if ld.bus == bus:
                        loads[k] = replace(ld, **{name: float(value)})
                        hit = True
                if not hit:
                    raise ValueError(f"no load at bus {bus}")
            elif parts[0] == "bases" and len(parts) == 2:
                if parts[1] not in ("s_system", "f_n"):
                    raise ValueError(f"unknown base {parts[1]!r}")
                base = replace(base, **{parts[1]: float(value)})
            else:
                raise ValueError("unknown override path")
        except (ValueError, IndexError, ValidationError) as exc:
            problems.append(f"override {item!r}: {exc}")
    if problems:
        raise ConfigError(problems)
    model = NetworkModel(buses=cfg.model.buses, branches=cfg.model.branches,
                         loads=tuple(loads), shunts=cfg.model.shunts, base=base)
    return SystemConfig(model=model, wpg_params=wpg_params, gains=gains,
                        wpg_buses=list(cfg.wpg_buses), dispatch=dispatch,
                        slack_bus=cfg.slack_bus)


# ---------------------------------------------------------------------------
# CSV emission


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    """Deterministic CSV: 17 significant digits, comma, LF endings."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _ensure_out(out_dir):
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        return out_dir
    return "."


# ---------------------------------------------------------------------------
# subcommands


def cmd_powerflow(cfg: SystemConfig, out_dir=None):
    """Solve the operating-point power flow; print and write the table."""
    pf = solve_powerflow(cfg.model, cfg.dispatch, cfg.slack_bus)
    out_dir = _ensure_out(out_dir)
    rows = []
    for k, bus in enumerate(pf.bus_ids):
        v = pf.voltage[k]
        rows.append([bus, abs(v), math.degrees(np.angle(v)),
                     pf.p_gen.get(bus, 0.0), pf.q_gen.get(bus, 0.0)])
    write_csv(os.path.join(out_dir, "powerflow.csv"),
              ["bus", "v_mag_pu", "v_angle_deg", "p_gen_w", "q_gen_var"], rows)
    print(f"power flow converged in {pf.iterations} iterations, "
          f"mismatch {pf.mismatch_norm:.3e} pu")
    print(f"{'bus':>4} {'V (pu)':>9} {'angle (deg)':>12} "
          f"{'P gen (MW)':>11} {'Q gen (Mvar)':>13}")
    for bus, vm, ang, p, q in rows:
        mark = " *" if bus == pf.slack_bus else ""
        gen = f"{p / 1e6:11.1f} {q / 1e6:13.1f}" if bus in pf.p_gen else " " * 25
        print(f"{bus:>4} {vm:9.4f} {ang:12.2f} {gen}{mark}")
    return EXIT_OK


def cmd_linearize(cfg: SystemConfig, out_dir=None):
    """Trim, linearize and write the mode table."""
    system = cfg.assemble()
    report = analyze_system(system)
    out_dir = _ensure_out(out_dir)
    rows = []
    for k, mode in enumerate(report.modes, start=1):
        lam = mode.eigenvalue
        top = mode.top_participants(report.labels, 3)
        rows.append([k, lam.real, lam.imag,
                     "" if mode.frequency is None else mode.frequency,
                     "" if mode.damping_ratio is None else mode.damping_ratio,
                     mode.dominant_state,
                     ";".join(f"{n}:{p:.3f}" for n, p in top),
                     1 if mode.is_core else 0])
    write_csv(os.path.join(out_dir, "modes.csv"),
              ["index", "re", "im", "freq_hz", "damping_ratio",
               "dominant_state", "participation_top3", "core"], rows)
    n_core = len(report.core_modes())
    print(f"{len(report.modes)} modes ({n_core} core rows / "
          f"{len(report.modes) - n_core} extension rows)")
    print(f"{'no.':>4} {'real':>12} {'imag':>12} {'f (Hz)':>9} "
          f"{'damping':>9}  dominant")
    for row in rows:
        freq = f"{row[3]:9.4f}" if row[3] != "" else "        -"
        damp = f"{row[4]:9.4f}" if row[4] != "" else "        -"
        flag = "" if row[7] else "  [ext]"
        print(f"{row[0]:>4} {row[1]:12.4f} {row[2]:12.4f} {freq} {damp}"
              f"  {row[5]}{flag}")
    return EXIT_OK


def scenario_summary(system, ts: TimeSeries):
    """Peak/settling metrics, synchronization and energy residuals."""
    n = system.n_wpg
    t = ts.time
    summary = {}
    dvs_final = []
    for i in range(1, n + 1):
        v_dc = ts[f"v_dc_{i}"]
        p_e = ts[f"p_e_{i}"]
        p_me = ts[f"p_in_{i}"] + ts[f"p_storage_{i}"]
        c = system.params[i - 1].c
        energy = 0.5 * c * (v_dc ** 2 - v_dc[0] ** 2)
        integral = np.concatenate(
            [[0.0], np.cumsum(0.5 * (np.diff(t)) *
                              ((p_me - p_e)[1:] + (p_me - p_e)[:-1]))])
        swing = float(np.max(np.abs(energy))) or 1.0
        resid = float(np.max(np.abs(energy - integral))) / swing
        dvs = delta_vdc_star(v_dc[-1], system.gains[i - 1].v_dc_nom)
        dvs_final.append(dvs)
        summary[f"wpg_{i}"] = {
            "v_dc_max": float(np.max(v_dc)),
            "v_dc_min": float(np.min(v_dc)),
            "v_dc_final": float(v_dc[-1]),
            "p_e_max": float(np.max(p_e)),
            "p_e_min": float(np.min(p_e)),
            "p_e_initial": float(p_e[0]),
            "p_e_final": float(p_e[-1]),
            "p_e_swing": float(np.max(p_e) - np.min(p_e)),
            "energy_residual_fraction": resid,
        }
    sync = 0.0
    for a in range(n):
        for b in range(a + 1, n):
            sync = max(sync, abs(dvs_final[a] - dvs_final[b]))
    total0 = sum(summary[f"wpg_{i}"]["p_e_initial"] for i in range(1, n + 1))
    total1 = sum(summary[f"wpg_{i}"]["p_e_final"] for i in range(1, n + 1))
    summary["global"] = {
        "sync_residual_final": float(sync),
        "delta_p_e_total": float(total1 - total0),
        "max_energy_residual": max(summary[f"wpg_{i}"]["energy_residual_fraction"]
                                   for i in range(1, n + 1)),
    }
    return summary


def cmd_simulate(cfg: SystemConfig, scenario: Scenario, out_dir=None):
    """Run a scenario; one CSV per WPG, one network CSV, one summary."""
    system = cfg.assemble()
    out_dir = _ensure_out(out_dir)
    partial = False
    try:
        ts = run_scenario(system, scenario)
    except IntegrationError as exc:
        ts = getattr(exc, "partial", None)
        if ts is None:
            raise
        partial = True
        print(f"WARNING: {ts.diagnostic}", file=sys.stderr)

    wpg_channels = ["v_dc", "p_e", "q_e", "p_in", "p_storage", "v_t",
                    "delta_theta", "omega_r", "omega_t", "m", "beta"]
    for i in range(1, system.n_wpg + 1):
        header = ["time"] + [f"{name}_{i}" for name in wpg_channels]
        cols = [ts.time] + [ts[f"{name}_{i}"] for name in wpg_channels]
        write_csv(os.path.join(out_dir, f"wpg_{i}.csv"), header,
                  zip(*cols))
    net_names = [name for name in ts.channels if name.startswith(("v_bus_", "v_a_",
                                                                  "v_b_", "v_c_"))]
    write_csv(os.path.join(out_dir, "network.csv"),
              ["time"] + net_names,
              zip(ts.time, *[ts[name] for name in net_names]))

    summary = scenario_summary(system, ts)
    rows = []
    for name, metrics in summary.items():
        for key, val in metrics.items():
            rows.append([name, key, val])
    write_csv(os.path.join(out_dir, "summary.csv"),
              ["scope", "metric", "value"], rows)
    print(f"simulated {ts.time[-1]:.4f} s, {len(ts.time)} samples"
          + (" (PARTIAL)" if partial else ""))
    g = summary["global"]
    print(f"  sync residual (final)   : {g['sync_residual_final']:.3e}")
    print(f"  total delta P_e         : {g['delta_p_e_total'] / 1e6:+.1f} MW")
    print(f"  worst energy residual   : {g['max_energy_residual']:.3%}")
    for i in range(1, system.n_wpg + 1):
        w = summary[f"wpg_{i}"]
        print(f"  WPG {i}: v_dc [{w['v_dc_min']:.1f}, {w['v_dc_max']:.1f}] V, "
              f"P_e [{w['p_e_min'] / 1e6:.0f}, {w['p_e_max'] / 1e6:.0f}] MW")
    return EXIT_INTEGRATION if partial else EXIT_OK


def cmd_ka_sweep(cfg: SystemConfig, ka_values, out_dir=None, threads=None):
    """Frequency response of the dc-voltage to power channel per K_a."""
    if threads is None:
        cap = os.environ.get("CVSC_GRID_THREADS")
        threads = max(1, int(cap)) if cap else 1
    system = cfg.assemble()
    if threads > 1 and len(ka_values) > 1:
        omegas = np.logspace(math.log10(0.1), math.log10(1000.0), 121)

        def one(ka):
            return ka_sweep(system, [ka], omegas=omegas)[1]

        curves = {}
        with ThreadPoolExecutor(max_workers=min(threads, len(ka_values))) as ex:
            for res in ex.map(one, ka_values):
                curves.update(res)
    else:
        omegas, curves = ka_sweep(system, ka_values)
    out_dir = _ensure_out(out_dir)
    names = [f"gain_ka_{_fmt(k)}" for k in sorted(curves)]
    cols = [curves[k] for k in sorted(curves)]
    write_csv(os.path.join(out_dir, "ka_sweep.csv"),
              ["omega_rad_s"] + names, zip(omegas, *cols))
    print(f"wrote ka_sweep.csv with {len(curves)} curve(s) over "
          f"{len(omegas)} frequencies")
    return EXIT_OK


def cmd_validate(cfg: SystemConfig, scenario=None):
    cfg.model.validate()
    for p in cfg.wpg_params:
        p.validate()
    print(f"system OK: {len(cfg.model.buses)} buses, "
          f"{len(cfg.model.branches)} branches, {len(cfg.wpg_params)} WPGs")
    if scenario is not None:
        print(f"scenario OK: t_end = {scenario.t_end} s, "
              f"{len(scenario.events)} events")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _read(path):
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cvsc-grid",
        description="Batch studies of a capacitor-voltage-synchronized "
                    "wind-generator power system")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=False):
        p.add_argument("--system", required=True, help="system config file")
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--dt", type=float, default=None, help="override step size")

    common(sub.add_parser("powerflow", help="solve the operating point"))
    common(sub.add_parser("linearize", help="trim, linearize, report modes"))
    sim = sub.add_parser("simulate", help="run a disturbance scenario")
    common(sim, scenario=True)
    sim.add_argument("--waveforms", action="store_true",
                     help="emit reconstructed three-phase waveform channels")
    swp = sub.add_parser("ka-sweep", help="angle-gain frequency sweep")
    common(swp)
    swp.add_argument("--ka", required=True,
                     help="comma-separated K_a values, e.g. 1,5,10,20")
    val = sub.add_parser("validate", help="check config files and exit")
    val.add_argument("--system", required=True)
    val.add_argument("--scenario", default=None)
    val.add_argument("--set", action="append", default=[])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_system_config(_read(args.system))
        if args.set:
            cfg = apply_overrides(cfg, args.set)
        if args.command == "powerflow":
            return cmd_powerflow(cfg, args.out)
        if args.command == "linearize":
            return cmd_linearize(cfg, args.out)
        if args.command == "simulate":
            scenario = parse_scenario_config(_read(args.scenario))
            if args.dt:
                scenario = replace(scenario, dt=args.dt)
            if args.waveforms:
                scenario = replace(scenario, waveforms=True)
            return cmd_simulate(cfg, scenario, args.out)
        if args.command == "ka-sweep":
            ka_values = [float(tok) for tok in args.ka.split(",") if tok]
            return cmd_ka_sweep(cfg, ka_values, args.out)
        if args.command == "validate":
            scenario = None
            if args.scenario:
                scenario = parse_scenario_config(_read(args.scenario))
            return cmd_validate(cfg, scenario)
        raise ConfigError([f"unknown command {args.command!r}"])
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, TrimError, EigenSolverError, SolveError,
            ReductionError, TopologyError, ReferenceError_, ValidationError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except IntegrationError as exc:
        print(f"integration error: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION


if __name__ == "__main__":
    sys.exit(main())
