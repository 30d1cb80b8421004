"""Shipped benchmark dataset and scenario fixtures."""

from importlib import resources


def _path(name):
    return resources.files(__package__) / name


def benchmark_system_path():
    """Eleven-bus two-area benchmark with four aggregated WPGs."""
    return _path("benchmark.system")


def loadstep_scenario_path():
    """400 MW load connection on load bus 9 at t = 2 s."""
    return _path("loadstep.scenario")


def fault_scenario_path():
    """Three-phase fault on line 7-8, cleared after four cycles, reclosed."""
    return _path("fault_line_7_8.scenario")


def read_benchmark_system():
    return benchmark_system_path().read_text()


def read_loadstep_scenario():
    return loadstep_scenario_path().read_text()


def read_fault_scenario():
    return fault_scenario_path().read_text()
