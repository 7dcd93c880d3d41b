"""Deterministic simulation and light emulation of cloud-edge placements."""
from .assets import AssetKind, AssetSet, AssetSpec, default_link_assets, default_node_assets, default_path_assets
from .builders import build_topology
from .environment import Environment
from .graph import Application, Infrastructure, Path, find_path, path_bucket
from .placement import Placement, ResidualState, best_fit, first_fit, fulfil, is_valid, min_energy, static_strategy
from .scenario import ScenarioConfig, build, load, load_preset, parse
from .simulation import EventSpec, SimGraph, Simulation, SimulationConfig, Trigger, compile, default_step_events

__version__ = "0.1.0"

__all__ = [
    "AssetKind", "AssetSet", "AssetSpec", "default_link_assets", "default_node_assets", "default_path_assets",
    "build_topology", "Environment", "Application", "Infrastructure", "Path", "find_path", "path_bucket",
    "Placement", "ResidualState", "best_fit", "first_fit", "fulfil", "is_valid", "min_energy", "static_strategy",
    "ScenarioConfig", "build", "load", "load_preset", "parse",
    "EventSpec", "SimGraph", "Simulation", "SimulationConfig", "Trigger", "compile", "default_step_events",
]
