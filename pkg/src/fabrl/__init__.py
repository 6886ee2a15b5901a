"""Wafer-fab dispatching testbed: DES kernel, heuristics, and RL trainers."""

from .fabmodel import FabModel, Lot, build_minifab, load_model, emit_model
from .simkernel import run_episode
from .dispatchers import HeuristicDispatcher, PolicyDispatcher

__all__ = [
    "FabModel",
    "Lot",
    "build_minifab",
    "load_model",
    "emit_model",
    "run_episode",
    "HeuristicDispatcher",
    "PolicyDispatcher",
]

__version__ = "0.1.0"
