"""Sparse GPS trajectory recovery with a state-propagating diffusion model."""

from .diffusion import NoiseSchedule, make_schedule
from .traj_data import NormStats, Query, RecoveryTask, Trajectory, load_jsonl, save_jsonl, sparsify

__all__ = [
    "NoiseSchedule",
    "NormStats",
    "Query",
    "RecoveryTask",
    "Trajectory",
    "load_jsonl",
    "make_schedule",
    "save_jsonl",
    "sparsify",
]
__version__ = "0.1.0"
