"""Reconstruction attacks on census-style tabulations and their risk metrics."""
from __future__ import annotations

from .datamodel import Dataset, Histogram, Prototype, multiset_diff, project
from .ingest import SynthConfig, generate_synthetic, load_microdata
from .recon_diff import reconstruct_block, reconstruct_tract
from .recon_opt import OptConfig, RankedReconstruction, reconstruct_unit, run_crr
from .swap import SwapConfig, apply_swap
from .tabulate import Workload, builtin_workloads, check_consistency, tabulate

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Histogram",
    "OptConfig",
    "Prototype",
    "RankedReconstruction",
    "SwapConfig",
    "SynthConfig",
    "Workload",
    "apply_swap",
    "builtin_workloads",
    "check_consistency",
    "generate_synthetic",
    "load_microdata",
    "multiset_diff",
    "project",
    "reconstruct_block",
    "reconstruct_tract",
    "reconstruct_unit",
    "run_crr",
    "tabulate",
]
