"""Spectral partitioning and ADMM for distributed AC optimal power flow."""

from __future__ import annotations

from .acopf import OpfOptions, OpfSolution, kkt_jacobian, solve_centralized_opf, solve_power_flow
from .admm import AdmmOptions, AdmmResult, run_admm
from .harness import ExperimentConfig, ExperimentReport, compute_gap, run_experiment, sweep_regions
from .network import NetworkCase, build_admittance, load_case, parse_case
from .partitioning import Partition, affinity_matrix, electrical_distance_partition, spectral_partition

__all__ = [
    "AdmmOptions",
    "AdmmResult",
    "ExperimentConfig",
    "ExperimentReport",
    "NetworkCase",
    "OpfOptions",
    "OpfSolution",
    "Partition",
    "affinity_matrix",
    "build_admittance",
    "compute_gap",
    "electrical_distance_partition",
    "kkt_jacobian",
    "load_case",
    "parse_case",
    "run_admm",
    "run_experiment",
    "solve_centralized_opf",
    "solve_power_flow",
    "spectral_partition",
    "sweep_regions",
]

__version__ = "0.1.0"
