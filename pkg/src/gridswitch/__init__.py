"""Cyber-resilient secondary control for islanded AC microgrids.

A reduced-order droop model of N inverter-based DGs, leader-follower
consensus over a spanning arborescence of the communication graph, a
learned estimator of the fused abnormality, and a closed-loop engine that
switches to a clean arborescence when an attack is detected.
"""
from .comm import (Arborescence, AttackSpec, CommGraph, DeviceHealth, TreeSet,
                   admissible_trees, build_tree_set, count_arborescences,
                   enumerate_arborescences, resilience_exists, route)
from .engine import (AnalyticDetector, ANNDetector, EngineSettings, ThresholdPolicy,
                     calibrate_sigma, detect, run_closed_loop, search_topology)
from .errors import *  # noqa: F401,F403
from .estimator import MLPConfig, MLPParams, featurize, train
from .grid import DroopParams, GridConfig, GridState, LineSpec, simulate, steady_state
from .scenario import load_scenario
from .secondary import ControllerGains, compute_tpr, consensus_rates

__version__ = "0.1.0"
