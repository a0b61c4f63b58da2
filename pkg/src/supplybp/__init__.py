"""Gaussian belief propagation for supply networks (DC power grids, gas pipelines)."""

from .bp import BeliefSet, BpOptions, ConvergenceTrace, Damping, Status, StopRule, run
from .errors import (
    InnerDiverged,
    KeyMismatch,
    MissingTruth,
    NoAnchor,
    NoConvergence,
    NonPositiveVariance,
    ParseError,
    SingularMatrix,
    SingularSystem,
    SupplyBPError,
    ValidationError,
)
from .factor_graph import GraphKind, LinearGaussianFactor, ProblemSpec, build_graph, fg_loop_count
from .network import Network, load_network, network_loop_count

__version__ = "0.1.0"
