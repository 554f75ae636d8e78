"""Stochastic bilevel optimization with a coupled penalty method and its hard instances."""
from .kernels import ChainConfig
from .oracles import GaussianOracle, ZeroChainOracle
from .problems import (
    ChainInstance,
    EmbeddedChainInstance,
    PerturbedQuadraticInstance,
    QuadraticInstance,
    SmoothnessProfile,
    derived_constants,
)
from .solver import PenaltyBilevelSolver, SolverConfig, run, schedule_from_theorem

__all__ = [
    "ChainConfig",
    "ChainInstance",
    "EmbeddedChainInstance",
    "GaussianOracle",
    "PenaltyBilevelSolver",
    "PerturbedQuadraticInstance",
    "QuadraticInstance",
    "SmoothnessProfile",
    "SolverConfig",
    "ZeroChainOracle",
    "derived_constants",
    "run",
    "schedule_from_theorem",
]

__version__ = "0.1.0"
