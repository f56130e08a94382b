"""Recursive Bayesian channel pruning of CNNs on a self-contained numpy engine."""

from .autodiff import NonFiniteError, ShapeError, Tensor
from .gate import GateState, expected_gate, kl_gradient, kl_term, sample_gate, \
    stationary_rate
from .model import Architecture, Model, build_architecture, gate_sites
from .optim import SGD, Adam, ParamStore

__all__ = [
    "Adam", "Architecture", "GateState", "Model", "NonFiniteError", "ParamStore",
    "SGD", "ShapeError", "Tensor", "build_architecture", "expected_gate",
    "gate_sites", "kl_gradient", "kl_term", "sample_gate", "stationary_rate",
]

__version__ = "0.1.0"
