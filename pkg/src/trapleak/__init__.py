"""Federated-learning simulator and gradient data-extraction toolkit."""

from .attack import AttackMetrics, extract_candidates, extract_from_model, score
from .initializers import ForwardingPlan, TrapConfig, init_random, init_trap_layer
from .nn import Model, ModelGradients, backward, forward, loss

__version__ = "0.1.0"
