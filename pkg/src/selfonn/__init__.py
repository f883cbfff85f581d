"""Operational neural networks with generative (polynomial) neurons.

Small, deterministic engine: valid-convolution layers whose per-element
kernel transforms are learnable Maclaurin polynomials (or fixed nodal
functions), hand-derived back-propagation, an SGD trainer with restarts,
and desk-scale image tasks for exercising it end to end.
"""

from .network import LayerSpec, Network, OperatorSet, Sampling, count_macs, count_params
from .operators import ACTIVATION_IDS, NODAL_IDS, POOL_IDS

__all__ = [
    "LayerSpec",
    "Network",
    "OperatorSet",
    "Sampling",
    "count_macs",
    "count_params",
    "ACTIVATION_IDS",
    "NODAL_IDS",
    "POOL_IDS",
]

__version__ = "0.1.0"
