"""Moment neural networks: analytic mean/covariance propagation through noisy networks."""
from .activations import ActivationKind, LifParams, heaviside_ma, lif_ma, relu_ma
from .network import MnnModel, build_specs, forward, forward_batch_shared, init_params

__version__ = "0.1.0"

__all__ = ["ActivationKind", "LifParams", "MnnModel", "build_specs", "forward",
           "forward_batch_shared", "heaviside_ma", "init_params", "lif_ma", "relu_ma"]
