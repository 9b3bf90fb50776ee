"""SAC-NF: soft actor-critic with normalizing-flow policies at desk scale."""

from sacnf.autodiff import Adam, ConfigurationError, DenseNet, Graph, NumericError, Var

__all__ = [
    "Adam",
    "ConfigurationError",
    "DenseNet",
    "Graph",
    "NumericError",
    "Var",
]
