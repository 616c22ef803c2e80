"""Conservation-constrained density/flux models with simulation-free training."""

__version__ = "0.1.0"
