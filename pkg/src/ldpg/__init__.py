"""Large-deviation analysis of entropy-regularized stochastic policy gradient."""

__version__ = "0.1.0"
