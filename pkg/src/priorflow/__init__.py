"""One-step prior-conditioned flow matching over factorized codec token grids."""

__version__ = "0.1.0"
