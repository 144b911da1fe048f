"""Power-flow laboratory: AC/DC solvers, dataset generation and graph-network surrogates."""

__version__ = "0.1.0"
