"""Register local 2D object maps into one global map with graph neural networks."""

__version__ = "0.1.0"
