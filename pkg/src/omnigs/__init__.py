"""Feed-forward Omni-Gaussian reconstruction from ego-centric camera rigs."""

__version__ = "0.1.0"
