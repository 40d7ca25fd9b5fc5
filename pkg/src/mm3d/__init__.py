"""Parameter-free 3D extension of a two-view sparse-proposal detector, on synthetic tomosynthesis."""

__version__ = "0.1.0"
