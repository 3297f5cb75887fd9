"""System identification of a grid-forming converter with sparse and symbolic regression."""

__version__ = "0.1.0"
