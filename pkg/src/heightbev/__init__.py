"""Height-aware BEV vector-map construction on synthetic multi-camera scenes."""

__version__ = "0.1.0"
