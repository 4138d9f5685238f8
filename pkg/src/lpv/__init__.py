"""Multi-stage scene text recognizer with position-aware attention and masked linguistic refinement."""

__version__ = "0.1.0"
