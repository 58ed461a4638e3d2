"""Joint detection and tracking of tiny moving objects with a recurrent correlational network."""

__version__ = "0.1.0"
