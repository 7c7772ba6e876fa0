"""3DMM geometry engine and a desk-scale 3DMM / landmark synergy pipeline."""

__version__ = "0.1.0"
