"""Version information for vblab."""

__version__ = "0.1.0"
