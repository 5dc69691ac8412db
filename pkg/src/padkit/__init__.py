"""Face presentation-attack-detection experimentation toolkit."""

__version__ = "0.1.0"
