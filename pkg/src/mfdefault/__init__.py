"""Mean-field SDEs and BSDEs with multiple ordered default times."""

__version__ = "0.1.0"
