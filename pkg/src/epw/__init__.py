"""Learning in Generic Games that satisfy an effective planning window."""

__version__ = "0.1.0"
