"""Active and Passive MINT training-data auditing toolkit."""

__version__ = "1.0.0"
