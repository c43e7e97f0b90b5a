"""Average-cost dispatch policies for a fleet of emergency units."""

__version__ = "0.1.0"
