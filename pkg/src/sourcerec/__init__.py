"""Source-term reconstruction with sparse GMRF priors."""

__version__ = "0.1.0"
