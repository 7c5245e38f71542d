"""Neural signed distance fields fitted with a screened-Poisson heat loss."""

__version__ = "0.1.0"
