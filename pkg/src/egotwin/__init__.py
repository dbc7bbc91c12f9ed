"""Digital-twin recovery from egocentric RGB-D interaction fragments."""

__version__ = "0.1.0"
