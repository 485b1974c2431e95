"""Configuration-aware neural radiance fields for articulated objects."""

__version__ = "0.1.0"
