"""Transient simulation of grid-forming storage under safety-consensus control."""
__version__ = "0.1.0"
