"""polarlink: GHz-rate polarization-encoded three-state one-decoy BB84 link
simulator with finite-key security analysis."""

__version__ = "0.1.0"
