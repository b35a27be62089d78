"""Multiuser MISO downlink beamforming: classic solvers and beamforming neural networks."""

__version__ = "0.1.0"
