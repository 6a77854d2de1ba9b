"""Numerical pipeline for degenerate Monge-Ampere equations whose right-hand
side vanishes to finite order on a curve: scaling, canonical-form reduction,
energy-certified linear solves, smoothed Newton iteration, and surface
reconstruction."""

__version__ = "0.1.0"
