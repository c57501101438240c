"""Shared building blocks: STL, Gaussian processes, trajectories, buffers and configuration."""
