"""Diffusion-driven recursive Bayesian filtering on synthetic tracking and
odometry tasks, with classical filter baselines and a benchmark harness."""

__version__ = "0.1.0"
