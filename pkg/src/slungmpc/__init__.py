"""Simulation and control of a quadrotor with a cable-suspended payload."""

__all__ = ["model", "sim", "energy", "safety", "ocp", "qp", "bench", "cli"]
