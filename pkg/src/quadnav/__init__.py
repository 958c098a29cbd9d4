"""Quadrotor point-to-point navigation: a vectorized 6-DOF simulator and a numpy PPO stack."""

__version__ = "0.1.0"
