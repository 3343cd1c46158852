"""Gaussian-process regression with ReLU-network dual kernels (conjugate and
neural tangent) and GP-based policy iteration on a continuous mountain car."""

__version__ = "0.1.0"
