"""Episodic learning of CLF time derivatives for model-uncertain robots.

Modules: numerics (linear algebra, integration, RNG), dynamics (robot models,
Segway, simulation), clf (tracking coordinates and the quadratic CLF),
controllers (QP solver and controllers), learning (residual networks and
ERM), episodic (the learning loop and run records), cli.
"""

__version__ = "0.1.0"
