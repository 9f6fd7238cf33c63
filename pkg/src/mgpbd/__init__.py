"""Multigrid-preconditioned global XPBD solver for deformable bodies."""

__version__ = "0.1.0"
