"""Affordance transfer toolkit.

Extracts object contact points from annotated interaction videos, stores
them in a retrievable memory, maps them onto novel objects through dense
feature correspondence, evaluates predictions against ground-truth masks,
and selects the nearest grasp candidate.
"""

__version__ = "0.1.0"

from . import _kernels

__all__ = ["__version__", "_kernels"]
