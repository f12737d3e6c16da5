"""Reactive orientation primitives with learned tactile feedback.

Segmentation of demonstrations, quaternion DMPs, phase-modulated neural
network feedback models, PI^2-CMA refinement and a simulated tilt-board plant.
"""

from . import canonical, dmp, pmnn, quat, rl, segmentation, testbed

__all__ = ["canonical", "dmp", "pmnn", "quat", "rl", "segmentation", "testbed"]
__version__ = "0.1.0"
