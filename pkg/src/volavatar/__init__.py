"""Volumetric deformable head avatars from posed images.

Hot kernels are compiled with numba when available; set
``VOLAVATAR_DISABLE_NUMBA=1`` to run the pure-numpy path instead.
"""

from ._accel import backend, set_backend, using_backend

__version__ = "0.1.0"

__all__ = ["__version__", "backend", "set_backend", "using_backend"]
