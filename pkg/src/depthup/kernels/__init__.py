"""Hot loops, each with a numba build and a pure-numpy twin (see ``_backend``)."""
from ._backend import BACKEND, HAS_NUMBA, PARALLEL, Kernel

__all__ = ["BACKEND", "HAS_NUMBA", "PARALLEL", "Kernel"]
