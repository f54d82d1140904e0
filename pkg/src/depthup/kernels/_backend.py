"""Backend selection for the hot loops.

Every kernel in this subpackage exists twice: a loop version compiled with
numba and a vectorized pure-numpy version. ``DEPTHUP_BACKEND`` picks which one
the public names resolve to (``numba`` by default when it imports, ``numpy``
otherwise). ``DEPTHUP_PARALLEL=1`` compiles the numba loops with
``parallel=True``; kernels only ``prange`` over independent outputs, so both
modes give bit-identical results.
"""
import os

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_requested = os.environ.get("DEPTHUP_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"DEPTHUP_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and HAS_NUMBA) else "numpy"
PARALLEL = os.environ.get("DEPTHUP_PARALLEL", "0") == "1"


def _opts(parallel):
    return dict(cache=True, nogil=True, fastmath=False, parallel=parallel, error_model="numpy")


class Kernel:
    """A numba-compiled loop kernel paired with its numpy twin.

    Calling the object runs whichever implementation the backend selected.
    ``.numba``, ``.numba_parallel`` and ``.numpy`` stay reachable so tests and
    benchmarks can compare them directly.
    """

    def __init__(self, loop_fn, numpy_fn):
        self.__name__ = loop_fn.__name__
        self.__doc__ = loop_fn.__doc__
        self.loop = loop_fn
        self.numpy = numpy_fn
        self._seq = None
        self._par = None

    @property
    def numba(self):
        if not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        if self._seq is None:
            self._seq = numba.njit(**_opts(False))(self.loop)
        return self._seq

    @property
    def numba_parallel(self):
        if not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        if self._par is None:
            self._par = numba.njit(**_opts(True))(self.loop)
        return self._par

    def __call__(self, *args):
        if BACKEND == "numba":
            fn = self.numba_parallel if PARALLEL else self.numba
            return fn(*args)
        return self.numpy(*args)


def kernel(numpy_fn):
    """Decorator: ``@kernel(numpy_twin)`` over a numba-compatible loop function."""

    def wrap(loop_fn):
        return Kernel(loop_fn, numpy_fn)

    return wrap


if HAS_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range
