"""Fused row kernels with a numba fast path.

The backend is picked once at import from ``DEPPRUNE_KERNELS``:
``numba`` (default when numba imports) or ``numpy``.  Both modules expose the
same functions; ``get_backend(name)`` returns either explicitly, which the
tests and the benchmark use to compare them.
"""

import os

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba missing
    _numba = None

_BACKENDS = {"numpy": _numpy}
if _numba is not None:
    _BACKENDS["numba"] = _numba


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(_BACKENDS)}") from None


BACKEND = os.environ.get("DEPPRUNE_KERNELS", "numba" if _numba is not None else "numpy")
_impl = get_backend(BACKEND)

rmsnorm_fwd = _impl.rmsnorm_fwd
rmsnorm_bwd = _impl.rmsnorm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
swiglu_fwd = _impl.swiglu_fwd
swiglu_bwd = _impl.swiglu_bwd
