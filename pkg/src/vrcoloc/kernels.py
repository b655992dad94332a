"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``VRCOLOC_BACKEND=python`` (or ``cython``) to force a backend.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def _resolve(name):
    if name in (None, "", "auto"):
        return "cython" if _ckernels is not None else "python"
    if name not in _BACKENDS:
        raise ImportError(f"kernel backend {name!r} unavailable (have {available_backends()})")
    return name


BACKEND = _resolve(os.environ.get("VRCOLOC_BACKEND"))


def gated_sums(P1, Q1, P2, Q2, w, backend=None):
    """``G[i, j] = sum_k w[k] * tanh(P1[i,k] + Q1[j,k]) * sigmoid(P2[i,k] + Q2[j,k])``."""
    mod = _BACKENDS[_resolve(backend) if backend else BACKEND]
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (P1, Q1, P2, Q2, w)]
    return mod.gated_sums(*args)
