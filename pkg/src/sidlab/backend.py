"""Selects the dense-network kernel backend at import time.

The compiled extension (`sidlab._speedups`, Cython over BLAS) is used
when it imported cleanly; otherwise the pure-numpy reference kernels
take over. Set SIDLAB_BACKEND=numpy or SIDLAB_BACKEND=compiled to force
a choice (forcing an unavailable backend is an error). Training results
are bitwise-reproducible within one backend; across backends they agree
to ~1e-12 relative, not bitwise.
"""

import os

from . import _kernels_np
from .errors import ConfigurationError

try:
    from . import _speedups as _compiled
except ImportError:
    _compiled = None

_BY_NAME = {"numpy": _kernels_np}
if _compiled is not None:
    _BY_NAME["compiled"] = _compiled

_active = _kernels_np if _compiled is None else _compiled

_forced = os.environ.get("SIDLAB_BACKEND")
if _forced:
    if _forced not in _BY_NAME:
        raise ConfigurationError(
            f"SIDLAB_BACKEND={_forced!r} is not available; "
            f"choices: {sorted(_BY_NAME)}"
        )
    _active = _BY_NAME[_forced]


def available():
    """Names of importable backends."""
    return sorted(_BY_NAME)


def active_name():
    return _active.NAME


def select(name):
    """Switch the active backend (used by the benchmark and tests)."""
    global _active
    if name not in _BY_NAME:
        raise ConfigurationError(f"backend {name!r} not available; choices: {sorted(_BY_NAME)}")
    _active = _BY_NAME[name]


def mlp_forward(xcat, weights, biases):
    return _active.mlp_forward(xcat, weights, biases)


def mlp_backward(weights, cache, g_out, need_wgrads=True):
    return _active.mlp_backward(weights, cache, g_out, need_wgrads)
