"""Kernel backend selection.

The compiled extension ``panp._kernels`` is used when it imports; otherwise
the numpy fallback in ``panp._kernels_py`` is used. Set ``PANP_KERNELS=python``
to force the fallback (useful for benchmarking and for cross-checking).
"""

import importlib
import logging
import os

logger = logging.getLogger(__name__)

_NAMES = (
    "softmax_forward",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
    "softplus_forward",
    "softplus_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "attention_forward",
    "attention_backward",
)


def load_backend(name):
    """Return the kernel module for ``"compiled"`` or ``"python"``."""
    if name == "compiled":
        return importlib.import_module("panp._kernels")
    if name == "python":
        return importlib.import_module("panp._kernels_py")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        load_backend("compiled")
    except ImportError:
        pass
    else:
        names.insert(0, "compiled")
    return names


def _select():
    forced = os.environ.get("PANP_KERNELS", "").strip().lower()
    if forced in ("python", "compiled"):
        return forced, load_backend(forced)
    try:
        return "compiled", load_backend("compiled")
    except ImportError:
        logger.debug("compiled kernels unavailable, using numpy fallback")
        return "python", load_backend("python")


BACKEND, _module = _select()

for _name in _NAMES:
    globals()[_name] = getattr(_module, _name)
del _name
