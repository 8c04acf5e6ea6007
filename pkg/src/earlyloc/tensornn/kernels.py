"""Kernel backend selection.

The compiled Cython module is preferred. Setting ``EARLYLOC_PURE_PYTHON=1``
forces the NumPy fallback, which is also used when the extension has not been
built.
"""

import contextlib
import logging
import os
import sys

from . import _kernels_py

logger = logging.getLogger(__name__)

if os.environ.get("EARLYLOC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _kernels_py
        BACKEND = "python"

_NAMES = (
    "conv2d_forward",
    "conv2d_backward",
    "depthwise_forward",
    "depthwise_backward",
    "maxpool_forward",
    "maxpool_backward",
)


def _bind(impl) -> None:
    module = sys.modules[__name__]
    for name in _NAMES:
        setattr(module, name, getattr(impl, name))


_bind(_impl)


def available_backends() -> dict:
    """Name -> kernel module for every backend importable in this process."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out = {"compiled": _kernels, **out}
    except ImportError:
        pass
    return out


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily route every kernel call through backend ``name``."""
    global BACKEND
    impls = available_backends()
    if name not in impls:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(impls)}")
    saved = BACKEND, {n: globals()[n] for n in _NAMES}
    BACKEND = name
    _bind(impls[name])
    try:
        yield impls[name]
    finally:
        BACKEND = saved[0]
        globals().update(saved[1])

__all__ = [
    "BACKEND",
    "available_backends",
    "use_backend",
    "conv2d_forward",
    "conv2d_backward",
    "depthwise_forward",
    "depthwise_backward",
    "maxpool_forward",
    "maxpool_backward",
]
