"""Selects the training-kernel backend at import time.

The compiled extension is preferred; the NumPy implementation is used when
the extension is missing or ``CFLSIM_PURE_PYTHON`` is set to a truthy value.
"""

from __future__ import annotations

import os

from . import _pykernels

_FORCE_PY = os.environ.get("CFLSIM_PURE_PYTHON", "").strip().lower() in {"1", "true", "yes", "on"}

_compiled = None
if not _FORCE_PY:
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"

loss_grad = _impl.loss_grad
train_local = _impl.train_local


def compiled_available() -> bool:
    return _compiled is not None


def get_backend(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            try:
                from . import _kernels
            except ImportError as exc:
                raise RuntimeError("compiled kernels are not built") from exc
            return _kernels
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
