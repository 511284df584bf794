"""Select the compiled kernels or the numpy fallback.

Set ``BRIDGESIM_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import logging
import os

log = logging.getLogger("bridgesim")

_ckernels = None
if os.environ.get("BRIDGESIM_BACKEND", "").lower() not in ("python", "numpy"):
    try:
        from . import _ckernels
    except ImportError as exc:  # extension not built
        log.debug("compiled kernels unavailable: %s", exc)
        _ckernels = None

BACKEND = "compiled" if _ckernels is not None else "python"


def compiled():
    """The compiled kernel module, or ``None`` when the fallback is active."""
    return _ckernels


def use_compiled(flag=None) -> bool:
    """Whether to route through the compiled kernels (``flag`` overrides when not None)."""
    if flag is None:
        return _ckernels is not None
    return bool(flag) and _ckernels is not None
