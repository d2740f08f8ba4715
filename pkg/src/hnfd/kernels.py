"""Backend selection for the grid-encoding kernels.

The compiled extension is used when it imports; ``HNFD_PURE_PYTHON=1``
forces the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("HNFD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _kernels_py
else:
    _impl = _kernels_py

level_forward = _impl.level_forward
level_backward = _impl.level_backward

__all__ = ["BACKEND", "level_forward", "level_backward"]
