"""Hot-loop kernels with a compiled backend and a pure-Python fallback.

The compiled extension ``clotvc._kernels`` is used when it imports; set
``CLOTVC_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names the
active implementation.
"""

import os

from . import _fallback

_compiled = None
if os.environ.get("CLOTVC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

if _compiled is not None:
    sinkhorn_log = _compiled.sinkhorn_log
    dtw = _compiled.dtw
    BACKEND = "cython"
else:
    sinkhorn_log = _fallback.sinkhorn_log
    dtw = _fallback.dtw
    BACKEND = "python"

__all__ = ["sinkhorn_log", "dtw", "BACKEND", "get_backend"]


def get_backend(name):
    """Return a namespace with ``sinkhorn_log`` and ``dtw`` for ``name``.

    ``name`` is ``"cython"`` or ``"python"``; requesting the compiled backend
    when it is not built raises ``ImportError``.
    """
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
