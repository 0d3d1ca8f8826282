"""Backend selection for the clustering hot loops.

The compiled extension is preferred when importable; the pure-Python
module is the fallback and the semantic reference. Set
``INSTILL_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
the backend-equivalence tests).
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("INSTILL_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

greedy_assign = _impl.greedy_assign
swap_refine_round = _impl.swap_refine_round


def get_backend(name: str | None = None):
    """Return (greedy_assign, swap_refine_round) for an explicit backend."""
    if name in (None, "auto"):
        return greedy_assign, swap_refine_round
    if name == "python":
        return _kernels_py.greedy_assign, _kernels_py.swap_refine_round
    if name == "compiled":
        from . import _ckernels

        return _ckernels.greedy_assign, _ckernels.swap_refine_round
    raise ValueError(f"unknown kernel backend {name!r}")
