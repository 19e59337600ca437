"""Backend selection for the hot geometric kernels.

The compiled extension is used when it imports; otherwise the numpy twins
take over.  Set ``PSEUDOFLOW_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

python = _pykernels

try:
    if os.environ.get("PSEUDOFLOW_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python backend requested")
    from . import _kernels as compiled
except ImportError:
    compiled = None

active = compiled if compiled is not None else python
BACKEND = "compiled" if compiled is not None else "python"


def get(name: str | None = None):
    """Return a kernel namespace: ``"compiled"``, ``"python"`` or the active one."""
    if name is None:
        return active
    if name == "python":
        return python
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")
