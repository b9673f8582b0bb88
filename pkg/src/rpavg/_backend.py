"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy twin
takes over. Setting ``RPAVG_BACKEND=python`` forces the fallback.
"""

import os

from . import _pycore

if os.environ.get("RPAVG_BACKEND", "").lower() == "python":
    core = _pycore
else:
    try:
        from . import _core as core
    except ImportError:  # extension not built
        core = _pycore

BACKEND = core.NAME


def get_core(name=None):
    """Return the kernel module called ``name`` ("compiled" or "python")."""
    if name is None:
        return core
    if name == "python":
        return _pycore
    if name == "compiled":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")
