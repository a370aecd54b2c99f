"""Kernel backend selection.

The compiled extension (``maskfew._kernels``) is preferred; the numpy
implementation (``maskfew.kernels_py``) is the fallback.  Selection
happens once at import and can be forced with MASKFEW_BACKEND=python
or MASKFEW_BACKEND=cython.  ``use()`` swaps the backend at runtime,
which the benchmark relies on to time both.
"""

import os

from maskfew import kernels_py
from maskfew.errors import ConfigError

try:
    from maskfew import _kernels
except ImportError:
    _kernels = None

impl = kernels_py
name = "python"


def available():
    names = ["python"]
    if _kernels is not None:
        names.append("cython")
    return names


def use(backend):
    """Switch the active kernel backend ("python" or "cython")."""
    global impl, name
    if backend == "python":
        impl = kernels_py
    elif backend == "cython":
        if _kernels is None:
            raise ConfigError("cython backend requested but maskfew._kernels is not built")
        impl = _kernels
    else:
        raise ConfigError(f"unknown backend {backend!r}; expected 'python' or 'cython'")
    name = backend
    return name


_env = os.environ.get("MASKFEW_BACKEND", "").strip().lower()
if _env in ("", "auto"):
    use("cython" if _kernels is not None else "python")
else:
    use(_env)
