"""Voxel kernel backend, chosen at import.

The compiled extension is used when it was built; otherwise, or when
``SEMRECON_PURE_PYTHON=1`` is set, the numpy implementation is used.
"""
import os
from contextlib import contextmanager

from . import _pykernels

BACKEND = "python"
integrate_blocks = _pykernels.integrate_blocks
mc_triangles = _pykernels.mc_triangles

if os.environ.get("SEMRECON_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None
    else:
        BACKEND = "cython"
        integrate_blocks = _ckernels.integrate_blocks
        mc_triangles = _ckernels.mc_triangles
else:
    _ckernels = None


def backend_module(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            from . import _ckernels as mod  # raises ImportError when not built
            return mod
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        backend_module("cython")
    except ImportError:
        pass
    else:
        names.append("cython")
    return names


@contextmanager
def use_backend(name: str):
    """Temporarily route module-level kernel calls to backend ``name``."""
    global BACKEND, integrate_blocks, mc_triangles
    mod = backend_module(name)
    saved = BACKEND, integrate_blocks, mc_triangles
    BACKEND, integrate_blocks, mc_triangles = name, mod.integrate_blocks, mod.mc_triangles
    try:
        yield mod
    finally:
        BACKEND, integrate_blocks, mc_triangles = saved
