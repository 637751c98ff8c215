"""Scan-kernel dispatch: the compiled extension when importable, else the numpy fallback.

Set ``LIGHTDOT_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

from . import _scan_py


def _load_compiled() -> ModuleType | None:
    if os.environ.get("LIGHTDOT_PURE", "") not in ("", "0"):
        return None
    try:
        return importlib.import_module("lightdot._scan")
    except ImportError:
        return None


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "python"
_active = _compiled if _compiled is not None else _scan_py


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None or _try_compiled() else [])


def _try_compiled() -> bool:
    try:
        importlib.import_module("lightdot._scan")
        return True
    except ImportError:
        return False


def backend(name: str | None = None) -> ModuleType:
    """Kernel module by name (``"cython"`` or ``"python"``); the active one by default."""
    if name is None:
        return _active
    if name == "python":
        return _scan_py
    if name == "cython":
        return importlib.import_module("lightdot._scan")
    raise ValueError(f"unknown kernel backend {name!r}")


def scan_scores(vectors, query, out) -> None:
    _active.scan_scores(vectors, query, out)


def scan_top_k(vectors, ids, query, k, block=1024):
    return _active.scan_top_k(vectors, ids, query, k, block)
