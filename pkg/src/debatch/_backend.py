"""Backend selection for the compiled kernels.

The heavy inner loops (precision-matrix solver, boosted-tree fitting) exist
as plain Python functions written against the numpy array API.  When numba
is installed and enabled they are compiled with ``numba.njit``; otherwise
the very same function objects run as ordinary Python.  Both paths execute
identical statements, so results are bit-for-bit equal.

Selection is controlled by the ``DEBATCH_BACKEND`` environment variable:

* ``auto``  (default) use numba when importable, else pure numpy
* ``numba`` require numba, raise if it cannot be imported
* ``numpy`` force the interpreted path even when numba is present

``set_backend`` allows programmatic override (used by tests and the
benchmark script).  Kernels are compiled lazily on first use so importing
the package stays cheap.
"""

from __future__ import annotations

import os

_VALID = ("auto", "numba", "numpy")

_state = {"choice": None, "njit": None}


def _read_env() -> str:
    val = os.environ.get("DEBATCH_BACKEND", "auto").strip().lower()
    if val not in _VALID:
        raise ValueError(
            f"DEBATCH_BACKEND must be one of {_VALID}, got {val!r}"
        )
    return val


def _resolve(choice: str):
    """Return (name, jit_decorator_or_None) for the requested backend."""
    if choice == "numpy":
        return "numpy", None
    try:
        import numba
    except ImportError:
        if choice == "numba":
            raise ImportError(
                "DEBATCH_BACKEND=numba but numba is not installed"
            )
        return "numpy", None
    return "numba", numba.njit(cache=True, fastmath=False)


def set_backend(choice: str) -> None:
    """Force a backend, invalidating any previously compiled kernels."""
    if choice not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {choice!r}")
    name, jit = _resolve(choice)
    _state["choice"] = name
    _state["njit"] = jit
    _registry_recompile()


def backend_name() -> str:
    """Name of the active backend, 'numba' or 'numpy'."""
    if _state["choice"] is None:
        set_backend(_read_env())
    return _state["choice"]


_kernels: dict[str, dict] = {}


def register_kernel(func):
    """Decorator: register ``func`` as a compilable kernel.

    Returns a dispatching wrapper; the compiled (or plain) callable is
    resolved on first call and cached until the backend changes.
    """
    entry = {"py": func, "impl": None}
    _kernels[func.__name__] = entry

    def dispatch(*args):
        impl = entry["impl"]
        if impl is None:
            if _state["choice"] is None:
                set_backend(_read_env())
            jit = _state["njit"]
            impl = entry["py"] if jit is None else jit(entry["py"])
            entry["impl"] = impl
        return impl(*args)

    dispatch.__name__ = func.__name__
    dispatch.__doc__ = func.__doc__
    dispatch.__wrapped__ = func
    return dispatch


def _registry_recompile() -> None:
    for entry in _kernels.values():
        entry["impl"] = None
