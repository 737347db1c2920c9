"""Impedance tomography laboratory.

Submodules are imported lazily so the console script can pin BLAS thread
counts via environment variables before numpy is first loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "checkpoint",
    "cli",
    "config",
    "errors",
    "fem",
    "mesh",
    "metrics",
    "models",
    "phantoms",
    "preimage",
    "sampler",
    "tensor_autodiff",
    "viz",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
