"""Risk-sensitive asset allocation under jump-diffusion factor dynamics:
a policy-iteration solver for the transformed HJB equation on a lattice,
a closed-form linear-quadratic oracle, and a Monte Carlo cross-check.

Submodules are loaded lazily so the command-line entry point can cap the
BLAS thread pools before numpy is first imported.
"""

__version__ = "0.1.0"

_SUBMODULES = ("model", "hamiltonian", "grid", "solver", "oracle",
               "montecarlo", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module("." + name, __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
