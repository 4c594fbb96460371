"""Style-adversary training for recognition under domain shift.

Submodules are imported lazily so that `tsa.cli` can pin thread-related
environment variables before numpy is first loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "style",
    "losses",
    "recog",
    "model",
    "adversary",
    "data",
    "checkpoint",
    "trainer",
    "evaluation",
    "config",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        mod = importlib.import_module(f".{name}", __name__)
        globals()[name] = mod
        return mod
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
