"""Non-parametric probability distributions on the rotation manifold.

Submodules: rotation (SO(3) algebra), grid (equivolumetric grids), model
(implicit density MLP), train (NLL training loop), infer (distributions,
pose prediction, modes), metrics (evaluation), symsol (synthetic symmetric
solids), viz (Mollweide plots), bench (timing), cli (command line).

Submodules load lazily so the CLI can configure thread pools before numpy.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "rotation", "grid", "model", "train", "infer",
    "metrics", "symsol", "viz", "bench", "cli",
)

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
