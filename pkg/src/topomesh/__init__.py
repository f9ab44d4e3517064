"""Topology-modifying mesh reconstruction from shape features.

A genus-0 icosphere template is deformed toward a target shape, faces with
high estimated reconstruction error are pruned to open up the topology, and
the resulting boundary curves are smoothed with in-plane displacements.

Submodules are imported lazily so the command line can pin the BLAS thread
count before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "checkpoint",
    "cli",
    "data",
    "evaluation",
    "losses",
    "mesh",
    "networks",
    "pipeline",
    "report",
)

_EXPORTS = {
    "Mesh": "mesh",
    "PointCloud": "mesh",
    "make_icosphere": "mesh",
    "load_obj": "mesh",
    "save_obj": "mesh",
    "save_ply": "mesh",
    "Value": "autodiff",
    "grad_check": "autodiff",
    "chamfer": "losses",
    "Model": "pipeline",
    "TrainConfig": "pipeline",
    "make_model": "pipeline",
    "train_full": "pipeline",
    "reconstruct": "pipeline",
    "make_dataset": "data",
    "load_dataset": "data",
    "save_dataset": "data",
    "cd_metric": "evaluation",
    "emd_exact": "evaluation",
    "icp_align": "evaluation",
    "evaluate_dataset": "evaluation",
    "tau_sweep": "evaluation",
}


def __getattr__(name: str):
    if name in _EXPORTS:
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(_SUBMODULES) | set(_EXPORTS) | {"__version__"})
