"""Transformer-based proton dose prediction at desk scale.

The package bundles a small float32 autodiff engine, the causal
sequence-to-sequence dose model, an analytic toy transport oracle used
to generate training data, a LAMB training loop, and gamma-index /
relative-error evaluation, all behind one command line tool.
"""

import os as _os

# Honor the thread cap before numpy-backed submodules load their BLAS.
_threads = _os.environ.get("DOTA_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import evaluation, grids, model, physics, tensor, training  # noqa: E402
from .evaluation import GammaCriteria, GammaReport, gamma_pass_rate, relative_error  # noqa: E402
from .grids import DoseGrid, GeometryGrid, read_dose, read_geometry  # noqa: E402
from .model import DoseTransformer, ModelConfig  # noqa: E402
from .physics import BeamSpec, PhantomSpec, generate_dataset, simulate_dose  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = [
    "__version__",
    "tensor",
    "grids",
    "model",
    "physics",
    "training",
    "evaluation",
    "Tensor",
    "no_grad",
    "GeometryGrid",
    "DoseGrid",
    "read_geometry",
    "read_dose",
    "ModelConfig",
    "DoseTransformer",
    "PhantomSpec",
    "BeamSpec",
    "simulate_dose",
    "generate_dataset",
    "TrainConfig",
    "train",
    "GammaCriteria",
    "GammaReport",
    "gamma_pass_rate",
    "relative_error",
]
