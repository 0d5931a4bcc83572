"""rosakit: joint low-rank + sparse adapter training over frozen weights.

Submodules: tensor (dense substrate), sparse (CSR + kernels), adapters
(the adapted linear layer), maskgen (mask strategies), rpca (alternating
decomposition and analysis), quant (4-bit base weights), train (harness),
models (desk-scale model zoo), data (tasks), io (artifact formats), cli.
"""

from . import adapters, data, errors, io, maskgen, models, optim, quant, rpca, sparse, tensor, train

__version__ = "0.1.0"

__all__ = [
    "adapters",
    "data",
    "errors",
    "io",
    "maskgen",
    "models",
    "optim",
    "quant",
    "rpca",
    "sparse",
    "tensor",
    "train",
    "__version__",
]
