"""Colinearity decay for transformer matrix pairs.

Library layout (imported lazily so the CLI can pin BLAS threading first):

    linalg        deterministic matmul / Frobenius / Gram / Jacobi SVD
    model         tiny pre-norm ViT with exact manual gradients
    pairs         matrix-pair enumeration and the storage adapter
    regularizers  decoupled pair decay, loss ablation, activation penalty
    optimizer     AdamW, schedule, and the phased train step
    quant         W4A4 fake quantization and evaluation
    diagnostics   activation maxima, alignment, direction zeroing
    data          synthetic templates, IDX files, batching
    experiment    config schema, runs, sweeps
    cli           command-line entry point
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "checkpoint", "cli", "data", "diagnostics", "experiment", "linalg",
    "model", "optimizer", "pairs", "quant", "regularizers",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
