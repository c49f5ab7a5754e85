"""Dual-decoder attention network for binary image segmentation.

A self-contained micro-framework: numpy-backed tensors with reverse-mode
autodiff, the network layers and model assembly, losses/metrics, dataset
handling, an Adam training loop with bit-exact checkpoints, and a CLI.

The package root stays import-light so the CLI can configure BLAS thread
counts before numpy loads; pull submodules explicitly or use the lazy
re-exports below.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "Graph": "tensor",
    "ModelConfig": "model",
    "DDANetParams": "model",
    "ForwardOutput": "model",
    "build": "model",
    "forward": "model",
    "count_params": "model",
    "LossConfig": "losses",
    "total_loss": "losses",
    "MetricsReport": "metrics",
    "segmentation_metrics": "metrics",
    "Dataset": "data",
    "SplitSpec": "data",
    "synthetic_blobs": "data",
    "TrainConfig": "training",
    "train": "training",
    "evaluate": "training",
    "Checkpoint": "checkpoint",
    "save_checkpoint": "checkpoint",
    "load_checkpoint": "checkpoint",
}


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
