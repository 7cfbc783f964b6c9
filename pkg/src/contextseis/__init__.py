"""In-context learning for seismic demultiple.

Modules:

- :mod:`contextseis.autodiff`: a small reverse-mode autodiff library on numpy
- :mod:`contextseis.synthgen`: synthetic NMO-corrected CDP lines with and without multiples
- :mod:`contextseis.model`: ContextSeisNet (CrossBlock U-Net) and the plain U-Net baseline
- :mod:`contextseis.training`: episodic training with AdamW and a one-cycle schedule
- :mod:`contextseis.evaluation`: PSNR by CDP position, prompt layouts, ensembles
- :mod:`contextseis.cli`: the ``contextseis`` command
"""
from .evaluation import PromptLayout, eval_by_position, psnr
from .model import ContextSeisNet, ModelSpec, SupportSet, UNet, build_model, load_checkpoint, save_checkpoint
from .synthgen import GeneratorConfig, InMemoryDataset, SeismicDataset, build_dataset, generate_line
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ContextSeisNet",
    "GeneratorConfig",
    "InMemoryDataset",
    "ModelSpec",
    "PromptLayout",
    "SeismicDataset",
    "SupportSet",
    "TrainConfig",
    "UNet",
    "build_dataset",
    "build_model",
    "eval_by_position",
    "generate_line",
    "load_checkpoint",
    "psnr",
    "save_checkpoint",
    "train",
]
