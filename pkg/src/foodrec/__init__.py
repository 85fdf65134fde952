"""Desk-scale food-image classification pipeline.

Subpackages cover the dense-tensor autograd engine, the two toy CNN
architectures, sparse-coding super-resolution, manifest-driven dataset
handling, evaluation metrics and the experiment CLI. The convolution and
pooling hot loops run on a compiled backend when available (see
foodrec.kernels.BACKEND).
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
