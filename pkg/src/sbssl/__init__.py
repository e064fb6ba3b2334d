"""Self-supervised ViT pretraining by masked reconstruction, with slice-based volume classification."""

from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "Tensor", "no_grad", "__version__"]
