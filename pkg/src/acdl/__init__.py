"""GAN-augmented accident detection on a small numpy autodiff engine.

Hot loops (im2col, col2im, max-pool, resize) run through numba when
``ACDL_KERNELS=numba`` (the default) and through plain numpy when
``ACDL_KERNELS=numpy``.
"""

from . import _kernels as kernels
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["kernels", "Tensor", "grad_check", "no_grad", "__version__"]
