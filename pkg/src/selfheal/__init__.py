"""Self-healing closed-loop control for neural networks at desk scale."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
