"""Plan-driven counterfactual text-to-image replacement with question-gated rollback."""
from rit._accel import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
