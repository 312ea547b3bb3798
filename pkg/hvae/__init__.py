"""
hvae - hierarchical VAEs with residual and VamPrior parameterisations on synthetic brain phantoms.
"""

from .config import RunConfig, Variant
from .errors import HVAEError
from .hvae_model import HierarchicalVAE, InferenceResult, LatentHierarchy

__version__ = "0.1.0"

__all__ = [
    "HVAEError",
    "HierarchicalVAE",
    "InferenceResult",
    "LatentHierarchy",
    "RunConfig",
    "Variant",
    "__version__",
]
