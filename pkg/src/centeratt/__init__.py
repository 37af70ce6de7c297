"""Desk-scale two-stage center-based 3D detector with attention refinement."""

__version__ = "0.1.0"

from .boxes import Box3D, ObjectClass  # noqa: E402
from .config import PipelineConfig, load_config  # noqa: E402
from .pipeline import ABLATION_VARIANTS, Pipeline, Variant  # noqa: E402
from .tensor import Precision, Tensor  # noqa: E402

__all__ = ["Box3D", "ObjectClass", "PipelineConfig", "load_config", "ABLATION_VARIANTS",
           "Pipeline", "Variant", "Precision", "Tensor", "__version__"]
