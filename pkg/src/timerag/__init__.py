"""timerag: aligns time-series performance metrics into a frozen vocabulary
embedding space and drives retrieval-augmented root-cause diagnosis."""

__version__ = "0.1.0"

from .encoder import AlignmentModel, EncoderConfig
from .metrics import MetricSample, Patch
from .vocab import EmbeddingTable, PrototypePool

__all__ = [
    "AlignmentModel",
    "EncoderConfig",
    "MetricSample",
    "Patch",
    "EmbeddingTable",
    "PrototypePool",
    "__version__",
]
