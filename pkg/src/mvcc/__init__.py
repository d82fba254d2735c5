"""Mask-guided change captioning for bi-temporal images, at desk scale."""

from mvcc.encoder import ModelConfig
from mvcc.model import MVCCModel

__version__ = "0.1.0"

__all__ = ["MVCCModel", "ModelConfig", "__version__"]
