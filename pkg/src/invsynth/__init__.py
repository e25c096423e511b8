"""Data-free image synthesis by classifier inversion.

The modules map onto the pipeline: ``classifier_zoo`` (teachers), ``generator``,
``ftp`` and ``losses`` (the synthesis model), ``engine`` (batch inversion),
``metrics`` and ``compression`` (downstream harnesses) and ``cli``.
"""

from .classifier_zoo import ClassifierSpec, build_classifier, load_checkpoint, save_checkpoint
from .engine import InversionConfig, SynthBatch, synthesize
from .losses import LossWeights

__version__ = "0.1.0"

__all__ = ["ClassifierSpec", "InversionConfig", "LossWeights", "SynthBatch", "build_classifier",
           "load_checkpoint", "save_checkpoint", "synthesize", "__version__"]
