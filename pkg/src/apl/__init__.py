"""Weakly supervised canopy segmentation from misaligned point labels.

Patches are described (HOG, colour histograms or external features),
clustered into prototypes, labeled in bulk from ground points, and used to
train a boosted classifier that is applied densely with a sliding window.
"""

from .errors import AplError, StageError
from .pipeline import PipelineConfig, RunReport, run_pipeline

__all__ = ["AplError", "StageError", "PipelineConfig", "RunReport", "run_pipeline"]
__version__ = "0.1.0"
