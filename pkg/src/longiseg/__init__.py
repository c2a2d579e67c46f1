"""Interactive longitudinal CT lesion segmentation with scribble refinement."""

__version__ = "0.1.0"

from .core import (
    EditMask,
    InputStack,
    LabelMask,
    ProbMap,
    RefinementRound,
    Volume,
    accumulate_edits,
    assemble_input,
    extract_slices,
    fuse_views,
    labels_from_probs,
    restack,
)

__all__ = [
    "EditMask",
    "InputStack",
    "LabelMask",
    "ProbMap",
    "RefinementRound",
    "Volume",
    "accumulate_edits",
    "assemble_input",
    "extract_slices",
    "fuse_views",
    "labels_from_probs",
    "restack",
    "__version__",
]
