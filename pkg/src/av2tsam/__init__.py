"""Audio-visual segmentation toolkit: fused audio/visual prompts for a
text-promptable segmentation backbone, with deterministic stub backends for
desk-scale experiments and a pretrained-weight backend interface."""

__version__ = "0.1.0"

from .config import DEFAULTS, RunConfig, load_config
from .datamodel import (
    AudioSegment,
    Frame,
    MaskKind,
    MaskSet,
    Split,
    Subset,
    VideoClip,
    validate_clip,
)
from .errors import (
    Av2tError,
    BackendUnavailableError,
    CheckpointFormatError,
    ConfigKeyError,
    ConventionError,
    DatasetError,
    DimensionError,
    TrainingDivergedError,
)

__all__ = [
    "AudioSegment",
    "Av2tError",
    "BackendUnavailableError",
    "CheckpointFormatError",
    "ConfigKeyError",
    "ConventionError",
    "DEFAULTS",
    "DatasetError",
    "DimensionError",
    "Frame",
    "MaskKind",
    "MaskSet",
    "RunConfig",
    "Split",
    "Subset",
    "TrainingDivergedError",
    "VideoClip",
    "__version__",
    "load_config",
    "validate_clip",
]
