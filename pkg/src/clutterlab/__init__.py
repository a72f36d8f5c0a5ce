"""clutterlab: semi-supervised labeling, occlusion-aware clutter synthesis,
and a concurrent online training-data pipeline with deterministic predictor
mocks in place of trained networks."""

__version__ = "0.1.0"

from .types import (  # noqa: F401
    AnnotatedSample,
    BinaryMask,
    Box,
    ClassRegistry,
    LabelMap,
    RgbImage,
)
