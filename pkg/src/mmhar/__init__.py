"""Doppler-guided mmWave radar point cloud action recognition toolkit."""

__version__ = "0.1.0"

from .core import (
    ClipTensor,
    ConfigError,
    FormatError,
    LabelSpace,
    MmharError,
    SampleId,
    SourceMeta,
    ValidationError,
    decode_sample_id,
    encode_sample_id,
    read_clip_archive,
    write_clip_archive,
)

__all__ = [
    "ClipTensor",
    "ConfigError",
    "FormatError",
    "LabelSpace",
    "MmharError",
    "SampleId",
    "SourceMeta",
    "ValidationError",
    "decode_sample_id",
    "encode_sample_id",
    "read_clip_archive",
    "write_clip_archive",
    "__version__",
]
