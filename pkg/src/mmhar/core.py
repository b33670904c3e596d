"""Core domain types and the clip archive container.

A clip archive is a plain zip file with two entries:

* ``data`` -- the raw little-endian float32 tensor, ``[T, P, C]`` row-major
* ``meta`` -- a JSON document with the sample id, label, source fields,
  pad mask and normalization mode

The container is deliberately ecosystem-neutral so archives can be produced
and consumed from any language.
"""

import json
import re
import zipfile
from dataclasses import dataclass, field

import numpy as np

STANDARD_T = 32
STANDARD_P = 64
STANDARD_C = 5
CHANNEL_NAMES = ("x", "y", "z", "doppler", "intensity")

ARCHIVE_FORMAT_VERSION = 1

# Fixed zip metadata so identical content produces identical bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class MmharError(Exception):
    """Base class for all library errors."""


class ValidationError(MmharError):
    """A value violates a documented precondition or invariant."""


class FormatError(MmharError):
    """A file or byte stream does not match its documented format."""


class ConfigError(MmharError):
    """A configuration key or value is invalid."""


# ---------------------------------------------------------------------------
# Sample identifiers
# ---------------------------------------------------------------------------

_ID_PATTERN = re.compile(r"^D(\d{3})A(\d{3})E(\d{3})P(\d{3})S(\d{4})$")
_ID_LIMITS = (
    ("dataset_idx", 999),
    ("action_idx", 999),
    ("env_idx", 999),
    ("subject_idx", 999),
    ("seq_idx", 9999),
)


@dataclass(frozen=True, order=True)
class SampleId:
    """Structured identifier: dataset / action / environment / subject / sequence.

    String form is ``D{ddd}A{ddd}E{ddd}P{ddd}S{dddd}`` with fixed zero-padded
    widths 3, 3, 3, 3, 4. All indices are 1-based.
    """

    dataset_idx: int
    action_idx: int
    env_idx: int
    subject_idx: int
    seq_idx: int

    def __str__(self) -> str:
        return encode_sample_id(self)


def encode_sample_id(sid: SampleId) -> str:
    """Render a SampleId as its fixed-width string form."""
    values = (sid.dataset_idx, sid.action_idx, sid.env_idx, sid.subject_idx, sid.seq_idx)
    for (name, limit), value in zip(_ID_LIMITS, values):
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
            raise ValidationError(f"sample id field {name} must be an integer, got {value!r}")
        if not 1 <= value <= limit:
            raise ValidationError(f"sample id field {name}={value} outside [1, {limit}]")
    d, a, e, p, s = values
    return f"D{d:03d}A{a:03d}E{e:03d}P{p:03d}S{s:04d}"


def decode_sample_id(text: str) -> SampleId:
    """Parse the fixed-width string form back into a SampleId."""
    m = _ID_PATTERN.match(text)
    if m is None:
        raise FormatError(f"malformed sample id string: {text!r}")
    values = tuple(int(g) for g in m.groups())
    for (name, limit), value in zip(_ID_LIMITS, values):
        if not 1 <= value <= limit:
            raise FormatError(f"sample id field {name}={value} outside [1, {limit}] in {text!r}")
    return SampleId(*values)


# ---------------------------------------------------------------------------
# Label space and source metadata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelSpace:
    """Ordered action vocabulary; the index of a name is stable for a run."""

    class_names: tuple

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if len(set(names)) != len(names):
            raise ValidationError("label space contains duplicate class names")
        if not names:
            raise ValidationError("label space is empty")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class name {name!r}") from None

    def name(self, idx: int) -> str:
        if not 0 <= idx < len(self.class_names):
            raise ValidationError(f"label index {idx} outside [0, {len(self.class_names)})")
        return self.class_names[idx]


@dataclass(frozen=True)
class SourceMeta:
    """Radar source description attached to every sequence and archive."""

    source_name: str
    carrier_frequency: float  # Hz
    frame_rate: float  # Hz
    notes: str = ""

    def __post_init__(self):
        if self.carrier_frequency <= 0:
            raise ValidationError(f"carrier_frequency must be > 0, got {self.carrier_frequency}")
        if self.frame_rate <= 0:
            raise ValidationError(f"frame_rate must be > 0, got {self.frame_rate}")

    def to_dict(self) -> dict:
        return {
            "source_name": self.source_name,
            "carrier_frequency": self.carrier_frequency,
            "frame_rate": self.frame_rate,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceMeta":
        try:
            return cls(
                source_name=d["source_name"],
                carrier_frequency=float(d["carrier_frequency"]),
                frame_rate=float(d["frame_rate"]),
                notes=d.get("notes", ""),
            )
        except KeyError as exc:
            raise FormatError(f"source metadata missing field {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# Clip tensors
# ---------------------------------------------------------------------------


@dataclass
class ClipTensor:
    """One standardized action clip.

    ``data`` is ``[T, P, C]`` float32 with channel order
    (x m, y m, z m, doppler m/s, intensity). ``pad_mask`` is ``[T]`` bool,
    true on zero-padded frames.
    """

    data: np.ndarray
    pad_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"clip data must be [T, P, C], got shape {self.data.shape}")
        if self.pad_mask is None:
            self.pad_mask = np.zeros(self.data.shape[0], dtype=bool)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.pad_mask.shape != (self.data.shape[0],):
            raise ValidationError(
                f"pad_mask shape {self.pad_mask.shape} does not match T={self.data.shape[0]}"
            )

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def points_per_frame(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def is_standard(self) -> bool:
        return self.data.shape == (STANDARD_T, STANDARD_P, STANDARD_C)

    def validate_standard(self):
        """Raise unless the clip obeys the standardized-shape invariants."""
        if not self.is_standard():
            raise ValidationError(
                f"clip shape {self.data.shape} is not the standardized "
                f"[{STANDARD_T}, {STANDARD_P}, {STANDARD_C}]"
            )
        padded = self.data[self.pad_mask]
        if padded.size and np.any(padded != 0.0):
            raise ValidationError("padded frames must be all-zero in every channel")


# ---------------------------------------------------------------------------
# Clip archives
# ---------------------------------------------------------------------------


def write_zip_entries(path, entries):
    """Write named byte entries to a zip with fixed metadata (bitwise stable)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in entries:
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)


def read_zip_entries(path, names):
    """Read the named entries from a zip, raising FormatError on problems."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, OSError) as exc:
        raise FormatError(f"not a readable archive: {path} ({exc})") from None
    with zf:
        present = set(zf.namelist())
        out = {}
        for name in names:
            if name not in present:
                raise FormatError(f"archive {path} missing entry {name!r}")
            out[name] = zf.read(name)
    return out


def write_clip_archive(clip, sample_id, label, label_name, source, path, normalization="none"):
    """Write one standardized clip plus metadata to ``path``.

    The tensor round-trips bitwise; metadata fields round-trip losslessly.
    """
    if not isinstance(clip, ClipTensor):
        clip = ClipTensor(clip)
    clip.validate_standard()
    if label < 0:
        raise ValidationError(f"label index must be >= 0, got {label}")
    id_str = encode_sample_id(sample_id)
    data = np.ascontiguousarray(clip.data, dtype="<f4")
    meta = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "sample_id": id_str,
        "label": int(label),
        "label_name": str(label_name),
        "source": source.to_dict(),
        "pad_mask": [bool(b) for b in clip.pad_mask],
        "shape": list(clip.data.shape),
        "normalization": str(normalization),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    write_zip_entries(path, [("data", data.tobytes()), ("meta", meta_bytes)])


def read_archive_meta(path) -> dict:
    """Read and validate just an archive's metadata document."""
    raw = read_zip_entries(path, ["meta"])["meta"]
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"archive {path} has malformed meta entry: {exc}") from None
    for key in ("sample_id", "label", "source", "pad_mask", "shape"):
        if key not in meta:
            raise FormatError(f"archive {path} meta missing field {key!r}")
    return meta


def read_clip_archive(path, label_space=None):
    """Read one clip archive; the inverse of :func:`write_clip_archive`.

    Returns ``(clip, sample_id, label, source)``. When ``label_space`` is
    given, the stored label index is validated against it.
    """
    entries = read_zip_entries(path, ["data", "meta"])
    try:
        meta = json.loads(entries["meta"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"archive {path} has malformed meta entry: {exc}") from None
    for key in ("sample_id", "label", "source", "pad_mask", "shape"):
        if key not in meta:
            raise FormatError(f"archive {path} meta missing field {key!r}")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3:
        raise FormatError(f"archive {path} declares non-3D shape {shape}")
    expected = shape[0] * shape[1] * shape[2] * 4
    blob = entries["data"]
    if len(blob) < expected:
        raise FormatError(
            f"archive {path} data entry truncated: {len(blob)} bytes, expected {expected}"
        )
    if len(blob) > expected:
        raise FormatError(
            f"archive {path} data entry is {len(blob)} bytes, which does not match "
            f"shape {shape} ({expected} bytes)"
        )
    data = np.frombuffer(blob, dtype="<f4").reshape(shape)
    pad_mask = np.asarray(meta["pad_mask"], dtype=bool)
    if pad_mask.shape != (shape[0],):
        raise FormatError(f"archive {path} pad_mask length {pad_mask.size} != T={shape[0]}")
    label = int(meta["label"])
    if label_space is not None and not 0 <= label < label_space.class_count:
        raise ValidationError(
            f"archive {path} label {label} outside label space of size {label_space.class_count}"
        )
    sid = decode_sample_id(meta["sample_id"])
    source = SourceMeta.from_dict(meta["source"])
    clip = ClipTensor(data.copy(), pad_mask)
    return clip, sid, label, source
