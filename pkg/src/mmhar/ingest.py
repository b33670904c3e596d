"""Dataset-aware preprocessing.

Turns per-source CSV point cloud sequences into standardized clip archives:
sliding windows or segmentation, temporal downsampling / zero padding to
T=32 frames, farthest point sampling / cyclic repeat to P=64 points per
frame, and optional normalization.
"""

import csv
import io
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .core import (
    STANDARD_C,
    STANDARD_P,
    STANDARD_T,
    ClipTensor,
    ConfigError,
    FormatError,
    LabelSpace,
    SampleId,
    SourceMeta,
    ValidationError,
    encode_sample_id,
    read_archive_meta,
    write_clip_archive,
)

REQUIRED_COLUMNS = ("Frame", "X", "Y", "Z", "Doppler", "Intensity")

NORM_EPS = 1e-8
NORM_MODES = ("dataset_level", "clip_level", "none")


# ---------------------------------------------------------------------------
# Raw sequences
# ---------------------------------------------------------------------------


@dataclass
class RawSequence:
    """A variable-length point cloud sequence before standardization.

    ``frame_idx`` is nondecreasing in file order; ``values`` holds the five
    channels (x, y, z, doppler, intensity) per row.
    """

    frame_idx: np.ndarray
    values: np.ndarray
    source: SourceMeta
    label: int = None
    sample: SampleId = None

    def __post_init__(self):
        self.frame_idx = np.asarray(self.frame_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.frame_idx.ndim != 1 or self.values.ndim != 2 or self.values.shape[1] != 5:
            raise ValidationError(
                f"raw sequence arrays malformed: frames {self.frame_idx.shape}, "
                f"values {self.values.shape}"
            )
        if self.frame_idx.size == 0:
            raise ValidationError("raw sequence must contain at least one row")
        if self.frame_idx.size != self.values.shape[0]:
            raise ValidationError("frame index and value row counts differ")
        if np.any(np.diff(self.frame_idx) < 0):
            raise ValidationError("frame indices must be nondecreasing in file order")

    @property
    def n_rows(self) -> int:
        return int(self.frame_idx.size)

    def distinct_frames(self) -> np.ndarray:
        return np.unique(self.frame_idx)

    @property
    def n_frames(self) -> int:
        return int(self.distinct_frames().size)

    def frame_groups(self):
        """Ordered list of (frame_index, [P_t, 5]) for frames with points."""
        frames = self.distinct_frames()
        lo = np.searchsorted(self.frame_idx, frames, side="left")
        hi = np.searchsorted(self.frame_idx, frames, side="right")
        return [(int(f), self.values[a:b]) for f, a, b in zip(frames, lo, hi)]


@dataclass(frozen=True)
class PreprocessPolicy:
    """Per-source preprocessing recipe."""

    mode: str  # sliding_window | segmentation | passthrough
    window: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.mode not in ("sliding_window", "segmentation", "passthrough"):
            raise ValidationError(f"unknown preprocess mode {self.mode!r}")
        if self.window < 1 or self.stride < 1:
            raise ValidationError("window and stride must be >= 1")


# ---------------------------------------------------------------------------
# CSV parsing
# ---------------------------------------------------------------------------


def parse_source_csv(data, source: SourceMeta) -> RawSequence:
    """Parse a ``Frame,X,Y,Z,Doppler,Intensity`` CSV into a RawSequence.

    Errors carry the 1-based file line number of the offending cell.
    """
    if isinstance(data, bytes):
        text = data.decode("utf-8")
    else:
        text = data
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty file: no header row") from None
    colmap = {}
    lowered = [h.strip().lower() for h in header]
    for name in REQUIRED_COLUMNS:
        try:
            colmap[name] = lowered.index(name.lower())
        except ValueError:
            raise FormatError(f"missing column {name!r} in header {header}") from None

    frames, rows = [], []
    for lineno, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) < len(header):
            raise FormatError(f"row {lineno}: expected {len(header)} cells, got {len(cells)}")
        parsed = []
        for name in REQUIRED_COLUMNS:
            cell = cells[colmap[name]].strip()
            try:
                parsed.append(float(cell))
            except ValueError:
                raise FormatError(f"row {lineno}: non-numeric {name} value {cell!r}") from None
        f = parsed[0]
        if f != int(f):
            raise FormatError(f"row {lineno}: Frame must be an integer, got {f}")
        if frames and int(f) < frames[-1]:
            raise FormatError(f"row {lineno}: frame index {int(f)} decreases in file order")
        frames.append(int(f))
        rows.append(parsed[1:])
    if not rows:
        raise FormatError("empty file: header but no data rows")
    return RawSequence(np.array(frames), np.array(rows, dtype=np.float32), source)


# ---------------------------------------------------------------------------
# Windowing and segmentation
# ---------------------------------------------------------------------------


def slide_windows(seq: RawSequence, window: int, stride: int):
    """Extract overlapping windows over the distinct-frame timeline.

    Produces ``floor((F - window) / stride) + 1`` windows starting at
    distinct-frame offsets 0, stride, 2*stride, ... Each window's frame
    indices are re-based to start at 0. Partial windows are never emitted.
    """
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be >= 1")
    frames = seq.distinct_frames()
    f_count = frames.size
    if window > f_count:
        raise ValidationError(
            f"window {window} exceeds the {f_count} distinct frames; no windows can be formed"
        )
    count = (f_count - window) // stride + 1
    out = []
    for j in range(count):
        lo_frame = frames[j * stride]
        hi_frame = frames[j * stride + window - 1]
        a = np.searchsorted(seq.frame_idx, lo_frame, side="left")
        b = np.searchsorted(seq.frame_idx, hi_frame, side="right")
        out.append(
            replace(
                seq,
                frame_idx=seq.frame_idx[a:b] - lo_frame,
                values=seq.values[a:b].copy(),
            )
        )
    return out


def segment_actions(seq: RawSequence, segments):
    """Cut labeled sub-sequences out of a long recording.

    ``segments`` is an iterable of (start_frame, end_frame, label) with
    inclusive frame ranges; ranges must be ordered, non-overlapping and within
    the sequence's frame range. Rows outside all segments are dropped and each
    clip's frames are re-based to start at 0.
    """
    segs = [(int(s), int(e), lab) for s, e, lab in segments]
    if not segs:
        return []
    frames = seq.distinct_frames()
    f_min, f_max = int(frames[0]), int(frames[-1])
    prev_end = None
    for start, end, _ in segs:
        if start > end:
            raise ValidationError(f"segment ({start}, {end}) has start > end")
        if start < f_min or end > f_max:
            raise ValidationError(
                f"segment ({start}, {end}) outside frame range [{f_min}, {f_max}]"
            )
        if prev_end is not None and start <= prev_end:
            raise ValidationError(f"segment ({start}, {end}) overlaps previous end {prev_end}")
        prev_end = end
    out = []
    for start, end, label in segs:
        mask = (seq.frame_idx >= start) & (seq.frame_idx <= end)
        if not mask.any():
            raise ValidationError(f"segment ({start}, {end}) contains no points")
        sub = replace(
            seq,
            frame_idx=seq.frame_idx[mask] - start,
            values=seq.values[mask].copy(),
            label=label,
        )
        out.append((sub, label))
    return out


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def farthest_point_sample(points, m: int, backend=None) -> np.ndarray:
    """Greedy farthest point sampling over xyz coordinates (see kernels)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"points must be [N, 3], got {pts.shape}")
    if m < 1:
        raise ValidationError(f"target M must be >= 1, got {m}")
    if pts.shape[0] < m:
        raise ValidationError(
            f"cannot FPS-sample {m} from {pts.shape[0]} points; use repeat sampling"
        )
    return kernels.fps_indices(pts, m, backend=backend)


def uniform_frame_indices(f_count: int, t: int = STANDARD_T) -> np.ndarray:
    """Endpoint-inclusive uniform downsampling: idx(k) = floor(k * F / T)."""
    return (np.arange(t, dtype=np.int64) * f_count) // t


def repeat_indices(p_t: int, p: int = STANDARD_P) -> np.ndarray:
    """Cyclic repeat: slot j takes point j mod P_t."""
    return np.arange(p, dtype=np.int64) % p_t


def standardize_frames(groups) -> ClipTensor:
    """Standardize an ordered list of (frame_index, [P_t, 5]) groups."""
    if not groups:
        raise ValidationError("clip has no frames")
    for fidx, pts in groups:
        if len(pts) == 0:
            raise ValidationError(f"frame {fidx} inside the clip has no points")
    f_count = len(groups)
    if f_count > STANDARD_T:
        selected = [groups[i] for i in uniform_frame_indices(f_count)]
        pad_count = 0
    else:
        selected = list(groups)
        pad_count = STANDARD_T - f_count

    data = np.zeros((STANDARD_T, STANDARD_P, STANDARD_C), dtype=np.float32)
    pad_mask = np.zeros(STANDARD_T, dtype=bool)
    for k, (fidx, pts) in enumerate(selected):
        pts = np.asarray(pts, dtype=np.float32)
        p_t = pts.shape[0]
        if p_t > STANDARD_P:
            idx = farthest_point_sample(pts[:, :3], STANDARD_P)
        elif p_t < STANDARD_P:
            idx = repeat_indices(p_t)
        else:
            idx = np.arange(STANDARD_P)
        data[k] = pts[idx]
    if pad_count:
        pad_mask[f_count:] = True
    return ClipTensor(data, pad_mask)


def standardize_clip(seq: RawSequence) -> ClipTensor:
    """Convert a RawSequence to the fixed [32, 64, 5] tensor shape."""
    return standardize_frames(seq.frame_groups())


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def _channel_stats(stacked: np.ndarray):
    mean = stacked.mean(axis=0, dtype=np.float64)
    std = stacked.std(axis=0, dtype=np.float64)
    return mean, np.maximum(std, NORM_EPS)


def _apply_stats(clip: ClipTensor, mean, denom) -> ClipTensor:
    data = clip.data.astype(np.float64)
    out = (data - mean) / denom
    out[clip.pad_mask] = 0.0
    return ClipTensor(out.astype(np.float32), clip.pad_mask.copy())


def normalize_clips(clips, mode: str):
    """Standardize each channel to zero mean / unit variance.

    ``dataset_level`` pools statistics over all non-padded points of the whole
    set; ``clip_level`` is per clip. Padded frames stay zero; a degenerate
    constant channel is divided by the 1e-8 std floor.
    """
    if mode not in NORM_MODES:
        raise ValidationError(f"unknown normalization mode {mode!r}; expected one of {NORM_MODES}")
    clips = list(clips)
    if mode == "none":
        return [ClipTensor(c.data.copy(), c.pad_mask.copy()) for c in clips]
    if mode == "dataset_level":
        stacked = np.concatenate(
            [c.data[~c.pad_mask].reshape(-1, STANDARD_C) for c in clips], axis=0
        ).astype(np.float64)
        mean, denom = _channel_stats(stacked)
        return [_apply_stats(c, mean, denom) for c in clips]
    out = []
    for c in clips:
        stacked = c.data[~c.pad_mask].reshape(-1, STANDARD_C).astype(np.float64)
        mean, denom = _channel_stats(stacked)
        out.append(_apply_stats(c, mean, denom))
    return out


# ---------------------------------------------------------------------------
# Action taxonomy (unified label space for the real sources)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionTaxonomy:
    """The unified 33-action vocabulary with per-source original names."""

    names: tuple
    types: tuple
    source_maps: dict  # source name -> {original name lower: action_id}

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace(self.names)

    def action_id(self, source_name: str, original: str) -> int:
        table = self.source_maps.get(source_name)
        if table is None:
            raise ValidationError(f"no taxonomy mapping for source {source_name!r}")
        key = original.strip().lower()
        if key not in table:
            raise ValidationError(f"unknown {source_name} action {original!r}")
        return table[key]


def load_taxonomy() -> ActionTaxonomy:
    raw = resources.files("mmhar").joinpath("data/action_taxonomy.csv").read_text()
    reader = csv.DictReader(io.StringIO(raw))
    names, types = [], []
    source_maps = {"radhar": {}, "mri": {}, "mmfi": {}}
    for row in reader:
        aid = int(row["action_id"])
        assert aid == len(names), "taxonomy rows must be ordered by action_id"
        names.append(row["action"])
        types.append(row["type"])
        for src in source_maps:
            original = row.get(src, "").strip()
            if original:
                source_maps[src][original.lower()] = aid
    return ActionTaxonomy(tuple(names), tuple(types), source_maps)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    label: int
    source: str
    path: str

    def resolve(self, manifest_path) -> Path:
        p = Path(self.path)
        if p.is_absolute():
            return p
        return Path(manifest_path).parent / p


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label", "source", "path"])
        for r in rows:
            writer.writerow([r.sample_id, r.label, r.source, r.path])


def read_manifest(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"sample_id", "label", "source", "path"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise FormatError(f"manifest {path} missing columns {required}")
        for row in reader:
            rows.append(
                ManifestRow(
                    sample_id=row["sample_id"],
                    label=int(row["label"]),
                    source=row["source"],
                    path=row["path"],
                )
            )
    if not rows:
        raise FormatError(f"manifest {path} has no rows")
    return rows


def label_space_from_manifest(manifest_path, rows=None) -> LabelSpace:
    """Recover a consistent label space from the archives a manifest lists."""
    rows = rows if rows is not None else read_manifest(manifest_path)
    names = {}
    for row in rows:
        meta = read_archive_meta(row.resolve(manifest_path))
        label = int(meta["label"])
        name = meta.get("label_name", f"action_{label:03d}")
        if names.get(label, name) != name:
            raise FormatError(
                f"label {label} maps to both {names[label]!r} and {name!r} across archives"
            )
        names[label] = name
    k = max(names) + 1
    return LabelSpace(tuple(names.get(i, f"action_{i:03d}") for i in range(k)))


# ---------------------------------------------------------------------------
# Per-source preparation pipeline
# ---------------------------------------------------------------------------

KNOWN_SOURCES = {
    "radhar": SourceMeta("radhar", 77.0e9, 30.0, "TI IWR1443, 76-81 GHz"),
    "mri": SourceMeta("mri", 77.0e9, 10.0, "TI IWR1443, 76-81 GHz"),
    "mmfi": SourceMeta("mmfi", 60.5e9, 30.0, "TI IWR6843, 60-64 GHz"),
}

SOURCE_DATASET_IDX = {"radhar": 1, "mri": 2, "mmfi": 3}

SOURCE_POLICIES = {
    "radhar": PreprocessPolicy("sliding_window", window=60, stride=10),
    "mri": PreprocessPolicy("sliding_window", window=32, stride=16),
    "mmfi": PreprocessPolicy("segmentation"),
}

LABELS_SIDECAR = "labels.csv"
SEGMENTS_SIDECAR = "segments.csv"


def _read_labels_sidecar(source_dir: Path):
    path = source_dir / LABELS_SIDECAR
    if not path.exists():
        return None
    table = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"file", "action", "env", "subject"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise FormatError(f"{path} must have columns {sorted(required)}")
        for row in reader:
            table[row["file"]] = (int(row["action"]), int(row["env"]), int(row["subject"]))
    return table


def _read_segments_sidecar(source_dir: Path):
    path = source_dir / SEGMENTS_SIDECAR
    if not path.exists():
        return None
    table = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"file", "start", "end", "action"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise FormatError(f"{path} must have columns {sorted(required)}")
        for row in reader:
            table.setdefault(row["file"], []).append(
                (int(row["start"]), int(row["end"]), int(row["action"]))
            )
    for segs in table.values():
        segs.sort()
    return table


@dataclass
class PrepResult:
    manifest_rows: list
    n_input_files: int
    n_sequences: int
    n_frames: int


def prep_source_dir(source_dir, source_name, out_dir, normalize="none"):
    """Run the per-source pipeline over a directory of CSV sequences.

    Expects a ``labels.csv`` sidecar (file, action, env, subject) for
    sliding-window sources, plus a ``segments.csv`` sidecar
    (file, start, end, action) for segmentation sources. ``action`` is the
    1-based action code; stored labels are the 0-based indices.
    """
    if source_name not in SOURCE_POLICIES:
        raise ConfigError(
            f"unknown source {source_name!r}; supported sources: "
            f"{', '.join(sorted(SOURCE_POLICIES))}"
        )
    source_dir = Path(source_dir)
    out_dir = Path(out_dir)
    policy = SOURCE_POLICIES[source_name]
    meta = KNOWN_SOURCES[source_name]
    taxonomy = load_taxonomy()
    label_space = taxonomy.label_space

    files = sorted(
        p for p in source_dir.glob("*.csv") if p.name not in (LABELS_SIDECAR, SEGMENTS_SIDECAR)
    )
    if not files:
        raise ValidationError(f"no CSV sequence files found in {source_dir}")
    labels = _read_labels_sidecar(source_dir)
    segments = _read_segments_sidecar(source_dir)
    if policy.mode == "segmentation" and segments is None:
        raise ValidationError(
            f"source {source_name!r} needs a {SEGMENTS_SIDECAR} sidecar with "
            "(file, start, end, action) rows"
        )
    if policy.mode == "sliding_window" and labels is None:
        raise ValidationError(
            f"source {source_name!r} needs a {LABELS_SIDECAR} sidecar with "
            "(file, action, env, subject) rows"
        )

    pending = []  # (clip, sample_id, label)
    n_frames = 0
    seq_counter = 0
    for path in files:
        seq = parse_source_csv(path.read_bytes(), meta)
        n_frames += seq.n_frames
        env, subject = 1, 1
        if labels is not None and path.name in labels:
            _, env, subject = labels[path.name]
        if policy.mode == "sliding_window":
            if path.name not in labels:
                raise ValidationError(f"{LABELS_SIDECAR} has no row for {path.name}")
            action, env, subject = labels[path.name]
            pieces = [
                (sub, action - 1) for sub in slide_windows(seq, policy.window, policy.stride)
            ]
        elif policy.mode == "segmentation":
            if path.name not in segments:
                raise ValidationError(f"{SEGMENTS_SIDECAR} has no rows for {path.name}")
            pieces = [
                (sub, action - 1)
                for sub, action in segment_actions(seq, segments[path.name])
            ]
        else:
            action = labels[path.name][0] if labels and path.name in labels else 1
            pieces = [(seq, action - 1)]
        for sub, label in pieces:
            if not 0 <= label < label_space.class_count:
                raise ValidationError(f"action code {label + 1} outside the unified taxonomy")
            seq_counter += 1
            sid = SampleId(
                dataset_idx=SOURCE_DATASET_IDX[source_name],
                action_idx=label + 1,
                env_idx=env,
                subject_idx=subject,
                seq_idx=seq_counter,
            )
            pending.append((standardize_clip(sub), sid, label))

    clips = normalize_clips([c for c, _, _ in pending], normalize)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for clip, (_, sid, label) in zip(clips, pending):
        id_str = encode_sample_id(sid)
        rel = f"{id_str}.clip"
        write_clip_archive(
            clip,
            sid,
            label,
            label_space.name(label),
            meta,
            out_dir / rel,
            normalization=normalize,
        )
        rows.append(ManifestRow(id_str, label, source_name, rel))
    return PrepResult(rows, len(files), len(rows), n_frames)
