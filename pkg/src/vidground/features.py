"""On-disk feature formats and validated in-memory records.

Feature matrices travel in a small self-describing binary container
(magic ``MSDF``): version 1 carries float32 payloads and is the wire
format for clip/word features, version 2 carries float64 and is used by
parameter checkpoints.  Annotations travel as JSON-lines manifests with
windows in seconds; internally every temporal span is normalized to
[0, 1] as a (center, span) pair.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ValidationError

MSDF_MAGIC = b"MSDF"
_HEADER = struct.Struct("<4sIII")  # magic, version, rows, cols

# version -> payload dtype (little-endian)
_PAYLOAD_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

# Spans may overhang [0, 1] by at most this much before clamping; anything
# beyond is a hard error rather than a silent fix.
SPAN_EDGE_TOL = 1e-6

POSITIVE = "positive"
HARD_NEGATIVE = "hard_negative"


def as_feature_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D real matrix: at least 1x1 and all entries finite."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected 2-D array, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name}: degenerate shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: non-finite entries")
    return arr


def write_matrix(path, matrix: np.ndarray) -> None:
    """Write a 2-D array in the MSDF container, version chosen by dtype."""
    arr = as_feature_matrix(matrix)
    if arr.dtype == np.float64:
        version, dtype = 2, _PAYLOAD_DTYPES[2]
    else:
        version, dtype = 1, _PAYLOAD_DTYPES[1]
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MSDF_MAGIC, version, rows, cols))
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def write_feature_file(path, matrix: np.ndarray) -> None:
    """Write a feature matrix as MSDF version 1 (float32, row-major)."""
    arr = as_feature_matrix(matrix).astype(np.float32)
    write_matrix(path, arr)


def read_feature_file(path) -> np.ndarray:
    """Read an MSDF file back into a 2-D array.

    Raises FormatError on a bad magic/version or truncated payload and
    DataError if the payload contains non-finite values.
    """
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic, version, rows, cols = _HEADER.unpack(header)
        if magic != MSDF_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version not in _PAYLOAD_DTYPES:
            raise FormatError(f"{path}: unsupported version {version}")
        if rows < 1 or cols < 1:
            raise FormatError(f"{path}: degenerate dims {rows}x{cols}")
        dtype = _PAYLOAD_DTYPES[version]
        expected = rows * cols * dtype.itemsize
        payload = fh.read(expected + 1)
    if len(payload) < expected:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite entries in payload")
    return arr.copy()


@dataclass(frozen=True)
class MomentSpan:
    """One temporal segment as normalized (center, span) on [0, 1]."""

    center: float
    span: float

    def __post_init__(self):
        if not (math.isfinite(self.center) and math.isfinite(self.span)):
            raise ValidationError(f"non-finite span ({self.center}, {self.span})")
        if self.span <= 0:
            raise ValidationError(f"span must be > 0, got {self.span}")
        start = self.center - self.span / 2
        end = self.center + self.span / 2
        if start < -SPAN_EDGE_TOL or end > 1 + SPAN_EDGE_TOL:
            raise ValidationError(
                f"span [{start:.8f}, {end:.8f}] exceeds [0, 1] beyond tolerance"
            )
        # Clamp sub-tolerance overhang onto the unit interval.
        cs, ce = max(start, 0.0), min(end, 1.0)
        if (cs, ce) != (start, end):
            object.__setattr__(self, "center", (cs + ce) / 2)
            object.__setattr__(self, "span", ce - cs)

    @classmethod
    def from_start_end(cls, start: float, end: float) -> "MomentSpan":
        return cls(center=(start + end) / 2, span=end - start)

    def to_start_end(self) -> tuple[float, float]:
        return self.center - self.span / 2, self.center + self.span / 2

    def to_array(self) -> np.ndarray:
        return np.array([self.center, self.span], dtype=np.float64)


def spans_to_array(spans: list[MomentSpan]) -> np.ndarray:
    """Stack spans into a G x 2 (center, span) float64 array."""
    if not spans:
        return np.zeros((0, 2), dtype=np.float64)
    return np.stack([s.to_array() for s in spans])


@dataclass
class VideoRecord:
    """Per-video motion and semantic clip features plus timing metadata."""

    vid: str
    motion: np.ndarray  # L x d_m
    semantic: np.ndarray  # L x d_s
    duration_s: float
    clip_len_s: float

    def __post_init__(self):
        self.motion = as_feature_matrix(self.motion, f"{self.vid}.motion")
        self.semantic = as_feature_matrix(self.semantic, f"{self.vid}.semantic")
        if self.motion.shape[0] != self.semantic.shape[0]:
            raise ValidationError(
                f"{self.vid}: motion rows {self.motion.shape[0]} != "
                f"semantic rows {self.semantic.shape[0]}"
            )
        if self.clip_len_s <= 0 or self.duration_s <= 0:
            raise ValidationError(f"{self.vid}: non-positive duration/clip_len")
        if abs(self.num_clips * self.clip_len_s - self.duration_s) > self.clip_len_s:
            raise ValidationError(
                f"{self.vid}: {self.num_clips} clips x {self.clip_len_s}s "
                f"inconsistent with duration {self.duration_s}s"
            )

    @property
    def num_clips(self) -> int:
        return self.motion.shape[0]


@dataclass
class AnnotationRecord:
    """One query against one video: text features, GT windows, clip labels."""

    qid: str
    vid: str
    text: np.ndarray  # M x d_t
    windows: list[MomentSpan]
    saliency_labels: list[int]  # length L, -1 outside GT windows, else 0..4
    polarity: str = POSITIVE

    def __post_init__(self):
        self.text = as_feature_matrix(self.text, f"{self.qid}.text")
        if self.polarity not in (POSITIVE, HARD_NEGATIVE):
            raise ValidationError(f"{self.qid}: bad polarity {self.polarity!r}")
        if self.polarity == POSITIVE and not self.windows:
            raise ValidationError(f"{self.qid}: positive record with no windows")
        bad = [v for v in self.saliency_labels if not -1 <= int(v) <= 4]
        if bad:
            raise ValidationError(f"{self.qid}: saliency labels outside -1..4: {bad}")
        self.saliency_labels = [int(v) for v in self.saliency_labels]

    @property
    def num_windows(self) -> int:
        return len(self.windows)


@dataclass
class Dataset:
    """Loaded manifest: unique videos plus all annotation records."""

    videos: dict[str, VideoRecord]
    annotations: list[AnnotationRecord]

    @property
    def positives(self) -> list[AnnotationRecord]:
        return [a for a in self.annotations if a.polarity == POSITIVE]

    @property
    def negatives(self) -> list[AnnotationRecord]:
        return [a for a in self.annotations if a.polarity == HARD_NEGATIVE]

    def video_for(self, ann: AnnotationRecord) -> VideoRecord:
        return self.videos[ann.vid]


@dataclass
class ValidationReport:
    """Aggregated dataset health counters and invariant breaches."""

    videos: int = 0
    queries: int = 0
    positives: int = 0
    negatives: int = 0
    errors: list[str] = field(default_factory=list)

    def raise_if_errors(self) -> None:
        if self.errors:
            raise ValidationError("; ".join(self.errors))


def window_seconds_to_span(start_s: float, end_s: float, duration_s: float) -> MomentSpan:
    """Convert a [start, end] window in seconds to a normalized span."""
    if end_s <= start_s:
        raise ValidationError(f"window [{start_s}, {end_s}]s has non-positive length")
    if start_s < -SPAN_EDGE_TOL * duration_s or end_s > duration_s * (1 + SPAN_EDGE_TOL):
        raise ValidationError(
            f"window [{start_s}, {end_s}]s outside video duration {duration_s}s"
        )
    return MomentSpan.from_start_end(start_s / duration_s, end_s / duration_s)


def _polarity_from_manifest(value: str) -> str:
    if value == "pos":
        return POSITIVE
    if value == "neg":
        return HARD_NEGATIVE
    raise ValidationError(f"manifest polarity must be 'pos' or 'neg', got {value!r}")


def load_manifest(path) -> Dataset:
    """Load a JSON-lines manifest and its referenced MSDF feature files.

    Each line carries qid, vid, duration, relevant_windows (seconds),
    saliency_scores, motion_path / semantic_path / text_path (relative to
    the manifest), and an optional polarity ("pos" default).
    """
    path = Path(path)
    root = path.parent
    videos: dict[str, VideoRecord] = {}
    annotations: list[AnnotationRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                ann = _load_row(row, root, videos)
            except (ValidationError, FormatError, DataError) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
            annotations.append(ann)
    return Dataset(videos=videos, annotations=annotations)


def _load_row(row: dict, root: Path, videos: dict[str, VideoRecord]) -> AnnotationRecord:
    for key in ("qid", "vid", "duration", "relevant_windows", "saliency_scores",
                "motion_path", "semantic_path", "text_path"):
        if key not in row:
            raise ValidationError(f"missing manifest key {key!r}")
    vid = str(row["vid"])
    duration = float(row["duration"])
    if vid not in videos:
        motion = read_feature_file(root / row["motion_path"])
        semantic = read_feature_file(root / row["semantic_path"])
        clip_len = duration / motion.shape[0]
        videos[vid] = VideoRecord(
            vid=vid, motion=motion, semantic=semantic,
            duration_s=duration, clip_len_s=float(row.get("clip_len", clip_len)),
        )
    video = videos[vid]
    windows = [
        window_seconds_to_span(float(w[0]), float(w[1]), duration)
        for w in row["relevant_windows"]
    ]
    labels = [int(v) for v in row["saliency_scores"]]
    if len(labels) != video.num_clips:
        raise ValidationError(
            f"{row['qid']}: saliency_scores length {len(labels)} != "
            f"video clips {video.num_clips}"
        )
    return AnnotationRecord(
        qid=str(row["qid"]),
        vid=vid,
        text=read_feature_file(root / row["text_path"]),
        windows=windows,
        saliency_labels=labels,
        polarity=_polarity_from_manifest(row.get("polarity", "pos")),
    )


def write_manifest(path, rows: list[dict]) -> None:
    """Write manifest rows as JSON-lines (keys in insertion order)."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Re-check invariants across a loaded dataset and count its contents."""
    report = ValidationReport(videos=len(dataset.videos), queries=len(dataset.annotations))
    seen_qids: set[str] = set()
    for ann in dataset.annotations:
        if ann.qid in seen_qids:
            report.errors.append(f"duplicate qid {ann.qid!r}")
        seen_qids.add(ann.qid)
        if ann.vid not in dataset.videos:
            report.errors.append(f"{ann.qid}: unknown vid {ann.vid!r}")
            continue
        video = dataset.videos[ann.vid]
        if len(ann.saliency_labels) != video.num_clips:
            report.errors.append(
                f"{ann.qid}: label length {len(ann.saliency_labels)} != L={video.num_clips}"
            )
        if ann.polarity == POSITIVE:
            report.positives += 1
            if not ann.windows:
                report.errors.append(f"{ann.qid}: positive record with no windows")
        else:
            report.negatives += 1
    return report
