"""Parsing, validation and serialization of the on-disk data model.

Four text formats are handled here:

* detection streams: one JSON object per line,
  ``{"frame_idx": 0, "bbox": [x1, y1, x2, y2], "confidence": 0.9}``
* pose files: ``#``-prefixed header lines (``fps``, ``joints``, optional
  ``up``) followed by ``T`` rows of 51 comma- or space-separated reals
* angle files: ``# fps: 60`` header followed by ``T`` rows of 3 reals (degrees)
* manifests: CSV with columns ``sample_id, skater_id, source, pose, angles,
  label``; relative paths resolve against the manifest's directory
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

JOINTS: tuple[str, ...] = (
    "hip",
    "r_hip",
    "r_knee",
    "r_foot",
    "l_hip",
    "l_knee",
    "l_foot",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
)
N_JOINTS = len(JOINTS)
JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}
ANGLE_AXES: tuple[str, ...] = ("roll", "pitch", "yaw")
SOURCES = ("camera", "imu")
MANIFEST_FIELDS = ("sample_id", "skater_id", "source", "pose", "angles", "label")

DEFAULT_MAX_GAP = 5

# Per-skater (edge error, correct edge) counts of the published Lutz dataset.
REFERENCE_SKATER_COUNTS: dict[str, tuple[int, int]] = {
    "A": (29, 0),
    "B": (19, 18),
    "C": (22, 14),
    "D": (12, 38),
    "E": (30, 0),
    "F": (20, 30),
}
# Published (error, correct) totals; they disagree with the per-skater sums above.
REFERENCE_CLAIMED_TOTALS = (100, 132)

PathLike = Union[str, Path]


class IngestError(ValueError):
    """Base class for data errors raised while reading inputs."""


class ParseError(IngestError):
    pass


class SchemaError(IngestError):
    pass


class ValidationError(IngestError):
    pass


class ManifestError(IngestError):
    pass


class LoadError(IngestError):
    pass


class SampleRejected(IngestError):
    """Raised by :func:`validate_sample` when a sample must be excluded."""

    def __init__(self, sample_id: str, reason: str):
        super().__init__(f"{sample_id}: {reason}")
        self.sample_id = sample_id
        self.reason = reason


@dataclass(frozen=True)
class DetectionRecord:
    frame_idx: int
    bbox: tuple[float, float, float, float]
    confidence: float = 1.0

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if self.frame_idx < 0:
            raise ValidationError("frame_idx must be non-negative")
        if not x1 < x2:
            raise ValidationError("x1 < x2 violated")
        if not y1 < y2:
            raise ValidationError("y1 < y2 violated")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("confidence outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {"frame_idx": self.frame_idx, "bbox": list(self.bbox), "confidence": self.confidence}
        )


@dataclass(eq=False)
class PoseSequence:
    """``T x 17 x 3`` joint coordinates (z up) sampled at ``fps``."""

    fps: float
    frames: np.ndarray
    joints: tuple[str, ...] = JOINTS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        if self.frames.ndim != 3 or self.frames.shape[1:] != (N_JOINTS, 3):
            raise SchemaError(f"expected T x {N_JOINTS} x 3 frames, got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise SchemaError("pose sequence has no frames")
        if tuple(self.joints) != JOINTS:
            raise SchemaError(f"unsupported joint ordering {self.joints}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def joint(self, name: str) -> np.ndarray:
        return self.frames[:, JOINT_INDEX[name], :]

    def __eq__(self, other):
        if not isinstance(other, PoseSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.frames, other.frames, equal_nan=True)


@dataclass(eq=False)
class SkateAngleSequence:
    """Left-skate Euler angles in degrees; positive roll is an inside-edge lean."""

    fps: float
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        if self.frames.ndim != 2 or self.frames.shape[1] != 3:
            raise SchemaError(f"expected T x 3 angles, got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise SchemaError("angle sequence has no frames")
        finite = self.frames[np.isfinite(self.frames)]
        if np.any(np.abs(finite) >= 180.0):
            raise ValidationError("angle magnitude must be below 180 degrees")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def __eq__(self, other):
        if not isinstance(other, SkateAngleSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.frames, other.frames, equal_nan=True)


@dataclass(eq=False)
class JumpSample:
    sample_id: str
    skater_id: str
    source: str
    pose: PoseSequence
    label: int
    angles: Optional[SkateAngleSequence] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"{self.sample_id}: unknown source {self.source!r}")
        if self.label not in (0, 1):
            raise ValidationError(f"{self.sample_id}: label must be 0 or 1, got {self.label!r}")
        self.label = int(self.label)
        if self.angles is not None:
            if self.source == "camera":
                raise ValidationError(f"{self.sample_id}: camera samples carry no skate angles")
            tol = max(1.0 / self.pose.fps, 1.0 / self.angles.fps)
            if abs(self.pose.duration - self.angles.duration) > tol + 1e-12:
                raise ValidationError(
                    f"{self.sample_id}: angle duration {self.angles.duration:.4f}s does not match "
                    f"pose duration {self.pose.duration:.4f}s"
                )

    def __eq__(self, other):
        if not isinstance(other, JumpSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.skater_id == other.skater_id
            and self.source == other.source
            and self.label == other.label
            and self.pose == other.pose
            and self.angles == other.angles
        )


@dataclass
class Dataset:
    samples: list[JumpSample]
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        dupes = sorted(k for k, v in Counter(ids).items() if v > 1)
        if dupes:
            raise ManifestError(f"duplicate sample_id: {', '.join(dupes)}")

    @property
    def class_counts(self) -> tuple[int, int]:
        """``(n_error, n_correct)``."""
        n_error = sum(s.label for s in self.samples)
        return n_error, len(self.samples) - n_error

    @property
    def skater_index(self) -> dict[str, list[str]]:
        index: dict[str, list[str]] = {}
        for s in self.samples:
            index.setdefault(s.skater_id, []).append(s.sample_id)
        return index

    @property
    def skaters(self) -> list[str]:
        return sorted(self.skater_index)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, sample_id: str) -> JumpSample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)

    def subset(self, source: Optional[str] = None, skater_id: Optional[str] = None) -> "Dataset":
        keep = [
            s
            for s in self.samples
            if (source is None or s.source == source) and (skater_id is None or s.skater_id == skater_id)
        ]
        return Dataset(keep)

    def per_skater_counts(self) -> dict[str, tuple[int, int]]:
        out = {}
        for skater in self.skaters:
            labels = [s.label for s in self.samples if s.skater_id == skater]
            out[skater] = (sum(labels), len(labels) - sum(labels))
        return out


# ---------------------------------------------------------------------------
# detections


def _lines(stream) -> Iterable[str]:
    """Lines from a ``Path``, from ``str`` contents, or from any line iterable."""
    if isinstance(stream, Path):
        with open(stream, "r", encoding="utf-8") as fh:
            yield from fh
    elif isinstance(stream, str):
        yield from io.StringIO(stream)
    else:
        yield from stream


def parse_detections(stream) -> list[DetectionRecord]:
    """Parse a line-delimited JSON detection stream.

    ``stream`` may be a ``Path``, an open text file, an iterable of lines, or
    a string holding the file contents. Blank lines are skipped. Records are
    returned sorted by frame index (stable for equal frames).
    """
    records = []
    for lineno, line in enumerate(_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            frame_idx = obj["frame_idx"]
            bbox = obj["bbox"]
            confidence = obj.get("confidence", 1.0)
            if isinstance(frame_idx, bool) or not isinstance(frame_idx, int):
                raise TypeError("frame_idx must be an integer")
            if len(bbox) != 4:
                raise TypeError("bbox must have 4 values")
            bbox = tuple(float(v) for v in bbox)
            confidence = float(confidence)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"malformed detection at line {lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in bbox):
            raise ValidationError(f"non-finite bbox at line {lineno}")
        try:
            records.append(DetectionRecord(frame_idx, bbox, confidence))
        except ValidationError as exc:
            raise ValidationError(f"{exc} at line {lineno}") from None
    records.sort(key=lambda r: r.frame_idx)
    return records


def write_detections(records: Iterable[DetectionRecord], fh: IO[str]) -> None:
    for r in records:
        fh.write(r.to_json() + "\n")


def group_by_frame(records: Iterable[DetectionRecord]) -> dict[int, list[DetectionRecord]]:
    frames: dict[int, list[DetectionRecord]] = {}
    for r in records:
        frames.setdefault(r.frame_idx, []).append(r)
    return frames


# ---------------------------------------------------------------------------
# pose / angle matrices


def _read_header_and_rows(stream) -> tuple[dict[str, str], list[tuple[int, str]]]:
    header: dict[str, str] = {}
    rows: list[tuple[int, str]] = []
    for lineno, line in enumerate(_lines(stream), start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            key, sep, value = text[1:].partition(":")
            if not sep:
                raise ParseError(f"malformed header at line {lineno}: {text!r}")
            header[key.strip().lower()] = value.strip()
        else:
            rows.append((lineno, text))
    return header, rows


def _parse_rows(rows: list[tuple[int, str]], width: int) -> np.ndarray:
    out = np.empty((len(rows), width))
    for i, (lineno, text) in enumerate(rows):
        tokens = text.replace(",", " ").split()
        if len(tokens) != width:
            raise SchemaError(f"line {lineno}: expected {width} values, got {len(tokens)}")
        try:
            out[i] = [float(t) for t in tokens]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return out


def _parse_fps(header: dict[str, str]) -> float:
    if "fps" not in header:
        raise SchemaError("header is missing 'fps'")
    try:
        return float(header["fps"])
    except ValueError:
        raise ParseError(f"bad fps value {header['fps']!r}") from None


def _to_z_up(frames: np.ndarray, up: str) -> np.ndarray:
    if up == "z":
        return frames
    if up == "y":
        # right-handed y-up -> z-up: (x, y, z) -> (x, -z, y)
        return np.stack([frames[..., 0], -frames[..., 2], frames[..., 1]], axis=-1)
    raise SchemaError(f"unsupported up axis {up!r}")


def parse_pose_sequence(stream, allow_missing: bool = False) -> PoseSequence:
    """Read a pose file into a z-up :class:`PoseSequence`.

    With ``allow_missing`` set, ``nan`` entries are kept for
    :func:`validate_sample` to interpolate; infinities are always rejected.
    """
    header, rows = _read_header_and_rows(stream)
    fps = _parse_fps(header)
    if "joints" in header:
        names = tuple(n.strip() for n in header["joints"].split(","))
        if len(names) != N_JOINTS:
            raise SchemaError(f"expected {N_JOINTS} joints in header, got {len(names)}")
        if names != JOINTS:
            raise SchemaError(f"unsupported joint ordering {names}")
    if not rows:
        raise SchemaError("pose file has no frames")
    flat = _parse_rows(rows, N_JOINTS * 3)
    frames = flat.reshape(-1, N_JOINTS, 3)
    bad = ~np.isfinite(frames)
    if allow_missing:
        bad &= ~np.isnan(frames)
    if bad.any():
        t, j, _ = np.argwhere(bad)[0]
        raise ValidationError(f"non-finite value at frame {t}, joint {JOINTS[j]}")
    frames = _to_z_up(frames, header.get("up", "z").lower())
    return PoseSequence(fps, frames)


def parse_angle_sequence(stream, allow_missing: bool = False) -> SkateAngleSequence:
    header, rows = _read_header_and_rows(stream)
    fps = _parse_fps(header)
    if not rows:
        raise SchemaError("angle file has no frames")
    frames = _parse_rows(rows, 3)
    bad = ~np.isfinite(frames)
    if allow_missing:
        bad &= ~np.isnan(frames)
    if bad.any():
        t, a = np.argwhere(bad)[0]
        raise ValidationError(f"non-finite value at frame {t}, axis {ANGLE_AXES[a]}")
    return SkateAngleSequence(fps, frames)


def _format_fps(fps: float) -> str:
    return str(int(fps)) if float(fps).is_integer() else repr(float(fps))


def write_pose_sequence(seq: PoseSequence, fh: IO[str]) -> None:
    """Write ``seq`` so that :func:`parse_pose_sequence` restores it bit-for-bit."""
    fh.write(f"# fps: {_format_fps(seq.fps)}\n")
    fh.write(f"# joints: {','.join(JOINTS)}\n")
    np.savetxt(fh, seq.frames.reshape(seq.n_frames, -1), fmt="%.17g", delimiter=",")


def write_angle_sequence(seq: SkateAngleSequence, fh: IO[str]) -> None:
    fh.write(f"# fps: {_format_fps(seq.fps)}\n")
    fh.write(f"# axes: {','.join(ANGLE_AXES)}\n")
    np.savetxt(fh, seq.frames, fmt="%.17g", delimiter=",")


def atomic_write(path: Path, text: str) -> None:
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_pose_sequence(seq: PoseSequence) -> str:
    buf = io.StringIO()
    write_pose_sequence(seq, buf)
    return buf.getvalue()


def dumps_angle_sequence(seq: SkateAngleSequence) -> str:
    buf = io.StringIO()
    write_angle_sequence(seq, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# validation


def _missing_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``[start, stop)`` runs of True in a 1-D boolean mask."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def _fill_gaps(values: np.ndarray, missing: np.ndarray, max_gap: int, what: str, sample_id: str) -> np.ndarray:
    """Linearly interpolate interior runs of ``missing`` rows of a ``T x D`` array."""
    out = values.copy()
    n = len(values)
    for start, stop in _missing_runs(missing):
        length = stop - start
        if start == 0 or stop == n:
            raise SampleRejected(sample_id, f"{what}: gap of {length} frames at sequence boundary")
        if length > max_gap:
            raise SampleRejected(sample_id, f"occlusion gap {length} > {max_gap} ({what})")
        left, right = out[start - 1], out[stop]
        w = (np.arange(1, length + 1) / (length + 1))[:, None]
        out[start:stop] = left + w * (right - left)
    return out


def validate_sample(sample: JumpSample, max_gap: int = DEFAULT_MAX_GAP) -> JumpSample:
    """Interpolate short non-finite runs; reject long or boundary gaps.

    A joint is missing in a frame when any of its coordinates is non-finite.
    Returns a new sample (or ``sample`` itself when nothing was missing).
    """
    frames = sample.pose.frames
    missing = ~np.isfinite(frames).all(axis=2)
    new_pose = sample.pose
    if missing.any():
        filled = frames.copy()
        for j in np.flatnonzero(missing.any(axis=0)):
            filled[:, j, :] = _fill_gaps(frames[:, j, :], missing[:, j], max_gap, JOINTS[j], sample.sample_id)
        new_pose = PoseSequence(sample.pose.fps, filled)
    new_angles = sample.angles
    if sample.angles is not None:
        amissing = ~np.isfinite(sample.angles.frames).all(axis=1)
        if amissing.any():
            filled = _fill_gaps(sample.angles.frames, amissing, max_gap, "skate angles", sample.sample_id)
            new_angles = SkateAngleSequence(sample.angles.fps, filled)
    if new_pose is sample.pose and new_angles is sample.angles:
        return sample
    return replace(sample, pose=new_pose, angles=new_angles)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    skater_id: str
    source: str
    pose: str
    angles: Optional[str]
    label: int


def read_manifest(path: PathLike) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_FIELDS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        entries = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            sid = row["sample_id"].strip()
            if sid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate sample_id {sid!r}")
            seen.add(sid)
            try:
                label = int(row["label"])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad label {row['label']!r}") from None
            entries.append(
                ManifestEntry(
                    sid,
                    row["skater_id"].strip(),
                    row["source"].strip(),
                    row["pose"].strip(),
                    row["angles"].strip() or None,
                    label,
                )
            )
    return entries


def write_manifest(entries: Iterable[ManifestEntry], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for e in entries:
        writer.writerow([e.sample_id, e.skater_id, e.source, e.pose, e.angles or "", e.label])


def load_dataset(manifest_path: PathLike, max_gap: int = DEFAULT_MAX_GAP) -> Dataset:
    """Load, validate and gap-fill every sample listed in a manifest.

    Samples rejected by :func:`validate_sample` are left out of
    ``Dataset.samples`` and listed in ``Dataset.rejected``.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples, rejected = [], []
    for entry in read_manifest(manifest_path):
        pose_path = root / entry.pose
        if not pose_path.is_file():
            raise LoadError(f"{entry.sample_id}: pose file not found: {pose_path}")
        try:
            pose = parse_pose_sequence(pose_path, allow_missing=True)
            angles = None
            if entry.angles:
                angle_path = root / entry.angles
                if not angle_path.is_file():
                    raise LoadError(f"{entry.sample_id}: angle file not found: {angle_path}")
                angles = parse_angle_sequence(angle_path, allow_missing=True)
            sample = JumpSample(entry.sample_id, entry.skater_id, entry.source, pose, entry.label, angles)
        except LoadError:
            raise
        except IngestError as exc:
            raise type(exc)(f"{entry.sample_id}: {exc}") from exc
        try:
            samples.append(validate_sample(sample, max_gap))
        except SampleRejected as exc:
            logger.warning("rejected %s", exc)
            rejected.append((exc.sample_id, exc.reason))
    return Dataset(samples, rejected)
