"""Jump segmentation from per-frame person detections.

Detections are linked into tracks by a constant-velocity Kalman filter with
IoU-based Hungarian matching. The jumping skater is the track whose vertical
bbox velocity changes the most, the apex is where that velocity crosses zero,
and the pose sequence is cropped so that the take-off frame lands on a fixed
index.

Image coordinates have y pointing down, so upward motion has negative
vertical velocity.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .ingest import JOINT_INDEX, DetectionRecord, PoseSequence, group_by_frame

DEFAULT_SMOOTHING_WINDOW = 9
# Half the smallest bbox-centre velocity swing (px/frame) among synthetic
# jumps (flight height 27 cm, 240 fps, 4 px/cm); see tests/test_tracker.py.
DEFAULT_V_CHANGE_MIN = 3.45


class NoJumpDetected(RuntimeError):
    pass


class NoApexFound(RuntimeError):
    pass


class InsufficientContext(ValueError):
    pass


@dataclass
class TrackerConfig:
    iou_min: float = 0.3
    max_age: int = 30
    min_hits: int = 3

    def __post_init__(self):
        if not 0.0 < self.iou_min < 1.0:
            raise ValueError("iou_min must lie in (0, 1)")


@dataclass
class CropConfig:
    """Crop geometry at capture fps.

    ``window_len`` frames are kept and the take-off frame, ``takeoff_offset``
    frames before the apex, is placed at index ``aligned_index``.
    """

    window_len: int = 204
    aligned_index: int = 100
    takeoff_offset: int = 60

    @classmethod
    def for_fps(cls, fps: float, takeoff_seconds: float = 0.25) -> "CropConfig":
        """51 frames with take-off at index 25 when expressed at 60 fps."""
        k = fps / 60.0
        return cls(
            window_len=int(round(51 * k)),
            aligned_index=int(round(25 * k)),
            takeoff_offset=int(round(takeoff_seconds * fps)),
        )


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)[:, None, :]
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)[None, :, :]
    w = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    h = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = w * h
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def associate(track_boxes, det_boxes, iou_min: float = 0.3):
    """Match predicted track boxes to detections.

    Maximizes total IoU with the Hungarian algorithm, then drops pairs with
    IoU below ``iou_min``. Returns ``(matches, unmatched_tracks,
    unmatched_detections)`` where ``matches`` is a list of
    ``(track_index, det_index)`` sorted by track index.
    """
    if not 0.0 < iou_min < 1.0:
        raise ValueError("iou_min must lie in (0, 1)")
    n_t, n_d = len(track_boxes), len(det_boxes)
    if n_t == 0 or n_d == 0:
        return [], list(range(n_t)), list(range(n_d))
    ious = iou_matrix(track_boxes, det_boxes)
    rows, cols = linear_sum_assignment(ious, maximize=True)
    matches = [(int(r), int(c)) for r, c in zip(rows, cols) if ious[r, c] >= iou_min]
    matched_t = {r for r, _ in matches}
    matched_d = {c for _, c in matches}
    return (
        sorted(matches),
        [t for t in range(n_t) if t not in matched_t],
        [d for d in range(n_d) if d not in matched_d],
    )


def bbox_to_z(bbox) -> np.ndarray:
    x1, y1, x2, y2 = bbox
    w, h = x2 - x1, y2 - y1
    return np.array([x1 + w / 2.0, y1 + h / 2.0, w * h, w / h])


def z_to_bbox(x) -> np.ndarray:
    s, r = max(x[2], 1e-12), max(x[3], 1e-12)
    w = math.sqrt(s * r)
    h = s / w
    return np.array([x[0] - w / 2.0, x[1] - h / 2.0, x[0] + w / 2.0, x[1] + h / 2.0])


# constant velocity on (cx, cy, scale), constant aspect
_F = np.eye(7)
_F[0, 4] = _F[1, 5] = _F[2, 6] = 1.0
_H = np.eye(4, 7)


@dataclass
class TrackState:
    """Kalman state ``[cx, cy, scale, aspect, vcx, vcy, vscale]`` of one track."""

    track_id: int
    state: np.ndarray
    covariance: np.ndarray
    age: int = 0
    hits: int = 1
    hit_streak: int = 1
    time_since_update: int = 0
    first_frame: int = 0
    history: dict[int, tuple[float, float, float, float]] = field(default_factory=dict)

    @classmethod
    def start(cls, track_id: int, det: DetectionRecord) -> "TrackState":
        x = np.zeros(7)
        x[:4] = bbox_to_z(det.bbox)
        P = np.eye(7) * 10.0
        P[4:, 4:] *= 1000.0  # unobserved velocities start very uncertain
        return cls(track_id, x, P, first_frame=det.frame_idx, history={det.frame_idx: tuple(det.bbox)})

    @property
    def bbox(self) -> np.ndarray:
        return z_to_bbox(self.state)

    def predict(self, Q: np.ndarray) -> np.ndarray:
        if self.state[2] + self.state[6] <= 0:
            self.state[6] = 0.0
        self.state = _F @ self.state
        self.covariance = _F @ self.covariance @ _F.T + Q
        self.age += 1
        if self.time_since_update > 0:
            self.hit_streak = 0
        self.time_since_update += 1
        return self.bbox

    def update(self, det: DetectionRecord, R: np.ndarray) -> None:
        z = bbox_to_z(det.bbox)
        S = _H @ self.covariance @ _H.T + R
        K = np.linalg.solve(S, _H @ self.covariance).T
        self.state = self.state + K @ (z - _H @ self.state)
        I_KH = np.eye(7) - K @ _H
        # Joseph form keeps the covariance symmetric PSD
        self.covariance = I_KH @ self.covariance @ I_KH.T + K @ R @ K.T
        self.time_since_update = 0
        self.hits += 1
        self.hit_streak += 1
        self.history[det.frame_idx] = tuple(det.bbox)

    def center_y(self) -> tuple[np.ndarray, np.ndarray]:
        """Frame indices and bbox-centre y from matched detections.

        Frames without a detection inside the track's span are filled by
        linear interpolation.
        """
        frames = np.array(sorted(self.history))
        cy = np.array([(self.history[f][1] + self.history[f][3]) / 2.0 for f in frames])
        full = np.arange(frames[0], frames[-1] + 1)
        return full, np.interp(full, frames, cy)


def _noise_matrices():
    Q = np.eye(7)
    Q[-1, -1] *= 0.01
    Q[4:, 4:] *= 0.01
    R = np.eye(4)
    R[2:, 2:] *= 10.0
    return Q, R


class Sort:
    """Frame-by-frame tracker; a sequential state machine for one video."""

    def __init__(self, config: Optional[TrackerConfig] = None):
        self.config = config or TrackerConfig()
        self.tracks: list[TrackState] = []
        self.finished: list[TrackState] = []
        self._next_id = 0
        self.frame_idx = -1
        self._Q, self._R = _noise_matrices()

    def step(self, detections: Sequence[DetectionRecord], frame_idx: Optional[int] = None) -> list[TrackState]:
        """Advance one frame and return the confirmed tracks matched in it."""
        self.frame_idx = self.frame_idx + 1 if frame_idx is None else frame_idx
        predicted = [t.predict(self._Q) for t in self.tracks]
        det_boxes = [d.bbox for d in detections]
        matches, _, unmatched_d = associate(predicted, det_boxes, self.config.iou_min)
        for ti, di in matches:
            self.tracks[ti].update(detections[di], self._R)
        for di in unmatched_d:
            self.tracks.append(TrackState.start(self._next_id, detections[di]))
            self._next_id += 1
        alive = []
        for t in self.tracks:
            if t.time_since_update > self.config.max_age:
                self._retire(t)
            else:
                alive.append(t)
        self.tracks = alive
        return [t for t in self.tracks if t.time_since_update == 0 and t.hit_streak >= self.config.min_hits]

    def _retire(self, track: TrackState) -> None:
        if track.hits >= self.config.min_hits:
            self.finished.append(track)

    def close(self) -> list[TrackState]:
        """Retire all live tracks; return every confirmed track by id."""
        for t in self.tracks:
            self._retire(t)
        self.tracks = []
        return sorted(self.finished, key=lambda t: t.track_id)


def step_tracker(tracker: Sort, frame_detections: Sequence[DetectionRecord], frame_idx: Optional[int] = None):
    return tracker.step(frame_detections, frame_idx)


def run_tracker(records: Iterable[DetectionRecord], config: Optional[TrackerConfig] = None) -> list[TrackState]:
    """Track a whole detection stream; frames with no detections still advance."""
    by_frame = group_by_frame(records)
    sort = Sort(config)
    if by_frame:
        for f in range(min(by_frame), max(by_frame) + 1):
            sort.step(by_frame.get(f, []), f)
    return sort.close()


def smoothed_velocity(y: np.ndarray, window: int = DEFAULT_SMOOTHING_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference velocity smoothed by a centred moving average.

    Only positions where both the difference and the full window are defined
    are returned: ``(index, velocity)`` with ``index`` into ``y``.
    """
    y = np.asarray(y, dtype=float)
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be a positive odd integer")
    if len(y) < window + 2:
        raise NoApexFound(f"track too short: {len(y)} frames for smoothing window {window}")
    v = (y[2:] - y[:-2]) / 2.0
    vs = np.convolve(v, np.ones(window) / window, mode="valid")
    idx = np.arange(len(vs)) + 1 + window // 2
    return idx, vs


def velocity_change(y: np.ndarray, window: int = DEFAULT_SMOOTHING_WINDOW) -> float:
    """Range of the smoothed vertical velocity over the series."""
    _, vs = smoothed_velocity(y, window)
    return float(vs.max() - vs.min())


def select_skater(
    tracks: Sequence[TrackState],
    v_change_min: float = DEFAULT_V_CHANGE_MIN,
    window: int = DEFAULT_SMOOTHING_WINDOW,
) -> int:
    """Id of the track with the largest vertical-velocity swing above threshold."""
    best, best_change = None, v_change_min
    for t in tracks:
        _, cy = t.center_y()
        if len(cy) < window + 2:
            continue
        change = velocity_change(cy, window)
        if change > best_change:
            best, best_change = t.track_id, change
    if best is None:
        raise NoJumpDetected("no jump detected")
    return best


def detect_apex(
    y: np.ndarray,
    window: int = DEFAULT_SMOOTHING_WINDOW,
    min_rise_speed: float = 0.0,
) -> int:
    """Index of the first upward-to-downward crossing of the smoothed velocity.

    ``y`` is a bbox-centre series in image coordinates (down is positive).
    The crossing is located to sub-frame precision by linear interpolation
    and rounded to the nearest frame (halves round up). With
    ``min_rise_speed > 0`` a crossing only counts once the smoothed velocity
    has been below ``-min_rise_speed``, which skips jitter during the glide.
    """
    idx, vs = smoothed_velocity(y, window)
    armed = min_rise_speed <= 0.0
    for i in range(len(vs) - 1):
        if not armed and vs[i] < -min_rise_speed:
            armed = True
        if armed and vs[i] < 0.0 <= vs[i + 1]:
            t = idx[i] + vs[i] / (vs[i] - vs[i + 1])
            return int(math.floor(t + 0.5))
    raise NoApexFound("no apex found")


def detect_track_apex(track: TrackState, window: int = DEFAULT_SMOOTHING_WINDOW, min_rise_speed: float = 0.0) -> int:
    """Apex as an absolute frame index of the video."""
    frames, cy = track.center_y()
    return int(frames[0]) + detect_apex(cy, window, min_rise_speed)


def detect_pose_apex(seq: PoseSequence, window: Optional[int] = None) -> int:
    """Apex from the hip height of a pose sequence (z up)."""
    if window is None:
        window = max(1, int(round(DEFAULT_SMOOTHING_WINDOW * seq.fps / 240.0)) | 1)
    return detect_apex(-seq.frames[:, JOINT_INDEX["hip"], 2], window)


@dataclass
class JumpWindow:
    track_id: Optional[int]
    apex_frame: int
    takeoff_frame: int
    start: int
    end: int
    aligned_index: int
    fps: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def crop_window(
    seq: PoseSequence, apex_frame: int, config: Optional[CropConfig] = None, track_id: Optional[int] = None
) -> tuple[PoseSequence, JumpWindow]:
    """Cut ``config.window_len`` frames with the take-off at ``aligned_index``."""
    config = config or CropConfig.for_fps(seq.fps)
    if not 0 <= apex_frame < seq.n_frames:
        raise InsufficientContext(f"apex frame {apex_frame} outside sequence of {seq.n_frames} frames")
    takeoff = apex_frame - config.takeoff_offset
    start = takeoff - config.aligned_index
    end = start + config.window_len - 1
    if start < 0 or end >= seq.n_frames:
        raise InsufficientContext(
            f"insufficient context around apex: window [{start}, {end}] exceeds [0, {seq.n_frames - 1}]"
        )
    window = JumpWindow(track_id, apex_frame, takeoff, start, end, config.aligned_index, seq.fps)
    return PoseSequence(seq.fps, seq.frames[start : end + 1].copy()), window


@dataclass
class SegmentResult:
    track_id: int
    apex_frame: int
    tracks: list[TrackState]


def segment_detections(
    records: Sequence[DetectionRecord],
    tracker_config: Optional[TrackerConfig] = None,
    v_change_min: float = DEFAULT_V_CHANGE_MIN,
    window: int = DEFAULT_SMOOTHING_WINDOW,
) -> SegmentResult:
    """Track, pick the jumper, and locate the apex frame of the jump."""
    tracks = run_tracker(records, tracker_config)
    track_id = select_skater(tracks, v_change_min, window)
    track = next(t for t in tracks if t.track_id == track_id)
    apex = detect_track_apex(track, window, min_rise_speed=v_change_min / 4.0)
    return SegmentResult(track_id, apex, tracks)
