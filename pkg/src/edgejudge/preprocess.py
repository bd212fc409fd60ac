"""Pose normalization, frame-rate decimation and feature assembly."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import IO, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .ingest import ANGLE_AXES, JOINT_INDEX, JOINTS, JumpSample, PoseSequence, SkateAngleSequence


class SourceUnavailable(ValueError):
    pass


class FeatureConfig(enum.Enum):
    """The ten input-feature recipes.

    Each value is ``(cli_name, pose_source, pose_fps, angle_fps)``; a ``None``
    fps means that part is absent.
    """

    CamPos12 = ("cam-pos-12", "camera", 12, None)
    CamPos60 = ("cam-pos-60", "camera", 60, None)
    ImuPos12 = ("imu-pos-12", "imu", 12, None)
    ImuPos60 = ("imu-pos-60", "imu", 60, None)
    ImuAng12 = ("imu-ang-12", "imu", None, 12)
    ImuAng60 = ("imu-ang-60", "imu", None, 60)
    ImuPos12Ang12 = ("imu-pos12-ang12", "imu", 12, 12)
    ImuPos12Ang60 = ("imu-pos12-ang60", "imu", 12, 60)
    ImuPos60Ang12 = ("imu-pos60-ang12", "imu", 60, 12)
    ImuPos60Ang60 = ("imu-pos60-ang60", "imu", 60, 60)

    @property
    def cli_name(self) -> str:
        return self.value[0]

    @property
    def source(self) -> str:
        return self.value[1]

    @property
    def pose_fps(self) -> Optional[int]:
        return self.value[2]

    @property
    def angle_fps(self) -> Optional[int]:
        return self.value[3]

    @property
    def title(self) -> str:
        device = "camera" if self.source == "camera" else "IMU"
        parts = []
        if self.pose_fps:
            parts.append(f"Joint pos. {self.pose_fps}fps")
        if self.angle_fps:
            parts.append(f"Lfoot ang. {self.angle_fps}fps")
        return f"{' + '.join(parts)} ({device})"

    @classmethod
    def parse(cls, name: str) -> "FeatureConfig":
        for cfg in cls:
            if name in (cfg.cli_name, cfg.name):
                return cfg
        raise ValueError(f"unknown feature config {name!r}; choose from {[c.cli_name for c in cls]}")


@dataclass(frozen=True)
class FeatureLayout:
    """Ordered ``(part, frame, group, axis)`` description of a feature vector."""

    config: FeatureConfig
    entries: tuple[tuple[str, int, str, str], ...]

    def __len__(self):
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [f"{part}:f{frame}:{group}:{axis}" for part, frame, group, axis in self.entries]

    @property
    def groups(self) -> list[str]:
        """Importance groups in layout order: joints, then ``angle:<axis>``."""
        seen: dict[str, None] = {}
        for part, _, group, axis in self.entries:
            seen.setdefault(group if part == "pose" else f"angle:{axis}", None)
        return list(seen)

    def group_of(self) -> np.ndarray:
        """Group name of every entry, aligned with the feature vector."""
        return np.array([g if p == "pose" else f"angle:{a}" for p, _, g, a in self.entries])

    def frame_of(self) -> np.ndarray:
        return np.array([f for _, f, _, _ in self.entries])


@dataclass(frozen=True)
class FeatureVector:
    config: FeatureConfig
    values: np.ndarray
    layout: FeatureLayout

    def __len__(self):
        return len(self.values)


def normalize_pose(seq: PoseSequence, per_frame_z: bool = False) -> PoseSequence:
    """Hip-centre x-y in every frame and put the lower foot on z = 0.

    The z offset is the minimum over the whole sequence of the lower foot,
    so flight height survives. ``per_frame_z`` zeroes the lower foot in each
    frame instead.
    """
    frames = seq.frames.copy()
    hip_xy = frames[:, JOINT_INDEX["hip"], :2]
    frames[:, :, :2] -= hip_xy[:, None, :]
    feet_z = np.minimum(frames[:, JOINT_INDEX["l_foot"], 2], frames[:, JOINT_INDEX["r_foot"], 2])
    if per_frame_z:
        frames[:, :, 2] -= feet_z[:, None]
    else:
        frames[:, :, 2] -= feet_z.min()
    return PoseSequence(seq.fps, frames)


def _stride(fps: float, target_fps: float) -> int:
    ratio = fps / target_fps
    k = int(round(ratio))
    if target_fps <= 0 or k < 1 or abs(ratio - k) > 1e-9:
        raise ValueError(f"cannot decimate {fps} fps to {target_fps} fps: rates are not divisible")
    return k


def downsample(seq, target_fps: float):
    """Keep frames ``0, k, 2k, ...`` with ``k = fps / target_fps``.

    Works on :class:`PoseSequence` and :class:`SkateAngleSequence`.
    """
    k = _stride(seq.fps, target_fps)
    if k == 1:
        return seq
    return type(seq)(float(target_fps), seq.frames[::k])


def feature_layout(config: FeatureConfig, n_pose_frames: int = 0, n_angle_frames: int = 0) -> FeatureLayout:
    entries = []
    if config.pose_fps:
        entries += [("pose", t, j, ax) for t in range(n_pose_frames) for j in JOINTS for ax in "xyz"]
    if config.angle_fps:
        entries += [("angle", t, "l_skate", ax) for t in range(n_angle_frames) for ax in ANGLE_AXES]
    return FeatureLayout(config, tuple(entries))


def build_features(sample: JumpSample, config: FeatureConfig, per_frame_z: bool = False) -> FeatureVector:
    if sample.source != config.source:
        raise SourceUnavailable(
            f"source unavailable: {config.cli_name} needs {config.source} data, {sample.sample_id} is {sample.source}"
        )
    if config.angle_fps and sample.angles is None:
        raise SourceUnavailable(f"source unavailable: {sample.sample_id} has no skate angles")
    parts = []
    n_pose = n_ang = 0
    if config.pose_fps:
        pose = downsample(normalize_pose(sample.pose, per_frame_z), config.pose_fps)
        n_pose = pose.n_frames
        parts.append(pose.frames.reshape(-1))
    if config.angle_fps:
        angles: SkateAngleSequence = downsample(sample.angles, config.angle_fps)
        n_ang = angles.n_frames
        parts.append(angles.frames.reshape(-1))
    return FeatureVector(config, np.concatenate(parts), feature_layout(config, n_pose, n_ang))


def feature_matrix(
    samples: Sequence[JumpSample], config: FeatureConfig, per_frame_z: bool = False
) -> tuple[np.ndarray, FeatureLayout]:
    """Stack feature vectors; every sample must produce the same layout."""
    vectors = [build_features(s, config, per_frame_z) for s in samples]
    if not vectors:
        raise ValueError("no samples to featurize")
    layout = vectors[0].layout
    for s, v in zip(samples, vectors):
        if v.layout != layout:
            raise ValueError(f"{s.sample_id}: feature layout differs ({len(v)} vs {len(layout)} values)")
    return np.vstack([v.values for v in vectors]), layout


def write_feature_csv(
    fh: IO[str], samples: Sequence[JumpSample], config: FeatureConfig, per_frame_z: bool = False
) -> None:
    X, layout = feature_matrix(samples, config, per_frame_z)
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["sample_id", "skater_id", "label", *layout.names])
    for s, row in zip(samples, X):
        writer.writerow([s.sample_id, s.skater_id, s.label, *(repr(float(v)) for v in row)])


class PoseNormalizer(BaseEstimator, TransformerMixin):
    """Stateless transformer over lists of :class:`PoseSequence`."""

    def __init__(self, per_frame_z=False):
        self.per_frame_z = per_frame_z

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [normalize_pose(seq, self.per_frame_z) for seq in X]


class FeatureBuilder(BaseEstimator, TransformerMixin):
    """Turn a list of :class:`JumpSample` into a feature matrix.

    Sits at the head of a pipeline, e.g.
    ``make_pipeline(FeatureBuilder("cam-pos-12"), EdgeLogisticRegression())``.
    The layout seen in ``fit`` is enforced in ``transform``.
    """

    def __init__(self, config="cam-pos-12", per_frame_z=False):
        self.config = config
        self.per_frame_z = per_frame_z

    def _config(self) -> FeatureConfig:
        return self.config if isinstance(self.config, FeatureConfig) else FeatureConfig.parse(self.config)

    def fit(self, X, y=None):
        _, self.layout_ = feature_matrix(X, self._config(), self.per_frame_z)
        self.n_features_out_ = len(self.layout_)
        return self

    def transform(self, X):
        matrix, layout = feature_matrix(X, self._config(), self.per_frame_z)
        if hasattr(self, "layout_") and layout != self.layout_:
            raise ValueError(f"layout mismatch: fitted on {len(self.layout_)} features, got {len(layout)}")
        return matrix

    def get_feature_names_out(self, input_features=None):
        return np.asarray(self.layout_.names, dtype=object)
