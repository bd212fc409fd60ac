"""Closed-form synthetic Lutz jumps.

Units are centimetres and seconds. The rig is a rigid stick figure in a
skater frame with x lateral (the skater's left at -x), y along the travel
direction and z up. During take-off the left shank (knee to foot, length
``foot_length``) is rolled about the travel axis by the edge-lean angle, so
an inside-edge lean (positive) pushes the left foot away from the hip and an
outside-edge lean (negative) pulls it in. Nothing else depends on the label.

The hip follows a ballistic arc whose apex sits at ``apex_time`` seconds;
flight lasts ``2 * sqrt(2 h / g)``, which is 0.5 s for the default height.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .ingest import (
    JOINT_INDEX,
    N_JOINTS,
    Dataset,
    DetectionRecord,
    JumpSample,
    ManifestEntry,
    PoseSequence,
    SkateAngleSequence,
    atomic_write,
    dumps_angle_sequence,
    dumps_pose_sequence,
    write_manifest,
)
from .tracker import CropConfig, crop_window

GRAVITY = 960.0  # cm/s^2; 30 cm of flight height then takes 0.5 s
LEAN_PLATEAU = 0.30  # s of full lean before take-off
LEAN_RAMP = 0.15  # s to roll into the lean, and to roll out after take-off


@dataclass(frozen=True)
class SkaterStyle:
    limb_scale: float = 1.0
    foot_length: float = 45.0
    hip_width: float = 10.0
    flight_height: float = 30.0
    approach_speed: float = 300.0
    curvature: float = 0.0  # lateral drift, cm/s^2
    roll_bias: float = 0.0  # IMU roll offset, degrees

    @property
    def flight_time(self) -> float:
        return 2.0 * math.sqrt(2.0 * self.flight_height / GRAVITY)

    @property
    def launch_speed(self) -> float:
        return GRAVITY * self.flight_time / 2.0


@dataclass
class SynthConfig:
    n_skaters: int = 6
    jumps_per_skater: int = 40
    error_fraction: Union[float, Sequence[float]] = 0.5
    lean_error_deg: float = 15.0
    lean_correct_deg: float = -5.0
    approach_speed: float = 300.0
    flight_height: float = 30.0
    foot_length: float = 45.0
    noise_sigma: float = 1.0
    angle_noise_deg: float = 2.0
    style_spread: float = 0.1
    fps: int = 240
    imu_fps: int = 60
    sources: tuple[str, ...] = ("camera", "imu")
    duration: float = 2.0
    apex_time: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.lean_error_deg > 0 > self.lean_correct_deg:
            raise ValueError("need lean_error_deg > 0 > lean_correct_deg")
        if self.fps not in (240, 60) or self.imu_fps not in (240, 60):
            raise ValueError("fps must be 240 or 60")
        if self.noise_sigma < 0 or self.angle_noise_deg < 0:
            raise ValueError("noise must be non-negative")
        fractions = self.error_fractions()
        if len(fractions) != self.n_skaters or any(not 0.0 <= f <= 1.0 for f in fractions):
            raise ValueError("error_fraction must be in [0, 1], one value or one per skater")
        self.sources = tuple(self.sources)
        if not set(self.sources) <= {"camera", "imu"} or not self.sources:
            raise ValueError(f"bad sources {self.sources}")

    def error_fractions(self) -> list[float]:
        if isinstance(self.error_fraction, (int, float)):
            return [float(self.error_fraction)] * self.n_skaters
        return [float(f) for f in self.error_fraction]

    def lean_for(self, label: int) -> float:
        return self.lean_error_deg if label == 1 else self.lean_correct_deg


def skater_name(i: int) -> str:
    return chr(ord("A") + i) if i < 26 else f"S{i:02d}"


def skater_styles(config: SynthConfig) -> list[SkaterStyle]:
    """Per-skater rig and motion offsets, drawn once from ``config.seed``."""
    styles = []
    s = config.style_spread
    for i in range(config.n_skaters):
        rng = np.random.default_rng([config.seed, i, 7919])
        u = rng.uniform(-1.0, 1.0, size=6)
        styles.append(
            SkaterStyle(
                limb_scale=1.0 + s * u[0],
                foot_length=config.foot_length * (1.0 + s * u[1]),
                hip_width=10.0 * (1.0 + s * u[2]),
                flight_height=config.flight_height * (1.0 + s * u[3]),
                approach_speed=config.approach_speed * (1.0 + s * u[4]),
                curvature=60.0 * u[5],
            )
        )
    return styles


def lean_profile(t: np.ndarray, takeoff: float, lean_deg: float) -> np.ndarray:
    """Edge lean in degrees: cosine ramp in, plateau up to take-off, ramp out."""
    start = takeoff - LEAN_PLATEAU - LEAN_RAMP
    prof = np.zeros_like(t)
    ramp_in = (t >= start) & (t < takeoff - LEAN_PLATEAU)
    prof[ramp_in] = 0.5 - 0.5 * np.cos(np.pi * (t[ramp_in] - start) / LEAN_RAMP)
    prof[(t >= takeoff - LEAN_PLATEAU) & (t <= takeoff)] = 1.0
    ramp_out = (t > takeoff) & (t < takeoff + LEAN_RAMP)
    prof[ramp_out] = 0.5 + 0.5 * np.cos(np.pi * (t[ramp_out] - takeoff) / LEAN_RAMP)
    return lean_deg * prof


def rig_offsets(style: SkaterStyle) -> np.ndarray:
    """Hip-relative joint positions for an upright pose with zero lean."""
    k = style.limb_scale
    hw, thigh = style.hip_width, 45.0 * k
    off = np.zeros((N_JOINTS, 3))

    def put(name, x, z):
        off[JOINT_INDEX[name]] = (x, 0.0, z)

    put("r_hip", hw, 0.0)
    put("r_knee", hw, -thigh)
    put("r_foot", hw, -thigh - style.foot_length)
    put("l_hip", -hw, 0.0)
    put("l_knee", -hw, -thigh)
    put("l_foot", -hw, -thigh - style.foot_length)
    put("spine", 0.0, 20.0 * k)
    put("thorax", 0.0, 45.0 * k)
    put("neck", 0.0, 55.0 * k)
    put("head", 0.0, 68.0 * k)
    put("l_shoulder", -18.0 * k, 45.0 * k)
    put("l_elbow", -20.0 * k, 20.0 * k)
    put("l_wrist", -22.0 * k, -2.0 * k)
    put("r_shoulder", 18.0 * k, 45.0 * k)
    put("r_elbow", 20.0 * k, 20.0 * k)
    put("r_wrist", 22.0 * k, -2.0 * k)
    return off


def hip_height(style: SkaterStyle) -> float:
    return 45.0 * style.limb_scale + style.foot_length


def jump_kinematics(style: SkaterStyle, lean_deg: float, config: SynthConfig, fps: float, arm_phase: float = 0.0):
    """Noise-free ``(frames, angles, times)`` for one jump at ``fps``."""
    n = int(round(config.duration * fps))
    t = np.arange(n) / fps
    apex = config.apex_time
    half = style.flight_time / 2.0
    takeoff = apex - half
    tau = t - takeoff
    in_air = (tau > 0) & (tau < style.flight_time)
    rise = np.where(in_air, style.launch_speed * tau - 0.5 * GRAVITY * tau**2, 0.0)

    hip = np.stack(
        [
            0.5 * style.curvature * (t - apex) ** 2,
            style.approach_speed * (t - apex),
            hip_height(style) + rise,
        ],
        axis=1,
    )
    frames = hip[:, None, :] + rig_offsets(style)[None, :, :]

    lean = lean_profile(t, takeoff, lean_deg)
    rad = np.radians(lean)
    knee = frames[:, JOINT_INDEX["l_knee"], :]
    # roll about the travel axis; positive lean swings the foot outward (-x)
    frames[:, JOINT_INDEX["l_foot"], 0] = knee[:, 0] - style.foot_length * np.sin(rad)
    frames[:, JOINT_INDEX["l_foot"], 2] = knee[:, 2] - style.foot_length * np.cos(rad)

    # label-independent arm swing
    swing = 8.0 * style.limb_scale * np.sin(2 * np.pi * 1.5 * t + arm_phase)
    for j in ("l_elbow", "l_wrist"):
        frames[:, JOINT_INDEX[j], 1] += swing
    for j in ("r_elbow", "r_wrist"):
        frames[:, JOINT_INDEX[j], 1] -= swing

    toe_pick = 25.0 * np.exp(-0.5 * ((t - takeoff) / 0.06) ** 2)
    heading = np.degrees(np.arctan2(style.curvature * (t - apex), style.approach_speed))
    angles = np.stack([lean + style.roll_bias, toe_pick, heading], axis=1)
    return frames, angles, t


def generate_jump(
    style: SkaterStyle,
    label: int,
    config: SynthConfig,
    rng: np.random.Generator,
    source: str = "camera",
    sample_id: str = "synthetic",
    skater_id: str = "A",
) -> JumpSample:
    """One full-length jump (approach, flight, landing) with additive noise.

    Camera samples are produced at ``config.fps`` without angles; IMU samples
    at ``config.imu_fps`` with skate angles whose roll is the lean profile.
    """
    fps = config.fps if source == "camera" else config.imu_fps
    lean = config.lean_for(label)
    arm_phase = rng.uniform(0.0, 2 * np.pi)
    frames, angles, _ = jump_kinematics(style, lean, config, fps, arm_phase)
    if config.noise_sigma > 0:
        frames = frames + rng.normal(0.0, config.noise_sigma, size=frames.shape)
    pose = PoseSequence(float(fps), frames)
    if source == "camera":
        return JumpSample(sample_id, skater_id, "camera", pose, label)
    if config.angle_noise_deg > 0:
        angles = angles + rng.normal(0.0, config.angle_noise_deg, size=angles.shape)
    return JumpSample(sample_id, skater_id, "imu", pose, label, SkateAngleSequence(float(fps), angles))


def apex_frame(config: SynthConfig, fps: float) -> int:
    return int(round(config.apex_time * fps))


def crop_sample(sample: JumpSample, config: SynthConfig) -> JumpSample:
    """Crop a full-length synthetic jump around its known apex."""
    fps = sample.pose.fps
    crop = CropConfig.for_fps(fps)
    pose, win = crop_window(sample.pose, apex_frame(config, fps), crop)
    angles = None
    if sample.angles is not None:
        angles = SkateAngleSequence(sample.angles.fps, sample.angles.frames[win.start : win.end + 1])
    return JumpSample(sample.sample_id, sample.skater_id, sample.source, pose, sample.label, angles)


def skater_labels(config: SynthConfig, skater: int) -> list[int]:
    n = config.jumps_per_skater
    n_err = int(round(config.error_fractions()[skater] * n))
    labels = np.array([1] * n_err + [0] * (n - n_err))
    np.random.default_rng([config.seed, skater, 104729]).shuffle(labels)
    return labels.tolist()


def generate_samples(config: SynthConfig, cropped: bool = True) -> list[JumpSample]:
    samples = []
    styles = skater_styles(config)
    for i, style in enumerate(styles):
        name = skater_name(i)
        for j, label in enumerate(skater_labels(config, i)):
            for k, source in enumerate(("camera", "imu")):
                if source not in config.sources:
                    continue
                rng = np.random.default_rng([config.seed, i, j, k])
                sid = f"{name}{j:03d}-{'cam' if source == 'camera' else 'imu'}"
                s = generate_jump(style, label, config, rng, source, sid, name)
                samples.append(crop_sample(s, config) if cropped else s)
    return samples


def generate_dataset(config: SynthConfig, out_dir=None) -> tuple[Dataset, Optional[Path]]:
    """Generate cropped samples; with ``out_dir`` also write ingest-format files.

    Returns the dataset and the manifest path (``None`` without ``out_dir``).
    """
    samples = generate_samples(config)
    dataset = Dataset(samples)
    if out_dir is None:
        return dataset, None
    out_dir = Path(out_dir)
    entries = []
    for s in samples:
        pose_rel = f"poses/{s.sample_id}.pose.csv"
        atomic_write(out_dir / pose_rel, dumps_pose_sequence(s.pose))
        angle_rel = None
        if s.angles is not None:
            angle_rel = f"angles/{s.sample_id}.angles.csv"
            atomic_write(out_dir / angle_rel, dumps_angle_sequence(s.angles))
        entries.append(ManifestEntry(s.sample_id, s.skater_id, s.source, pose_rel, angle_rel, s.label))
    # manifest last, so a complete manifest implies complete sample files
    buf = io.StringIO()
    write_manifest(entries, buf)
    manifest = out_dir / "manifest.csv"
    atomic_write(manifest, buf.getvalue())
    return dataset, manifest


# ---------------------------------------------------------------------------
# scenes and detections


@dataclass
class Actor:
    name: str
    frames: np.ndarray  # T x 17 x 3, world units
    jumper: bool = False


@dataclass
class SynthScene:
    actors: list[Actor]
    fps: float = 240.0
    px_per_unit: float = 4.0
    image_width: int = 1920
    image_height: int = 1080
    ground_px: float = 1000.0
    pad_px: float = 6.0
    pixel_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if sum(a.jumper for a in self.actors) != 1:
            raise ValueError("a scene needs exactly one jumper")

    @property
    def jumper(self) -> Actor:
        return next(a for a in self.actors if a.jumper)

    def gravity_px(self) -> float:
        """Gravity in px/frame^2."""
        return GRAVITY * self.px_per_unit / self.fps**2


def make_scene(
    config: Optional[SynthConfig] = None,
    style: Optional[SkaterStyle] = None,
    label: int = 1,
    n_bystanders: int = 2,
    pixel_noise: float = 0.0,
    px_per_unit: float = 4.0,
    seed: int = 0,
) -> SynthScene:
    """A jumper at the image centre plus bystanders gliding across the frame.

    Bystanders glide horizontally at different depths of the image (stacked
    vertically) so their boxes cross the jumper's with little overlap.
    """
    config = config or SynthConfig(noise_sigma=0.0)
    style = style or SkaterStyle(flight_height=config.flight_height, foot_length=config.foot_length)
    frames, _, t = jump_kinematics(style, config.lean_for(label), config, config.fps)
    actors = [Actor("jumper", frames, jumper=True)]
    rest = hip_height(SkaterStyle()) + rig_offsets(SkaterStyle())
    for b in range(n_bystanders):
        direction = 1.0 if b % 2 == 0 else -1.0
        x0 = -direction * 150.0
        lift = 120.0 * (b + 1)  # drawn higher in the image, i.e. further away
        traj = rest[None, :, :] + np.zeros((len(t), 1, 1))
        traj[:, :, 0] += x0 + direction * 150.0 * t[:, None]
        traj[:, :, 2] += lift
        actors.append(Actor(f"bystander{b}", traj))
    return SynthScene(actors, fps=float(config.fps), px_per_unit=px_per_unit, pixel_noise=pixel_noise, seed=seed)


def project_bbox(scene: SynthScene, frame: np.ndarray) -> tuple[float, float, float, float]:
    # orthographic view along the travel axis; image y points down
    u = scene.image_width / 2.0 + scene.px_per_unit * frame[:, 0]
    v = scene.ground_px - scene.px_per_unit * frame[:, 2]
    p = scene.pad_px
    return (float(u.min() - p), float(v.min() - p), float(u.max() + p), float(v.max() + p))


def generate_detections(scene: SynthScene) -> list[DetectionRecord]:
    """One padded bbox per actor per frame, actors in scene order."""
    rng = np.random.default_rng([scene.seed, 31337])
    records = []
    n = min(len(a.frames) for a in scene.actors)
    for f in range(n):
        for actor in scene.actors:
            box = np.array(project_bbox(scene, actor.frames[f]))
            if scene.pixel_noise > 0:
                box = box + rng.normal(0.0, scene.pixel_noise, size=4)
            records.append(DetectionRecord(f, tuple(float(v) for v in box), 0.9))
    return records


def describe(config: SynthConfig, px_per_unit: float = 4.0) -> dict:
    """Closed-form quantities behind the generator, for checking derived values."""
    style = SkaterStyle(flight_height=config.flight_height, foot_length=config.foot_length)
    fps = config.fps
    g_px = GRAVITY * px_per_unit / fps**2
    v0_px = style.launch_speed * px_per_unit / fps
    return {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "gravity": GRAVITY,
        "flight_time_s": style.flight_time,
        "launch_speed": style.launch_speed,
        "apex_frame": apex_frame(config, fps),
        "takeoff_frame": apex_frame(config, fps) - int(round(style.flight_time / 2 * fps)),
        "lateral_shift_error": config.foot_length * math.sin(math.radians(config.lean_error_deg)),
        "lateral_shift_correct": config.foot_length * math.sin(math.radians(config.lean_correct_deg)),
        "px_per_unit": px_per_unit,
        "gravity_px_per_frame2": g_px,
        "launch_speed_px_per_frame": v0_px,
        "crop": asdict(CropConfig.for_fps(fps)),
    }
