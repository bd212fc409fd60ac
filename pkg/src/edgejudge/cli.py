"""``edgejudge`` command line: synth, segment, evaluate, analyze, judge.

Exit codes: 0 ok, 1 usage, 2 data error, 3 evaluation error.

A JSON file given with ``--config-file`` supplies option defaults for the
chosen subcommand (keys are option names with ``-`` or ``_``); flags on the
command line override it.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .classifier import EdgeLogisticRegression, dumps_model, load_model, predict_sample
from .evaluation import (
    EvaluationError,
    feature_importance,
    loso_cv,
    summary_table,
    trajectory_distances,
    write_angle_curves,
    write_trajectory_curves,
    write_trajectory_distances,
)
from .ingest import JOINTS, Dataset, IngestError, atomic_write, dumps_pose_sequence, load_dataset, parse_detections, parse_pose_sequence
from .preprocess import FeatureConfig, SourceUnavailable, build_features, feature_matrix
from .synth import SynthConfig, describe, generate_dataset
from .tracker import (
    DEFAULT_SMOOTHING_WINDOW,
    DEFAULT_V_CHANGE_MIN,
    CropConfig,
    InsufficientContext,
    NoApexFound,
    NoJumpDetected,
    TrackerConfig,
    crop_window,
    segment_detections,
)

logger = logging.getLogger("edgejudge")

EXIT_USAGE, EXIT_DATA, EXIT_EVAL = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class EvalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _render(writer, *args) -> str:
    buf = io.StringIO()
    writer(buf, *args)
    return buf.getvalue()


def _rows_csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _meta(args, **extra) -> dict:
    meta = {"version": __version__, "seed": args.seed, **extra}
    if getattr(args, "stamp", False):
        meta["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return meta


def _estimator(args, config: FeatureConfig) -> EdgeLogisticRegression:
    return EdgeLogisticRegression(
        l2=args.l2,
        learning_rate=args.learning_rate,
        tol=args.tol,
        max_iter=args.max_iter,
        standardize=not args.raw,
        feature_config=config.cli_name,
        random_state=args.seed,
    )


def _hyper(args) -> dict:
    return {
        "l2": args.l2,
        "learning_rate": args.learning_rate,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "standardize": not args.raw,
        "per_frame_z": args.per_frame_z,
    }


def _load(path) -> Dataset:
    try:
        return load_dataset(Path(path))
    except (IngestError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _config(name: str) -> FeatureConfig:
    try:
        return FeatureConfig.parse(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    fractions = [float(v) for v in str(args.error_fraction).split(",")]
    try:
        config = SynthConfig(
            n_skaters=args.skaters,
            jumps_per_skater=args.jumps,
            error_fraction=fractions[0] if len(fractions) == 1 else fractions,
            lean_error_deg=args.lean_error,
            lean_correct_deg=args.lean_correct,
            noise_sigma=args.noise,
            angle_noise_deg=args.angle_noise,
            fps=args.fps,
            imu_fps=args.imu_fps,
            sources=tuple(args.sources.split(",")),
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.describe:
        print(json.dumps(describe(config), indent=1))
        return 0
    out = Path(args.out)
    dataset, manifest = generate_dataset(config, out)
    n_err, n_ok = dataset.class_counts
    print(f"wrote {len(dataset)} samples ({n_err} error / {n_ok} correct) to {manifest}")
    return 0


def cmd_segment(args) -> int:
    try:
        records = parse_detections(Path(args.detections))
        pose = parse_pose_sequence(Path(args.pose))
    except (IngestError, OSError) as exc:
        raise DataError(str(exc)) from exc
    tracker_config = TrackerConfig(args.iou_min, args.max_age, args.min_hits)
    crop = CropConfig.for_fps(pose.fps, args.takeoff_seconds)
    if args.window_len is not None:
        crop.window_len = args.window_len
    if args.aligned_index is not None:
        crop.aligned_index = args.aligned_index
    try:
        seg = segment_detections(records, tracker_config, args.v_change_min, args.smoothing_window)
        cropped, window = crop_window(pose, seg.apex_frame, crop, seg.track_id)
    except (NoJumpDetected, NoApexFound, InsufficientContext) as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    stem = Path(args.pose).name.split(".")[0]
    atomic_write(out / f"{stem}.cropped.pose.csv", dumps_pose_sequence(cropped))
    atomic_write(out / f"{stem}.window.json", window.to_json() + "\n")
    print(f"track {seg.track_id}: apex {window.apex_frame}, frames [{window.start}, {window.end}]")
    return 0


def cmd_evaluate(args) -> int:
    if not args.all_configs and not args.config:
        raise UsageError("give --config NAME or --all-configs")
    configs = list(FeatureConfig) if args.all_configs else [_config(args.config)]
    dataset = _load(args.manifest)
    out = Path(args.out)
    rows = [summary_table([])[0]]
    failures = []
    for cfg in configs:
        try:
            report = loso_cv(dataset, cfg, _estimator(args, cfg), args.jobs, args.per_frame_z)
        except (EvaluationError, SourceUnavailable, ValueError) as exc:
            failures.append(f"{cfg.cli_name}: {exc}")
            rows.append([cfg.cli_name, cfg.title, "n/a", "n/a"])
            continue
        report.meta = _meta(args, manifest=str(args.manifest), hyperparams=_hyper(args))
        atomic_write(out / f"cv_{cfg.cli_name}.csv", _render(report.write_csv))
        atomic_write(out / f"cv_{cfg.cli_name}.json", report.to_json())
        rows.append(report.summary_row())
        failures += [f"{cfg.cli_name}: {e}" for e in report.errors]
        acc, f1 = report.summary_row()[2:]
        print(f"{cfg.cli_name:16s} accuracy {acc:>16s}  F {f1:>16s}")
    atomic_write(out / "summary.csv", _rows_csv(rows))
    if failures:
        raise EvalFailure("; ".join(failures))
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args.config)
    if args.joint not in JOINTS:
        raise UsageError(f"unknown joint {args.joint!r}")
    dataset = _load(args.manifest)
    out = Path(args.out)
    samples = [s for s in dataset.samples if s.source == cfg.source]
    if not samples:
        raise DataError(f"no {cfg.source} samples for {cfg.cli_name}")
    try:
        X, layout = feature_matrix(samples, cfg, args.per_frame_z)
        model = _estimator(args, cfg).fit(X, [s.label for s in samples])
        report = loso_cv(dataset, cfg, _estimator(args, cfg), args.jobs, args.per_frame_z, keep_models=True)
    except (EvaluationError, ValueError) as exc:
        raise EvalFailure(str(exc)) from exc
    full = feature_importance(model, layout)
    atomic_write(out / f"importance_{cfg.cli_name}.csv", _render(full.write_csv))
    frames = _render(full.write_frames_csv, "all")
    for fold in report.folds:
        if fold.ok:
            imp = feature_importance(fold.model, layout)
            frames += _render(imp.write_frames_csv, f"test:{fold.skater_id}").split("\n", 1)[1]
    atomic_write(out / f"importance_frames_{cfg.cli_name}.csv", frames)
    atomic_write(out / f"model_{cfg.cli_name}.json", dumps_model(model))
    atomic_write(out / "trajectory_distance.csv", _render(write_trajectory_distances, trajectory_distances(dataset, args.joint)))
    atomic_write(out / f"trajectories_{args.joint}.csv", _render(write_trajectory_curves, dataset, args.joint))
    if any(s.angles is not None for s in dataset.samples):
        atomic_write(out / "angle_curves.csv", _render(write_angle_curves, dataset))
    print("top groups: " + ", ".join(f"{g} {v:.4g}" for g, v in full.groups[:5]))
    return 0


def cmd_judge(args) -> int:
    if args.model:
        try:
            model = load_model(args.model)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load model {args.model}: {exc}") from exc
        cfg = FeatureConfig.parse(model.feature_config)
    else:
        if not args.config:
            raise UsageError("give --config NAME (or --model PATH)")
        cfg = _config(args.config)
        train = _load(args.manifest)
        samples = [s for s in train.samples if s.source == cfg.source]
        if not samples:
            raise DataError(f"no {cfg.source} training samples for {cfg.cli_name}")
        try:
            X, _ = feature_matrix(samples, cfg, args.per_frame_z)
            model = _estimator(args, cfg).fit(X, [s.label for s in samples])
        except ValueError as exc:
            raise EvalFailure(str(exc)) from exc
        atomic_write(Path(args.out) / f"model_{cfg.cli_name}.json", dumps_model(model))
    targets = _load(args.samples or args.manifest)
    rows = [["sample_id", "probability", "label"]]
    for s in targets.samples:
        if s.source != cfg.source:
            continue
        try:
            p, label = predict_sample(model, build_features(s, cfg, args.per_frame_z))
        except ValueError as exc:
            raise DataError(f"{s.sample_id}: {exc}") from exc
        rows.append([s.sample_id, repr(p), label])
    atomic_write(Path(args.out) / "judgments.csv", _rows_csv(rows))
    print(f"judged {len(rows) - 1} samples with {cfg.cli_name}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_options(p):
    p.add_argument("--l2", type=float, default=1.0, help="ridge strength on standardized weights")
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--raw", action="store_true", help="skip feature standardization")
    p.add_argument("--per-frame-z", action="store_true", help="zero the lower foot in every frame")


def _add_common(p, out_default):
    p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config-file", help="JSON file with option defaults")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgejudge", description="Lutz edge-error judgment from pose time series")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p, "edgejudge_data")
    p.add_argument("--skaters", type=int, default=6)
    p.add_argument("--jumps", type=int, default=40, help="jumps per skater")
    p.add_argument("--error-fraction", default="0.5", help="one value, or one per skater comma-separated")
    p.add_argument("--lean-error", type=float, default=15.0, help="inside-edge lean, degrees (> 0)")
    p.add_argument("--lean-correct", type=float, default=-5.0, help="outside-edge lean, degrees (< 0)")
    p.add_argument("--noise", type=float, default=1.0, help="pose noise sigma, cm")
    p.add_argument("--angle-noise", type=float, default=2.0, help="skate angle noise sigma, degrees")
    p.add_argument("--fps", type=int, default=240, choices=(240, 60), help="camera frame rate")
    p.add_argument("--imu-fps", type=int, default=60, choices=(240, 60))
    p.add_argument("--sources", default="camera,imu")
    p.add_argument("--describe", action="store_true", help="print closed-form generator parameters and exit")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="find the jumper and crop the pose sequence")
    _add_common(p, "edgejudge_out")
    p.add_argument("--detections", required=True, help="JSON-lines detection file")
    p.add_argument("--pose", required=True, help="full-length pose file at capture fps")
    p.add_argument("--iou-min", type=float, default=0.3)
    p.add_argument("--max-age", type=int, default=30)
    p.add_argument("--min-hits", type=int, default=3)
    p.add_argument("--v-change-min", type=float, default=DEFAULT_V_CHANGE_MIN)
    p.add_argument("--smoothing-window", type=int, default=DEFAULT_SMOOTHING_WINDOW)
    p.add_argument("--takeoff-seconds", type=float, default=0.25, help="apex to take-off gap")
    p.add_argument("--window-len", type=int)
    p.add_argument("--aligned-index", type=int)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="leave-one-skater-out cross-validation")
    _add_common(p, "edgejudge_out")
    p.add_argument("--manifest", default="edgejudge_data/manifest.csv")
    p.add_argument("--config", help=f"one of {', '.join(c.cli_name for c in FeatureConfig)}")
    p.add_argument("--all-configs", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--stamp", action="store_true", help="embed a timestamp in reports")
    _add_model_options(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="importance, trajectory and angle-curve tables")
    _add_common(p, "edgejudge_out")
    p.add_argument("--manifest", default="edgejudge_data/manifest.csv")
    p.add_argument("--config", default="cam-pos-12")
    p.add_argument("--joint", default="l_foot")
    p.add_argument("--jobs", type=int, default=1)
    _add_model_options(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("judge", help="train on a manifest and judge samples")
    _add_common(p, "edgejudge_out")
    p.add_argument("--manifest", default="edgejudge_data/manifest.csv", help="training manifest")
    p.add_argument("--samples", help="manifest of samples to judge (default: the training manifest)")
    p.add_argument("--config")
    p.add_argument("--model", help="use a saved model instead of training")
    _add_model_options(p)
    p.set_defaults(func=cmd_judge)
    return parser


def _apply_config_file(parser, argv, args):
    path = Path(args.config_file)
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in subparser._actions} - {"help", "config_file", "func"}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in dests:
            raise UsageError(f"unknown key {key!r} in config file for {args.command}")
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config_file:
            args = _apply_config_file(parser, argv, args)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        return args.func(args)
    except UsageError as exc:
        print(f"edgejudge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"edgejudge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EvalFailure as exc:
        print(f"edgejudge: evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
