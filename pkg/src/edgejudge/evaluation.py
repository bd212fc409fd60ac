"""Leave-one-skater-out evaluation, metrics and coefficient analyses.

Edge errors are the positive class throughout.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import IO, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import clone

from .classifier import EdgeLogisticRegression
from .ingest import ANGLE_AXES, JOINT_INDEX, Dataset
from .preprocess import FeatureConfig, FeatureLayout, feature_matrix, normalize_pose

logger = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(predictions, labels) -> ConfusionMatrix:
    p = np.asarray(predictions).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(y)} labels")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


def accuracy(cm: ConfusionMatrix, printed_formula: bool = False) -> float:
    """``(TP + TN) / total``.

    ``printed_formula=True`` returns ``(TP + FP) / total`` instead, a variant
    kept only for auditing reports produced with that definition.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    if printed_formula:
        return (cm.tp + cm.fp) / cm.total
    return (cm.tp + cm.tn) / cm.total


def f_measure(cm: ConfusionMatrix) -> float:
    """``2TP / (2TP + FP + FN)``; 1.0 when there is nothing to get wrong."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    denom = 2 * cm.tp + cm.fp + cm.fn
    if denom == 0:
        return 1.0
    return 2 * cm.tp / denom


def format_pm(mean: float, std: float, percent: bool = True, digits: int = 2) -> str:
    """``81.25±12.50%`` style (or ``2.360 ± 0.308`` with ``percent=False``)."""
    if percent:
        return f"{100 * mean:.{digits}f}±{100 * std:.{digits}f}%"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


@dataclass
class FoldResult:
    skater_id: str
    train_ids: list[str]
    test_ids: list[str]
    cm: Optional[ConfusionMatrix] = None
    probabilities: Optional[np.ndarray] = None
    predictions: Optional[np.ndarray] = None
    error: Optional[str] = None
    model: object = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def accuracy(self) -> float:
        return accuracy(self.cm) if self.ok else math.nan

    @property
    def f_measure(self) -> float:
        return f_measure(self.cm) if self.ok else math.nan


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    # exactly rounded, so the aggregate can be recomputed bit-for-bit
    v = [float(x) for x in values]
    if not v:
        return math.nan, math.nan
    return statistics.mean(v), statistics.stdev(v) if len(v) > 1 else math.nan


@dataclass
class CVReport:
    config: FeatureConfig
    folds: list[FoldResult]
    layout: Optional[FeatureLayout] = None
    meta: dict = field(default_factory=dict)

    @property
    def errors(self) -> list[str]:
        return [f"{f.skater_id}: {f.error}" for f in self.folds if not f.ok]

    @property
    def accuracy(self) -> tuple[float, float]:
        """Mean and sample std over successful folds."""
        return _mean_std([f.accuracy for f in self.folds if f.ok])

    @property
    def f_measure(self) -> tuple[float, float]:
        return _mean_std([f.f_measure for f in self.folds if f.ok])

    def summary_row(self) -> list[str]:
        return [self.config.cli_name, self.config.title, format_pm(*self.accuracy), format_pm(*self.f_measure)]

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["skater", "n_test", "accuracy", "f_measure", "tp", "tn", "fp", "fn", "error"])
        for f in self.folds:
            if f.ok:
                c = f.cm
                w.writerow([f.skater_id, len(f.test_ids), f"{f.accuracy:.6f}", f"{f.f_measure:.6f}",
                            c.tp, c.tn, c.fp, c.fn, ""])
            else:
                w.writerow([f.skater_id, len(f.test_ids), "", "", "", "", "", "", f.error])
        w.writerow(["mean±std", sum(len(f.test_ids) for f in self.folds),
                    format_pm(*self.accuracy), format_pm(*self.f_measure), "", "", "", "", ""])

    def to_dict(self) -> dict:
        acc, f1 = self.accuracy, self.f_measure
        return {
            "config": self.config.cli_name,
            "title": self.config.title,
            "meta": self.meta,
            "aggregate": {
                "accuracy_mean": acc[0],
                "accuracy_std": acc[1],
                "f_measure_mean": f1[0],
                "f_measure_std": f1[1],
                "accuracy": format_pm(*acc),
                "f_measure": format_pm(*f1),
            },
            "folds": [
                {
                    "skater": f.skater_id,
                    "test_ids": f.test_ids,
                    "n_train": len(f.train_ids),
                    "error": f.error,
                    **(
                        {
                            "accuracy": f.accuracy,
                            "f_measure": f.f_measure,
                            "confusion": {"tp": f.cm.tp, "tn": f.cm.tn, "fp": f.cm.fp, "fn": f.cm.fn},
                            "probabilities": [float(p) for p in f.probabilities],
                        }
                        if f.ok
                        else {}
                    ),
                }
                for f in self.folds
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=True) + "\n"


def _run_fold(estimator, X, y, ids, train_idx, test_idx, skater, keep_model):
    train_ids = [ids[i] for i in train_idx]
    test_ids = [ids[i] for i in test_idx]
    fold = FoldResult(skater, train_ids, test_ids)
    if len(np.unique(y[train_idx])) < 2:
        fold.error = "training partition has a single class"
        return fold
    model = clone(estimator)
    try:
        model.fit(X[train_idx], y[train_idx])
    except ValueError as exc:
        fold.error = f"training failed: {exc}"
        return fold
    proba = np.asarray(model.predict_proba(X[test_idx]))[:, 1]
    pred = np.asarray(model.predict(X[test_idx])).astype(int)
    fold.probabilities = proba
    fold.predictions = pred
    fold.cm = confusion(pred, y[test_idx])
    if keep_model:
        fold.model = model
    return fold


def loso_cv(
    dataset: Dataset,
    config: FeatureConfig,
    estimator=None,
    jobs: int = 1,
    per_frame_z: bool = False,
    keep_models: bool = False,
) -> CVReport:
    """Hold out each skater in turn, train on the others, test on the held-out one.

    Only samples from the config's source take part. ``estimator`` is any
    classifier with ``fit``/``predict``/``predict_proba``; it is cloned per
    fold, so feature scaling never sees test rows.
    """
    estimator = estimator if estimator is not None else EdgeLogisticRegression(feature_config=config)
    samples = [s for s in dataset.samples if s.source == config.source]
    if not samples:
        raise EvaluationError(f"no {config.source} samples for {config.cli_name}")
    X, layout = feature_matrix(samples, config, per_frame_z)
    y = np.array([s.label for s in samples])
    ids = [s.sample_id for s in samples]
    groups = np.array([s.skater_id for s in samples])
    skaters = sorted(set(groups))
    if len(skaters) < 2:
        raise EvaluationError("leave-one-skater-out needs at least two skaters")
    splits = [(np.flatnonzero(groups != s), np.flatnonzero(groups == s), s) for s in skaters]
    folds = Parallel(n_jobs=jobs)(
        delayed(_run_fold)(estimator, X, y, ids, tr, te, s, keep_models) for tr, te, s in splits
    )
    report = CVReport(config, list(folds), layout)
    for err in report.errors:
        logger.warning("fold error %s", err)
    return report


# ---------------------------------------------------------------------------
# coefficient importance


@dataclass
class ImportanceReport:
    """Mean ``|coefficient|`` per joint (or skate-angle axis)."""

    groups: list[tuple[str, float]]  # sorted by importance, descending
    per_frame: dict[str, np.ndarray]  # group -> mean |w| over axes at each frame

    def ranking(self) -> list[str]:
        return [g for g, _ in self.groups]

    def __getitem__(self, group: str) -> float:
        return dict(self.groups)[group]

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "group", "importance"])
        for rank, (g, v) in enumerate(self.groups, start=1):
            w.writerow([rank, g, repr(v)])

    def write_frames_csv(self, fh: IO[str], label: str = "") -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "group", "frame", "importance"])
        for g, vals in self.per_frame.items():
            for t, v in enumerate(vals):
                w.writerow([label, g, t, repr(float(v))])


def feature_importance(model, layout: FeatureLayout) -> ImportanceReport:
    coef = np.abs(np.asarray(model.coef_, dtype=float).ravel())
    if len(coef) != len(layout):
        raise ValueError(f"model has {len(coef)} weights, layout has {len(layout)} entries")
    group_of = layout.group_of()
    frame_of = layout.frame_of()
    per_frame = {}
    totals = []
    for g in layout.groups:
        mask = group_of == g
        frames = frame_of[mask]
        per_frame[g] = np.array([coef[mask][frames == t].mean() for t in np.unique(frames)])
        totals.append((g, float(coef[mask].mean())))
    totals.sort(key=lambda gv: -gv[1])  # stable: ties keep layout order
    return ImportanceReport(totals, per_frame)


# ---------------------------------------------------------------------------
# trajectory analyses


@dataclass
class TrajectoryDistance:
    skater_id: str
    joint: str
    source: str
    mean: float
    std: float
    n_error: int
    n_correct: int
    method: str = "class_mean"

    def table_row(self) -> str:
        return f"skater {self.skater_id}  {format_pm(self.mean, self.std, percent=False, digits=3)}"


def _joint_paths(samples, joint: str) -> np.ndarray:
    j = JOINT_INDEX[joint]
    paths = [normalize_pose(s.pose).frames[:, j, :] for s in samples]
    lengths = {len(p) for p in paths}
    if len(lengths) != 1:
        raise ValueError(f"samples are not aligned to equal length: {sorted(lengths)}")
    return np.stack(paths)


def trajectory_distance(
    dataset: Dataset,
    skater_id: str,
    joint: str = "l_foot",
    source: Optional[str] = None,
    method: str = "class_mean",
) -> TrajectoryDistance:
    """Per-frame Euclidean distance between error and correct joint paths.

    ``class_mean`` compares the two class-mean trajectories and reports
    mean and (population) std over frames. ``all_pairs`` averages each
    error/correct pair over frames and reports mean and std over pairs.
    """
    samples = [s for s in dataset.samples if s.skater_id == skater_id and (source is None or s.source == source)]
    if not samples:
        raise ValueError(f"no samples for skater {skater_id!r}")
    sources = {s.source for s in samples}
    if len(sources) > 1:
        raise ValueError(f"skater {skater_id!r} mixes sources {sorted(sources)}; pass source=")
    err = [s for s in samples if s.label == 1]
    ok = [s for s in samples if s.label == 0]
    if not err or not ok:
        raise ValueError(f"trajectory distance undefined for single-class skater {skater_id!r}")
    pe, pc = _joint_paths(err, joint), _joint_paths(ok, joint)
    if pe.shape[1] != pc.shape[1]:
        raise ValueError("error and correct samples differ in length")
    if method == "class_mean":
        d = np.linalg.norm(pe.mean(axis=0) - pc.mean(axis=0), axis=1)
    elif method == "all_pairs":
        d = np.linalg.norm(pe[:, None] - pc[None, :], axis=-1).mean(axis=-1).ravel()
    else:
        raise ValueError(f"unknown method {method!r}")
    return TrajectoryDistance(skater_id, joint, sources.pop(), float(d.mean()), float(d.std()), len(err), len(ok), method)


def trajectory_distances(dataset: Dataset, joint: str = "l_foot", method: str = "class_mean") -> list[TrajectoryDistance]:
    """Every (skater, source) combination that has both classes."""
    out = []
    for source in sorted({s.source for s in dataset.samples}):
        for skater in dataset.skaters:
            labels = {s.label for s in dataset.samples if s.skater_id == skater and s.source == source}
            if labels == {0, 1}:
                out.append(trajectory_distance(dataset, skater, joint, source, method))
    return out


def write_trajectory_distances(fh: IO[str], rows: Sequence[TrajectoryDistance]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["skater", "source", "joint", "method", "mean", "std", "n_error", "n_correct", "display"])
    for r in rows:
        w.writerow([r.skater_id, r.source, r.joint, r.method, repr(r.mean), repr(r.std), r.n_error,
                    r.n_correct, format_pm(r.mean, r.std, percent=False, digits=3)])


def write_trajectory_curves(fh: IO[str], dataset: Dataset, joint: str = "l_foot") -> None:
    """Long-format normalized joint paths, one row per sample and frame."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["sample_id", "skater", "source", "label", "frame", "x", "y", "z"])
    j = JOINT_INDEX[joint]
    for s in dataset.samples:
        path = normalize_pose(s.pose).frames[:, j, :]
        for t, (x, y, z) in enumerate(path):
            w.writerow([s.sample_id, s.skater_id, s.source, s.label, t, repr(float(x)), repr(float(y)), repr(float(z))])


def write_angle_curves(fh: IO[str], dataset: Dataset) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["sample_id", "skater", "label", "frame", *ANGLE_AXES])
    for s in dataset.samples:
        if s.angles is None:
            continue
        for t, row in enumerate(s.angles.frames):
            w.writerow([s.sample_id, s.skater_id, s.label, t, *(repr(float(v)) for v in row)])


def summary_table(reports: Sequence[CVReport]) -> list[list[str]]:
    return [["config", "features", "accuracy", "f_measure"]] + [r.summary_row() for r in reports]

