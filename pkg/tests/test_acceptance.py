"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` to see the verdicts.
Criterion 1 needs the reference recordings in ingest format; point
``EDGEJUDGE_REFERENCE_MANIFEST`` at their manifest to enable it.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from edgejudge.classifier import EdgeLogisticRegression, loss_and_gradient
from edgejudge.cli import main
from edgejudge.evaluation import ConfusionMatrix, accuracy, confusion, f_measure, feature_importance, loso_cv
from edgejudge.ingest import DetectionRecord, PoseSequence, load_dataset
from edgejudge.preprocess import FeatureConfig, downsample, feature_matrix, normalize_pose
from edgejudge.synth import SynthConfig, generate_dataset
from edgejudge.tracker import detect_track_apex, run_tracker

pytestmark = pytest.mark.acceptance

REFERENCE_ENV = "EDGEJUDGE_REFERENCE_MANIFEST"


def verdict(capsys, n, text, ok):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
    assert ok, text


def test_criterion_1_reference_numbers(capsys):
    manifest = os.environ.get(REFERENCE_ENV)
    if not manifest:
        with capsys.disabled():
            print(f"\nSKIP criterion 1: reference dataset not available (set {REFERENCE_ENV})")
        pytest.skip("reference dataset not available")
    ds = load_dataset(Path(manifest))
    acc = {cfg: loso_cv(ds, cfg, jobs=-1).accuracy[0] for cfg in FeatureConfig}
    cam12 = acc[FeatureConfig.CamPos12]
    position = [a for c, a in acc.items() if c.pose_fps and not c.angle_fps]
    angle_only = [a for c, a in acc.items() if c.angle_fps and not c.pose_fps]
    ok = abs(cam12 - 0.8356) <= 0.05 and min(position) > max(angle_only)
    verdict(capsys, 1, f"cam-pos-12 {100 * cam12:.2f}% (target 83.56±5), "
            f"position min {min(position):.3f} vs angle-only max {max(angle_only):.3f}", ok)


def test_criterion_2_synthetic_end_to_end(capsys):
    start = time.perf_counter()
    cfg = SynthConfig(n_skaters=6, jumps_per_skater=40, lean_error_deg=15.0, lean_correct_deg=-5.0,
                      noise_sigma=0.05 * 45.0, foot_length=45.0, sources=("camera",), seed=7)
    ds, _ = generate_dataset(cfg)
    report = loso_cv(ds, FeatureConfig.CamPos12)
    elapsed = time.perf_counter() - start
    acc, f = report.accuracy[0], report.f_measure[0]
    ok = acc >= 0.95 and f >= 0.95 and elapsed < 60 and not report.errors
    verdict(capsys, 2, f"accuracy {acc:.4f}, F {f:.4f}, {elapsed:.1f} s", ok)


def test_criterion_3_no_signal_control(capsys):
    cfg = SynthConfig(n_skaters=6, jumps_per_skater=40, lean_error_deg=1e-3, lean_correct_deg=-1e-3,
                      noise_sigma=22.5, sources=("camera",), seed=0)
    ds, _ = generate_dataset(cfg)
    acc = loso_cv(ds, FeatureConfig.CamPos12).accuracy[0]
    verdict(capsys, 3, f"accuracy {acc:.4f} (want 0.5 ± 0.1)", abs(acc - 0.5) <= 0.1)


def test_criterion_4_importance_fidelity(capsys):
    cfg = SynthConfig(n_skaters=6, jumps_per_skater=40, sources=("camera",), seed=7, noise_sigma=2.25)
    ds, _ = generate_dataset(cfg)
    X, layout = feature_matrix(ds.samples, FeatureConfig.CamPos12)
    model = EdgeLogisticRegression(feature_config=FeatureConfig.CamPos12).fit(X, [s.label for s in ds.samples])
    rep = feature_importance(model, layout)
    first, second = rep.ranking()[:2]
    verdict(capsys, 4, f"top group {first} ({rep[first]:.4f}), next {second} ({rep[second]:.4f})", first == "l_foot")


def test_criterion_5_gradient_check(capsys):
    h = 1e-6
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng([5, seed])
        n, d = int(rng.integers(5, 60)), int(rng.integers(1, 12))
        X, y = rng.normal(size=(n, d)), rng.integers(0, 2, n).astype(float)
        w, b, lam = rng.normal(size=d), float(rng.normal()), float(rng.uniform(0, 2))
        _, (gw, gb) = loss_and_gradient(w, b, X, y, lam)
        num = np.empty(d + 1)
        for k in range(d + 1):
            e = np.zeros(d + 1)
            e[k] = h
            plus = loss_and_gradient(w + e[:d], b + e[d], X, y, lam)[0]
            minus = loss_and_gradient(w - e[:d], b - e[d], X, y, lam)[0]
            num[k] = (plus - minus) / (2 * h)
        ana = np.r_[gw, gb]
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        worst = max(worst, float(rel.max()))
    verdict(capsys, 5, f"max relative error {worst:.2e} over 100 instances", worst < 1e-5)


def _oracle(pred, lab):
    tp = tn = fp = fn = 0
    for p, y in zip(pred, lab):
        if p == 1 and y == 1:
            tp += 1
        elif p == 0 and y == 0:
            tn += 1
        elif p == 1:
            fp += 1
        else:
            fn += 1
    acc = (tp + tn) / len(pred)
    f = 1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return acc, f


def test_criterion_6_metric_oracle(capsys):
    mismatches = 0
    for seed in range(1000):
        rng = np.random.default_rng([6, seed])
        n = int(rng.integers(1, 50))
        pred, lab = rng.integers(0, 2, n).tolist(), rng.integers(0, 2, n).tolist()
        cm = confusion(pred, lab)
        mismatches += (accuracy(cm), f_measure(cm)) != _oracle(pred, lab)
    all_error = confusion([1] * 7, [1] * 7)
    conv = accuracy(all_error) == 1.0 and f_measure(all_error) == 1.0 and f_measure(ConfusionMatrix(tn=4)) == 1.0
    verdict(capsys, 6, f"{mismatches} mismatches over 1000 sets, all-error fold 100%/100%: {conv}",
            mismatches == 0 and conv)


def _ballistic_records(v0, g, n, rng=None, sigma=0.0):
    t = np.arange(n, dtype=float)
    cy = 500.0 - v0 * t + 0.5 * g * t**2
    boxes = np.stack([np.full(n, 280.0), cy - 50, np.full(n, 320.0), cy + 50], axis=1)
    if sigma:
        boxes = boxes + rng.normal(0.0, sigma, size=boxes.shape)
    return [DetectionRecord(i, tuple(float(v) for v in b), 1.0) for i, b in enumerate(boxes)]


def test_criterion_7_apex_detection(capsys):
    exact = []
    for v0, g in [(4.0, 1 / 15), (10.0, 0.25), (5.0, 0.3), (7.0, 0.45), (10.5, 1.0), (15.0, 0.25)]:
        n = int(2 * v0 / g) + 20
        (track,) = run_tracker(_ballistic_records(v0, g, n))
        exact.append(detect_track_apex(track) == math.floor(v0 / g + 0.5))
    # 1 px noise on every bbox corner; g = 0.25 px/frame^2 (see decisions log for smaller scales)
    v0, g = 15.0, 0.25
    truth = round(v0 / g)
    errors = []
    for seed in range(100):
        (track,) = run_tracker(_ballistic_records(v0, g, 2 * truth + 1, np.random.default_rng(seed), 1.0))
        errors.append(abs(detect_track_apex(track) - truth))
    ok = all(exact) and max(errors) <= 2
    verdict(capsys, 7, f"noise-free exact {sum(exact)}/{len(exact)}, noisy max error {max(errors)} frames", ok)


def test_criterion_8_preprocess_invariants(capsys):
    idem = dist = dec = True
    for seed in range(50):
        rng = np.random.default_rng([8, seed])
        n = int(rng.integers(1, 500))
        seq = PoseSequence(240.0, rng.normal(scale=50.0, size=(n, 17, 3)))
        once = normalize_pose(seq)
        idem &= np.array_equal(normalize_pose(once).frames, once.frames)
        d_in = np.linalg.norm(seq.frames[:, :, None] - seq.frames[:, None], axis=-1)
        d_out = np.linalg.norm(once.frames[:, :, None] - once.frames[:, None], axis=-1)
        dist &= np.allclose(d_in, d_out, rtol=0, atol=1e-9)
        dec &= np.array_equal(downsample(downsample(seq, 60), 12).frames, downsample(seq, 12).frames)
    verdict(capsys, 8, f"idempotent {idem}, distance-preserving {dist}, decimation composes {dec}",
            idem and dist and dec)


def _pipeline(root, monkeypatch):
    # same arguments in both runs: relative paths from each run's own directory
    root.mkdir()
    monkeypatch.chdir(root)
    data, out = Path("data"), Path("out")
    steps = [
        ["synth", "--skaters", "3", "--jumps", "10", "--seed", "11", "--out", str(data)],
        ["evaluate", "--config", "cam-pos-12", "--manifest", str(data / "manifest.csv"), "--out", str(out)],
        ["evaluate", "--config", "imu-pos12-ang12", "--manifest", str(data / "manifest.csv"), "--out", str(out)],
        ["analyze", "--manifest", str(data / "manifest.csv"), "--out", str(out)],
        ["judge", "--config", "imu-ang-60", "--manifest", str(data / "manifest.csv"), "--out", str(out)],
    ]
    codes = [main(s) for s in steps]
    return codes, {p: p.read_bytes() for p in sorted(Path(".").rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, capsys, monkeypatch):
    codes_a, a = _pipeline(tmp_path / "a", monkeypatch)
    codes_b, b = _pipeline(tmp_path / "b", monkeypatch)
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    models = sum(1 for k in a if k.name.startswith("model_"))
    ok = codes_a == codes_b == [0] * 5 and same and models == 2
    verdict(capsys, 9, f"{len(a)} files compared, {models} models, byte-identical {same}", ok)
