"""Acceptance gate: one test per shipping criterion, each ending in a PASS line.

Run with `pytest -v -s tests/test_acceptance.py` to see the lines. The noisy
training batch is shared between the fusion and distillation criteria through
a module-scoped fixture, so the whole gate stays under a few minutes.
"""
from __future__ import annotations

import io
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from kfuse import linearlab as lab
from kfuse.fusion import (
    best_epoch,
    epoch_accuracies,
    accuracy_of,
    fit_plan,
    fuse,
    fused_checkpoint_count,
    horizontal_ensemble,
)
from kfuse.metrics import forget_report
from kfuse.models import (
    Architecture,
    Batch,
    CrossEntropyLoss,
    DistillLoss,
    ModelWeights,
    SquaredLoss,
    grad,
    init_weights,
    loss_value,
)
from kfuse.predlog import (
    BadMagicError,
    FormatError,
    LogValidationError,
    PredictionLog,
    TruncatedFileError,
    VersionMismatchError,
    correctness,
    read_log,
    write_log,
)
from kfuse.trainer import (
    DatasetSpec,
    ExperimentConfig,
    ModelSpec,
    NoiseSpec,
    distill,
    make_gaussian_mixture,
    predict_probs,
    run,
)

DATA_DIR = Path(__file__).parent / "data"


def random_log(rng: np.random.Generator) -> PredictionLog:
    e = int(rng.integers(2, 7))
    n = int(rng.integers(1, 51))
    c = int(rng.integers(2, 6))
    raw = rng.random((e, n, c)) + 0.02
    probs = (raw / raw.sum(axis=2, keepdims=True)).astype(np.float32)
    mask = rng.random(n) < 0.5 if rng.random() < 0.5 else None
    return PredictionLog(probs=probs, labels=rng.integers(0, c, size=n),
                         noise_mask=mask)


def test_metric_identity_holds_exactly():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    for _ in range(1000):
        log = random_log(rng)
        report = forget_report(log)
        ref_correct = int(report.correct_counts[report.reference_epoch])
        for e in range(log.epochs):
            lhs = ref_correct - int(report.correct_counts[e])
            rhs = int(report.l_counts[e]) - int(report.f_counts[e])
            assert lhs == rhs
    elapsed = time.monotonic() - start
    assert elapsed < 10.0
    print(f"PASS: accuracy identity exact on 1000 random logs ({elapsed:.1f}s < 10s)")


def test_fused_validation_accuracy_never_degrades():
    start = time.monotonic()
    wins = 0
    for seed in range(50):
        cfg = ExperimentConfig(
            dataset=DatasetSpec(classes=3, dimension=4, mean_scale=2.0,
                                cov_scale=1.0, train_size=150, val_size=60,
                                test_size=40),
            model=ModelSpec(hidden=(16,)),
            noise=NoiseSpec(kind="symmetric", fraction=0.3),
            epochs=6, lr=0.4, batch_size=32, seed=seed)
        art = run(cfg)
        plan = fit_plan(art.val_log)
        fused_acc = accuracy_of(fuse(plan, art.val_log).probs, art.val_log.labels)
        ref_acc = float(epoch_accuracies(art.val_log)[plan.reference_epoch])
        if fused_acc >= ref_acc:
            wins += 1
    elapsed = time.monotonic() - start
    assert wins == 50
    assert elapsed < 120.0
    print(f"PASS: fused validation accuracy >= early-stopped reference in "
          f"50/50 runs ({elapsed:.1f}s < 120s)")


NOISY_SEEDS = (0, 1, 2, 3, 4)


def noisy_config(seed: int) -> ExperimentConfig:
    return ExperimentConfig(
        dataset=DatasetSpec(classes=10, dimension=40, mean_scale=2.0,
                            cov_scale=1.0, train_size=20000, val_size=2000,
                            test_size=2000),
        model=ModelSpec(hidden=(256,), activation="relu"),
        noise=NoiseSpec(kind="symmetric", fraction=0.4),
        epochs=60, lr=0.5, batch_size=64, seed=seed)


@pytest.fixture(scope="module")
def noisy_runs():
    start = time.monotonic()
    out = []
    for seed in NOISY_SEEDS:
        cfg = noisy_config(seed)
        art = run(cfg)
        plan = fit_plan(art.val_log)
        out.append((cfg, art, plan))
    return out, time.monotonic() - start


def test_fusion_beats_baselines_under_label_noise(noisy_runs):
    runs, setup_elapsed = noisy_runs
    start = time.monotonic()
    base_accs, kf_accs, hz_accs = [], [], []
    for cfg, art, plan in runs:
        stop = best_epoch(art.val_log)
        base_accs.append(float(epoch_accuracies(art.test_log)[stop]))
        kf_accs.append(accuracy_of(fuse(plan, art.test_log).probs,
                                   art.test_log.labels))
        k = fused_checkpoint_count(plan, art.test_log.epochs)
        hz_accs.append(accuracy_of(horizontal_ensemble(art.test_log, k).probs,
                                   art.test_log.labels))
    base = float(np.mean(base_accs))
    kf = float(np.mean(kf_accs))
    hz = float(np.mean(hz_accs))
    elapsed = time.monotonic() - start + setup_elapsed
    assert kf >= base + 0.010, f"fused {kf:.4f} vs baseline {base:.4f}"
    assert kf > hz, f"fused {kf:.4f} vs horizontal {hz:.4f}"
    assert elapsed < 600.0
    print(f"PASS: fused test accuracy {kf:.4f} >= baseline {base:.4f} + 1pt and "
          f"> horizontal {hz:.4f} at equal checkpoint count, 5 seeds "
          f"({elapsed:.1f}s < 600s)")


def test_distilled_student_stays_ahead_of_baseline(noisy_runs):
    runs, setup_elapsed = noisy_runs
    start = time.monotonic()
    base_accs, student_accs = [], []
    for cfg, art, plan in runs:
        stop = best_epoch(art.val_log)
        base_accs.append(float(epoch_accuracies(art.test_log)[stop]))
        teacher = fuse(plan, art.train_log).probs
        # the run is deterministic in its seed, so the raw arrays can be
        # regenerated instead of stored
        root = np.random.SeedSequence(cfg.seed)
        data_seq, _, _ = root.spawn(3)
        data_rng = np.random.default_rng(data_seq)
        spec = cfg.dataset
        train_x, _ = make_gaussian_mixture(spec, data_rng, spec.train_size)
        make_gaussian_mixture(spec, data_rng, spec.val_size)
        test_x, test_y = make_gaussian_mixture(spec, data_rng, spec.test_size)
        arch = cfg.model.architecture(spec.dimension, spec.classes)
        student = distill(
            train_x, art.train_log.labels.astype(np.int64), teacher, arch,
            epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
            temperature=2.5, alpha=0.9, seed=cfg.seed + 1000)
        student_accs.append(accuracy_of(predict_probs(student, test_x), test_y))
    base = float(np.mean(base_accs))
    student = float(np.mean(student_accs))
    elapsed = time.monotonic() - start + setup_elapsed
    assert student >= base + 0.005, f"student {student:.4f} vs baseline {base:.4f}"
    assert elapsed < 600.0
    print(f"PASS: distilled student test accuracy {student:.4f} >= "
          f"baseline {base:.4f} + 0.5pt, 5 seeds ({elapsed:.1f}s < 600s)")


def test_single_layer_descent_matches_closed_form():
    start = time.monotonic()
    data, y = lab.random_problem(200, 12, seed=0)
    run_ = lab.gd_trajectory(data, y, depth=1, lr=1e-3, steps=200, seed=1)
    deviation = lab.max_relative_deviation(run_)
    elapsed = time.monotonic() - start
    assert deviation <= 1e-6
    assert elapsed < 5.0
    print(f"PASS: depth-1 GD within {deviation:.2e} of the closed form over "
          f"200 steps ({elapsed:.1f}s < 5s)")


def test_deep_stack_theory():
    start = time.monotonic()
    # closed-form tracking for stacked layers
    worst = 0.0
    for depth in (2, 3):
        for seed in range(10):
            data, y = lab.random_problem(200, 12, seed)
            run_ = lab.gd_trajectory(data, y, depth=depth, lr=1e-3, steps=40,
                                     seed=seed + 10)
            worst = max(worst, lab.trajectory_deviation(run_))
    assert worst <= 0.05, f"trajectory deviation {worst:.4f}"

    # every constructed predicted-forgotten point is empirically forgotten
    # with a finite crossing step, and the first GD step moves each margin
    # by the first-order rate up to the gamma^2 bound
    cap = {2: 13, 3: 12}
    gamma = 1e-3
    total = flagged = 0
    rate_gap = 0.0
    for seed in range(4):
        data, y = lab.random_problem(200, 12, seed)
        for depth in (2, 3):
            run_ = lab.gd_trajectory(data, y, depth=depth, lr=gamma, steps=400,
                                     seed=seed + 10)
            m_first = (run_.trajectory[1] @ run_.data.T) * run_.labels
            m_zero = (run_.trajectory[0] @ run_.data.T) * run_.labels
            for i in range(run_.data.shape[0]):
                r = lab.forget_rate(run_, run_.data[i], float(run_.labels[i]))
                rate_gap = max(rate_gap, abs((m_first[i] - m_zero[i]) - r))
            rng = np.random.default_rng(seed + 100)
            picked = 0
            while picked < cap[depth]:
                x = rng.standard_normal(12)
                x /= np.linalg.norm(x)
                m0 = float(run_.w0 @ x)
                m_inf = float(run_.w_opt @ x)
                rate = lab.forget_rate(run_, x, 1.0)
                if m0 <= 0.05 or m_inf >= -0.05 or rate >= 0:
                    continue
                if m0 / abs(rate) >= 80:
                    continue
                picked += 1
                total += 1
                pred = lab.forget_analysis(run_, x[np.newaxis, :],
                                           np.array([1.0]))[0]
                if pred.is_forgotten and pred.forget_step is not None:
                    flagged += 1
    elapsed = time.monotonic() - start
    assert total == 100
    assert flagged == 100, f"{flagged}/100 forgotten with finite crossing"
    assert rate_gap <= 64.0 * gamma ** 2, f"rate gap {rate_gap:.3e}"
    assert elapsed < 30.0
    print(f"PASS: depth 2-3 deviation {worst:.3f} <= 5%, 100/100 predicted "
          f"forgettings observed, first-step rate within {rate_gap / gamma ** 2:.1f}"
          f"*gamma^2 ({elapsed:.1f}s < 30s)")


def fd_gradient(w: ModelWeights, batch: Batch, kind, h: float = 1e-6) -> np.ndarray:
    base = np.array(w.vector)
    out = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        out[i] = (loss_value(ModelWeights(w.arch, plus), batch, kind)
                  - loss_value(ModelWeights(w.arch, minus), batch, kind)) / (2 * h)
    return out


def test_analytic_gradients_match_finite_differences():
    start = time.monotonic()
    worst = 0.0
    for kind_name in ("squared", "cross_entropy", "distill"):
        rng = np.random.default_rng(sum(map(ord, kind_name)))
        for _ in range(50):
            relu = rng.random() < 0.5
            c = int(rng.integers(2, 5))
            d = int(rng.integers(2, 5))
            if relu:
                arch = Architecture((d, int(rng.integers(3, 7)), c),
                                    activation="relu")
            else:
                arch = Architecture((d, int(rng.integers(2, 5)), c),
                                    activation="identity")
            w = init_weights(arch, int(rng.integers(0, 2 ** 31)))
            b = int(rng.integers(2, 7))
            while True:
                inputs = rng.standard_normal((b, d))
                if not relu:
                    break
                pre = inputs @ w.matrices()[0].T
                if np.abs(pre).min() > 1e-3:
                    break
            labels = rng.integers(0, c, size=b)
            if kind_name == "squared":
                kind = SquaredLoss()
            elif kind_name == "cross_entropy":
                kind = CrossEntropyLoss()
            else:
                kind = DistillLoss(temperature=float(rng.uniform(0.5, 4.0)),
                                   alpha=float(rng.uniform(0.0, 1.0)),
                                   teacher_logits=rng.standard_normal((b, c)))
            batch = Batch(inputs, labels)
            analytic = grad(w, batch, kind)
            numeric = fd_gradient(w, batch, kind)
            err = (np.linalg.norm(analytic - numeric)
                   / max(np.linalg.norm(analytic), 1e-12))
            worst = max(worst, err)
            assert err <= 1e-4, f"{kind_name}: relative error {err:.3e}"
    elapsed = time.monotonic() - start
    assert elapsed < 30.0
    print(f"PASS: gradients match central differences, 3 losses x 50 instances, "
          f"worst relative error {worst:.2e} <= 1e-4 ({elapsed:.1f}s < 30s)")


def test_format_round_trip_and_corruption_handling():
    start = time.monotonic()
    rng = np.random.default_rng(404)
    for _ in range(100):
        log = random_log(rng)
        buf = io.BytesIO()
        write_log(log, buf)
        assert read_log(buf.getvalue()) == log

    base = io.BytesIO()
    write_log(random_log(np.random.default_rng(405)), base)
    blob = base.getvalue()

    def mutated(offset: int, payload: bytes) -> bytes:
        out = bytearray(blob)
        out[offset:offset + len(payload)] = payload
        return bytes(out)

    cases = [
        (mutated(0, b"XXXX"), BadMagicError),
        (mutated(4, struct.pack("<I", 9)), VersionMismatchError),
        (blob[:12], TruncatedFileError),
        (blob[:-2], TruncatedFileError),
        (blob + b"\x00\x00", FormatError),
        (mutated(20, bytes([blob[20] | 0x8])), FormatError),
    ]
    for payload, err in cases:
        with pytest.raises(err):
            read_log(payload)
    elapsed = time.monotonic() - start
    print(f"PASS: 100 round-trips bit-exact, 6 corruption fixtures hit their "
          f"error classes ({elapsed:.1f}s)")


# the capture adapter is a separate component; its fixture file is checked in
# and verified here without importing the component itself
EXPORTER_FIXTURE = DATA_DIR / "exporter_toy.kfpl"
EXPORTER_F_COUNTS = [2, 1, 1, 1, 0]


@pytest.mark.skipif(not EXPORTER_FIXTURE.exists(),
                    reason="capture-adapter fixture not built")
def test_exported_fixture_matches_hand_computed_forgetting():
    log = read_log(EXPORTER_FIXTURE)
    assert log.epochs == 5
    assert log.classes == 10
    report = forget_report(log)
    assert report.f_counts.tolist() == EXPORTER_F_COUNTS
    sums = log.probs.sum(axis=2, dtype=np.float64)
    assert np.abs(sums - 1.0).max() <= 1e-6
    print("PASS: exported 5-epoch fixture validates and reproduces the "
          "hand-computed forget counts")
