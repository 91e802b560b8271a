"""Local-overfitting scores: forget/learn curves, forget times, large-loss noise counts."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .predlog import LogValidationError, PredictionLog, correctness


@dataclass(frozen=True)
class ForgetReport:
    """Per-epoch forget/learn fractions against a reference epoch.

    f_curve[e] is the fraction of examples correct at epoch e but wrong at the
    reference epoch; l_curve[e] the reverse. Counts are kept alongside the
    normalized curves so the accuracy identity can be checked exactly in
    integer arithmetic. forget_time[i] is the last epoch at which a
    finally-wrong example was still correct, -1 when absent.
    """

    reference_epoch: int
    examples: int
    f_counts: np.ndarray
    l_counts: np.ndarray
    correct_counts: np.ndarray
    f_curve: np.ndarray
    l_curve: np.ndarray
    acc_curve: np.ndarray
    forget_time: np.ndarray
    argmax_forget_epoch: int


@dataclass(frozen=True)
class NoiseLossReport:
    """Per-epoch counts of clean/noisy training examples with loss above a threshold."""

    threshold: float
    clean_counts: np.ndarray
    noisy_counts: np.ndarray
    diff: np.ndarray  # clean minus noisy


def _resolve_reference(log: PredictionLog, reference_epoch: int | None) -> int:
    ref = log.epochs - 1 if reference_epoch is None else int(reference_epoch)
    if not 0 <= ref < log.epochs:
        raise ValueError(f"reference epoch {ref} out of range for {log.epochs} epochs")
    return ref


def forget_report(log: PredictionLog, reference_epoch: int | None = None) -> ForgetReport:
    """Compute forget/learn/accuracy curves against the reference epoch (default: last)."""
    ref = _resolve_reference(log, reference_epoch)
    bits = correctness(log).bits
    ref_bits = bits[ref]
    f_counts = (bits & ~ref_bits).sum(axis=1)
    l_counts = (~bits & ref_bits).sum(axis=1)
    correct_counts = bits.sum(axis=1)
    n = log.examples
    f_curve = f_counts / n
    return ForgetReport(
        reference_epoch=ref,
        examples=n,
        f_counts=f_counts,
        l_counts=l_counts,
        correct_counts=correct_counts,
        f_curve=f_curve,
        l_curve=l_counts / n,
        acc_curve=correct_counts / n,
        forget_time=forget_times(log, ref),
        # ties toward the earliest epoch: np.argmax returns the first maximizer
        argmax_forget_epoch=int(np.argmax(f_curve)),
    )


def forget_times(log: PredictionLog, reference_epoch: int | None = None) -> np.ndarray:
    """Last epoch each finally-wrong example was classified correctly; -1 where absent.

    Defined only for examples wrong at the reference epoch; examples correct
    there, or never correct at all, carry the absent marker.
    """
    ref = _resolve_reference(log, reference_epoch)
    bits = correctness(log).bits
    e = log.epochs
    ever_correct = bits.any(axis=0)
    # first True in the reversed epoch order = last correct epoch
    last_correct = e - 1 - np.argmax(bits[::-1], axis=0)
    times = np.where(~bits[ref] & ever_correct, last_correct, -1)
    return times.astype(np.int64)


def noise_loss_counts(log: PredictionLog, threshold: float | None = None) -> NoiseLossReport:
    """Count examples whose cross-entropy loss exceeds the threshold, split by noise mask.

    The default threshold ln(C) marks predictions worse than uniform guessing.
    """
    if log.noise_mask is None:
        raise LogValidationError("noise_loss_counts requires a log with a noise_mask")
    thr = float(np.log(log.classes)) if threshold is None else float(threshold)
    if not thr > 0:
        raise ValueError(f"threshold must be positive, got {thr}")
    p_label = np.take_along_axis(
        log.probs.astype(np.float64),
        log.labels.astype(np.int64)[np.newaxis, :, np.newaxis],
        axis=2,
    )[:, :, 0]
    with np.errstate(divide="ignore"):
        loss = -np.log(p_label)
    large = loss > thr
    mask = log.noise_mask
    clean = large[:, ~mask].sum(axis=1)
    noisy = large[:, mask].sum(axis=1)
    return NoiseLossReport(threshold=thr, clean_counts=clean,
                           noisy_counts=noisy, diff=clean - noisy)


def write_curves_csv(report: ForgetReport, path: str | Path) -> None:
    """Emit "epoch,acc,F,L" rows, one per epoch, 0-based."""
    lines = ["epoch,acc,F,L"]
    for e in range(len(report.acc_curve)):
        lines.append(f"{e},{report.acc_curve[e]:.10g},"
                     f"{report.f_curve[e]:.10g},{report.l_curve[e]:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_forget_times_csv(report: ForgetReport, path: str | Path) -> None:
    """Emit "example,forget_time" rows for examples that have a forget time."""
    lines = ["example,forget_time"]
    for i, t in enumerate(report.forget_time):
        if t >= 0:
            lines.append(f"{i},{t}")
    Path(path).write_text("\n".join(lines) + "\n")
