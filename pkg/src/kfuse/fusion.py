"""Checkpoint fusion: validation-driven plan fitting, fused prediction, ensemble baselines."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .predlog import PredictionLog, correctness


@dataclass(frozen=True)
class FusionPlan:
    """Selected alternative epochs with blend weights, applied around a reference model.

    Prediction starts from the reference epoch's probabilities; each pair
    (epoch, epsilon) blends in the window-averaged checkpoint probabilities
    around that epoch.
    """

    reference_epoch: int
    window: int
    alternative_epochs: tuple[int, ...]
    epsilons: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.window < 0:
            raise ValueError(f"window must be >= 0, got {self.window}")
        if len(self.alternative_epochs) != len(self.epsilons):
            raise ValueError("alternative_epochs and epsilons must have equal length")
        for eps in self.epsilons:
            if not 0.0 <= eps <= 1.0:
                raise ValueError(f"epsilon {eps} outside [0, 1]")
        epochs = sorted(self.alternative_epochs)
        for a, b in zip(epochs, epochs[1:]):
            if b - a < 2:
                raise ValueError(f"selected epochs {a} and {b} are less than 2 apart")

    def to_json(self) -> str:
        doc = {
            "reference_epoch": self.reference_epoch,
            "window": self.window,
            "pairs": [{"epoch": int(a), "epsilon": float(e)}
                      for a, e in zip(self.alternative_epochs, self.epsilons)],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FusionPlan":
        doc = json.loads(text)
        pairs = doc.get("pairs", [])
        return cls(
            reference_epoch=int(doc["reference_epoch"]),
            window=int(doc["window"]),
            alternative_epochs=tuple(int(p["epoch"]) for p in pairs),
            epsilons=tuple(float(p["epsilon"]) for p in pairs),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FusionPlan":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class FusedProbs:
    """Blended class probabilities, one row per example."""

    probs: np.ndarray

    def validate(self, tol: float = 1e-6) -> None:
        sums = self.probs.sum(axis=1)
        worst = float(np.abs(sums - 1.0).max())
        if worst > tol or self.probs.min() < -tol:
            raise ValueError(f"fused rows off the simplex by {worst:.3g} (tol {tol})")


def accuracy_of(probs: np.ndarray, labels: np.ndarray) -> float:
    """Argmax accuracy; ties break toward the lowest class index."""
    return float(np.mean(np.argmax(probs, axis=1) == labels.astype(np.int64)))


def epoch_accuracies(log: PredictionLog) -> np.ndarray:
    """Per-epoch argmax accuracy of a log."""
    return correctness(log).bits.mean(axis=1)


def best_epoch(log: PredictionLog) -> int:
    """Early-stopping choice: the epoch with best accuracy, ties toward the earliest."""
    return int(np.argmax(epoch_accuracies(log)))


def _window_mean(probs: np.ndarray, epoch: int, window: int) -> np.ndarray:
    lo = max(epoch - window, 0)
    hi = min(epoch + window, probs.shape[0] - 1)
    return probs[lo:hi + 1].mean(axis=0)


def _epsilon_grid(step: float) -> np.ndarray:
    if not 0.0 < step <= 1.0:
        raise ValueError(f"eps_grid_step must be in (0, 1], got {step}")
    count = int(np.ceil(1.0 / step - 1e-9))
    grid = np.minimum(np.arange(count + 1) * step, 1.0)
    if grid[-1] < 1.0:
        grid = np.append(grid, 1.0)
    return grid


def fit_plan(
    val_log: PredictionLog,
    window: int = 1,
    eps_grid_step: float = 0.01,
    max_rounds: int = 20,
    reference_epoch: int | None = None,
    zero_eps_patience: int = 3,
) -> FusionPlan:
    """Iteratively select alternative epochs and blend weights on validation data.

    Each round scores every checkpoint by the fraction of validation points it
    gets right while the current fused predictor gets them wrong, picks the
    argmax over the remaining explore set (ties toward the earliest epoch),
    drops that epoch and its +-1 neighbors from the explore set, and
    grid-searches the blend weight, keeping the weight with the best validation
    accuracy (ties prefer the larger weight). A round can only be accepted at
    accuracy >= the current predictor's, so the fused predictor never falls
    below the reference model. Rounds stop when the explore set is empty,
    max_rounds is hit, or zero_eps_patience consecutive rounds declined to
    blend (epsilon 0 cannot change later rounds' predictions).

    reference_epoch defaults to the best-validation-accuracy epoch, the same
    early-stopping choice used for the baseline model it is compared against.
    """
    e_total = val_log.epochs
    if e_total < 2:
        raise ValueError(f"need at least 2 epochs to fit a fusion plan, got {e_total}")
    if window < 0:
        raise ValueError(f"window must be >= 0, got {window}")
    grid = _epsilon_grid(eps_grid_step)
    probs_all = val_log.probs.astype(np.float64)
    labels = val_log.labels.astype(np.int64)
    ckpt_correct = correctness(val_log).bits

    reference = best_epoch(val_log) if reference_epoch is None else int(reference_epoch)
    if not 0 <= reference < e_total:
        raise ValueError(f"reference epoch {reference} out of range for {e_total} epochs")

    prob = probs_all[reference].copy()
    best_acc = accuracy_of(prob, labels)
    explore = np.ones(e_total, dtype=bool)
    alts: list[int] = []
    epsilons: list[float] = []
    zero_streak = 0

    while explore.any() and len(alts) < max_rounds and zero_streak < zero_eps_patience:
        fused_wrong = np.argmax(prob, axis=1) != labels
        forget = (ckpt_correct & fused_wrong).mean(axis=1)
        forget[~explore] = -np.inf
        alt = int(np.argmax(forget))
        alts.append(alt)
        explore[max(alt - 1, 0):min(alt + 1, e_total - 1) + 1] = False

        prob_alt = _window_mean(probs_all, alt, window)
        best_eps = 0.0
        best_prob = prob
        for eps in grid:
            combined = eps * prob_alt + (1.0 - eps) * prob
            acc = accuracy_of(combined, labels)
            if acc >= best_acc:
                best_acc = acc
                best_eps = float(eps)
                best_prob = combined
        prob = best_prob
        epsilons.append(best_eps)
        zero_streak = zero_streak + 1 if best_eps == 0.0 else 0

    return FusionPlan(reference_epoch=reference, window=window,
                      alternative_epochs=tuple(alts), epsilons=tuple(epsilons))


def fuse(plan: FusionPlan, log: PredictionLog, clamp: bool = True) -> FusedProbs:
    """Apply a fusion plan to a log: sequential convex blends of window-averaged checkpoints."""
    e_total = log.epochs

    def resolve(epoch: int) -> int:
        if 0 <= epoch < e_total:
            return epoch
        if clamp:
            return min(max(epoch, 0), e_total - 1)
        raise ValueError(f"epoch {epoch} out of range for {e_total} epochs and clamping disabled")

    probs_all = log.probs.astype(np.float64)
    prob = probs_all[resolve(plan.reference_epoch)].copy()
    for alt, eps in zip(plan.alternative_epochs, plan.epsilons):
        prob_alt = _window_mean(probs_all, resolve(alt), plan.window)
        prob = eps * prob_alt + (1.0 - eps) * prob
    return FusedProbs(probs=prob)


def horizontal_ensemble(log: PredictionLog, count: int) -> FusedProbs:
    """Uniform probability average of the last `count` epochs."""
    if not 1 <= count <= log.epochs:
        raise ValueError(f"count must be in [1, {log.epochs}], got {count}")
    probs = log.probs.astype(np.float64)
    return FusedProbs(probs=probs[log.epochs - count:].mean(axis=0))


def fixed_jumps_ensemble(log: PredictionLog, count: int) -> FusedProbs:
    """Uniform probability average of `count` equally spaced epochs, last epoch included."""
    if not 1 <= count <= log.epochs:
        raise ValueError(f"count must be in [1, {log.epochs}], got {count}")
    e_total = log.epochs
    if count == 1:
        idx = [e_total - 1]
    else:
        # round-half-up keeps the schedule deterministic across platforms
        idx = [int(np.floor(j * (e_total - 1) / (count - 1) + 0.5)) for j in range(count)]
    probs = log.probs.astype(np.float64)
    return FusedProbs(probs=probs[idx].mean(axis=0))


def fused_checkpoint_count(plan: FusionPlan, total_epochs: int) -> int:
    """Number of distinct checkpoints the fused predictor actually consults."""
    used = {min(max(plan.reference_epoch, 0), total_epochs - 1)}
    for alt, eps in zip(plan.alternative_epochs, plan.epsilons):
        if eps > 0.0:
            a = min(max(alt, 0), total_epochs - 1)
            lo = max(a - plan.window, 0)
            hi = min(a + plan.window, total_epochs - 1)
            used.update(range(lo, hi + 1))
    return len(used)
