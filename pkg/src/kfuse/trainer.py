"""Desk-scale experiment driver.

Synthesizes Gaussian-mixture datasets, injects label noise, trains desk models
with per-epoch checkpointing, and packages the results as prediction logs plus
weight snapshots. Also hosts the two condensing paths: distillation toward a
fused teacher and plan-guided weight averaging.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .fusion import FusionPlan
from .models import (
    Architecture,
    Batch,
    CrossEntropyLoss,
    DistillLoss,
    LossKind,
    ModelWeights,
    SquaredLoss,
    forward,
    init_weights,
    loss_and_grad,
    sgd_step,
    softmax,
)
from .predlog import PredictionLog

NOISE_KINDS = ("none", "symmetric", "asymmetric")
LOSSES = ("cross_entropy", "squared")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the epoch/batch where it happened."""


@dataclass(frozen=True)
class DatasetSpec:
    """Gaussian mixture: class c centred at mean_scale * e_c, isotropic cov_scale**2 I."""

    classes: int
    dimension: int
    mean_scale: float
    cov_scale: float
    train_size: int
    val_size: int
    test_size: int

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.dimension < self.classes:
            raise ValueError(
                f"dimension {self.dimension} < classes {self.classes}: "
                "class means sit on the standard basis, so dimension must cover them")
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cov_scale < 0:
            raise ValueError(f"cov_scale must be >= 0, got {self.cov_scale}")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError(f"noise fraction must be in [0, 1), got {self.fraction}")
        if self.kind == "none" and self.fraction != 0.0:
            raise ValueError("noise kind 'none' requires fraction 0")


@dataclass(frozen=True)
class ModelSpec:
    """Hidden widths between the data dimension and the class count."""

    hidden: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def architecture(self, dimension: int, classes: int) -> Architecture:
        return Architecture(
            layer_sizes=(dimension, *self.hidden, classes),
            activation=self.activation if self.hidden else "identity",
        )


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    model: ModelSpec = field(default_factory=ModelSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    epochs: int = 1
    lr: float = 0.1
    batch_size: int = 128
    loss: str = "cross_entropy"
    lr_step_every: int = 0
    lr_step_factor: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.lr_step_every < 0:
            raise ValueError(f"lr_step_every must be >= 0, got {self.lr_step_every}")
        if not 0.0 < self.lr_step_factor <= 1.0:
            raise ValueError(f"lr_step_factor must be in (0, 1], got {self.lr_step_factor}")
        # touching the architecture here surfaces width/depth violations at config time
        self.model.architecture(self.dataset.dimension, self.dataset.classes)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["model"]["hidden"] = list(self.model.hidden)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        dataset = DatasetSpec(**doc.pop("dataset"))
        model_doc = dict(doc.pop("model", {}))
        if "hidden" in model_doc:
            model_doc["hidden"] = tuple(model_doc["hidden"])
        model = ModelSpec(**model_doc)
        noise = NoiseSpec(**doc.pop("noise", {}))
        return cls(dataset=dataset, model=model, noise=noise, **doc)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        return cls.from_dict(json.loads(path.read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class RunArtifacts:
    config: ExperimentConfig
    train_log: PredictionLog
    val_log: PredictionLog
    test_log: PredictionLog
    snapshots: tuple[ModelWeights, ...]
    noise_mask: np.ndarray


def make_gaussian_mixture(spec: DatasetSpec, rng: np.random.Generator,
                          size: int) -> tuple[np.ndarray, np.ndarray]:
    """One split: labels uniform over classes, inputs = mean_scale*e_label + cov_scale*N(0,I)."""
    labels = rng.integers(0, spec.classes, size=size)
    inputs = spec.cov_scale * rng.standard_normal((size, spec.dimension))
    inputs[np.arange(size), labels] += spec.mean_scale
    return inputs, labels.astype(np.int64)


def inject_noise(labels: np.ndarray, kind: str, p: float, classes: int,
                 seed: int | np.random.SeedSequence) -> tuple[np.ndarray, np.ndarray]:
    """Flip exactly floor(p*N) labels; returns (new labels, changed-entry mask)."""
    labels = np.asarray(labels, dtype=np.int64)
    if kind not in NOISE_KINDS:
        raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {kind!r}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"noise fraction must be in [0, 1), got {p}")
    mask = np.zeros(labels.shape[0], dtype=bool)
    if kind == "none" or p == 0.0:
        return labels.copy(), mask
    if classes < 2:
        raise ValueError(f"label noise needs at least 2 classes, got {classes}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError("labels out of range for the given class count")
    rng = np.random.default_rng(seed)
    flips = int(np.floor(p * labels.shape[0]))
    chosen = rng.choice(labels.shape[0], size=flips, replace=False)
    noisy = labels.copy()
    if kind == "symmetric":
        # uniform over the classes other than the original label
        draw = rng.integers(0, classes - 1, size=flips)
        draw = draw + (draw >= labels[chosen])
        noisy[chosen] = draw
    else:
        noisy[chosen] = (labels[chosen] + 1) % classes
    mask[chosen] = True
    return noisy, mask


def _loss_kind_for(name: str) -> LossKind:
    return CrossEntropyLoss() if name == "cross_entropy" else SquaredLoss()


def train_model(
    inputs: np.ndarray,
    labels: np.ndarray,
    arch: Architecture,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int | np.random.SeedSequence,
    lr_step_every: int = 0,
    lr_step_factor: float = 1.0,
    loss_for_batch: Callable[[np.ndarray], LossKind] | None = None,
    keep_snapshots: bool = True,
) -> list[ModelWeights]:
    """Minibatch SGD; returns the post-epoch snapshots (or just the final one).

    `loss_for_batch` maps the index array of a minibatch to its loss kind, so a
    distillation caller can slice per-example teacher targets; default is plain
    cross-entropy. The RNG stream depends only on `seed`, never on the loss, so
    two runs differing only in loss see identical init and batch order.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if loss_for_batch is None:
        ce = CrossEntropyLoss()
        loss_for_batch = lambda idx: ce
    seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_seq, shuffle_seq = seed_seq.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    w = init_weights(arch, init_seq)
    n = inputs.shape[0]
    snapshots: list[ModelWeights] = []
    for epoch in range(epochs):
        lr_now = lr * lr_step_factor ** (epoch // lr_step_every) if lr_step_every else lr
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            loss, g = loss_and_grad(w, Batch(inputs[idx], labels[idx]), loss_for_batch(idx))
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {start // batch_size} "
                    f"(lr={lr_now}); lower the learning rate")
            w = sgd_step(w, g, lr_now)
        if keep_snapshots or epoch == epochs - 1:
            snapshots.append(w)
    return snapshots


def predict_probs(w: ModelWeights, inputs: np.ndarray) -> np.ndarray:
    """Softmax class probabilities, float64."""
    return softmax(forward(w, inputs))


def log_from_snapshots(snapshots: Sequence[ModelWeights], inputs: np.ndarray,
                       labels: np.ndarray, split_tag: str,
                       noise_mask: np.ndarray | None = None) -> PredictionLog:
    probs = np.stack([predict_probs(w, inputs) for w in snapshots]).astype(np.float32)
    return PredictionLog(probs=probs, labels=labels, split_tag=split_tag,
                         noise_mask=noise_mask)


def run(cfg: ExperimentConfig) -> RunArtifacts:
    """Full experiment: synthesize, corrupt, train, and log every epoch on all splits."""
    root = np.random.SeedSequence(cfg.seed)
    data_seq, noise_seq, train_seq = root.spawn(3)
    data_rng = np.random.default_rng(data_seq)
    spec = cfg.dataset
    train_x, train_y_clean = make_gaussian_mixture(spec, data_rng, spec.train_size)
    val_x, val_y = make_gaussian_mixture(spec, data_rng, spec.val_size)
    test_x, test_y = make_gaussian_mixture(spec, data_rng, spec.test_size)
    train_y, mask = inject_noise(train_y_clean, cfg.noise.kind, cfg.noise.fraction,
                                 spec.classes, noise_seq)
    arch = cfg.model.architecture(spec.dimension, spec.classes)
    kind = _loss_kind_for(cfg.loss)
    snapshots = train_model(
        train_x, train_y, arch,
        epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=train_seq,
        lr_step_every=cfg.lr_step_every, lr_step_factor=cfg.lr_step_factor,
        loss_for_batch=lambda idx: kind)
    log_mask = mask if cfg.noise.kind != "none" else None
    return RunArtifacts(
        config=cfg,
        train_log=log_from_snapshots(snapshots, train_x, train_y, "train", log_mask),
        val_log=log_from_snapshots(snapshots, val_x, val_y, "validation"),
        test_log=log_from_snapshots(snapshots, test_x, test_y, "test"),
        snapshots=tuple(snapshots),
        noise_mask=mask,
    )


def distill(
    inputs: np.ndarray,
    labels: np.ndarray,
    teacher_probs: np.ndarray,
    arch: Architecture,
    *,
    epochs: int,
    lr: float,
    batch_size: int = 128,
    temperature: float = 2.5,
    alpha: float = 0.9,
    seed: int | np.random.SeedSequence = 0,
    lr_step_every: int = 0,
    lr_step_factor: float = 1.0,
) -> ModelWeights:
    """Train a fresh student against per-example teacher probabilities.

    At alpha=0 this degenerates to plain cross-entropy training and, for equal
    seed, reproduces its weights exactly.
    """
    teacher = np.asarray(teacher_probs, dtype=np.float64)
    if teacher.shape != (np.asarray(inputs).shape[0], arch.out_width):
        raise ValueError(
            f"teacher probabilities {teacher.shape} do not cover the student's "
            f"training set ({np.asarray(inputs).shape[0]}, {arch.out_width})")
    snapshots = train_model(
        inputs, labels, arch,
        epochs=epochs, lr=lr, batch_size=batch_size, seed=seed,
        lr_step_every=lr_step_every, lr_step_factor=lr_step_factor,
        loss_for_batch=lambda idx: DistillLoss(
            temperature=temperature, alpha=alpha, teacher_probs=teacher[idx]),
        keep_snapshots=False)
    return snapshots[-1]


def average_weights(snapshots: Sequence[ModelWeights], plan: FusionPlan) -> ModelWeights:
    """Blend weight snapshots along a fusion plan: w <- eps*window_mean + (1-eps)*w."""
    if not snapshots:
        raise ValueError("no snapshots to average")
    arch = snapshots[0].arch
    for w in snapshots[1:]:
        if w.arch != arch:
            raise ValueError("snapshots have mismatched architectures")
    total = len(snapshots)

    def clamp(epoch: int) -> int:
        return min(max(epoch, 0), total - 1)

    def window_mean(epoch: int) -> np.ndarray:
        lo = max(epoch - plan.window, 0)
        hi = min(epoch + plan.window, total - 1)
        return np.mean([snapshots[e].vector for e in range(lo, hi + 1)], axis=0)

    vec = snapshots[clamp(plan.reference_epoch)].vector.copy()
    for alt, eps in zip(plan.alternative_epochs, plan.epsilons):
        vec = eps * window_mean(clamp(alt)) + (1.0 - eps) * vec
    return ModelWeights(arch=arch, vector=vec)
