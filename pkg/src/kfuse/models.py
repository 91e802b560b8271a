"""Desk-scale linear stacks and one-hidden-layer MLPs with hand-derived gradients.

Float64 throughout; weights are flat vectors paired with an architecture
descriptor so checkpoints can be averaged, EMA-blended, and serialized.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("identity", "relu")
MAX_LAYERS = 5
MAX_UNITS = 512


@dataclass(frozen=True)
class Architecture:
    """Layer widths plus the activation applied between layers (never after the last)."""

    layer_sizes: tuple[int, ...]
    activation: str = "identity"

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output width")
        if len(sizes) - 1 > MAX_LAYERS:
            raise ValueError(f"at most {MAX_LAYERS} layers, got {len(sizes) - 1}")
        if any(s < 1 or s > MAX_UNITS for s in sizes):
            raise ValueError(f"layer widths must be in [1, {MAX_UNITS}], got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_width(self) -> int:
        return self.layer_sizes[-1]

    def param_count(self) -> int:
        return sum(o * i for i, o in zip(self.layer_sizes, self.layer_sizes[1:]))


@dataclass(frozen=True)
class ModelWeights:
    """Immutable flat float64 parameter vector for an Architecture."""

    arch: Architecture
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.ascontiguousarray(self.vector, dtype=np.float64)
        if vec.shape != (self.arch.param_count(),):
            raise ValueError(
                f"parameter vector has {vec.shape}, expected ({self.arch.param_count()},)")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    def matrices(self) -> list[np.ndarray]:
        """Per-layer weight matrices W_l with shape [out, in], views into the flat vector."""
        mats = []
        offset = 0
        for fan_in, fan_out in zip(self.arch.layer_sizes, self.arch.layer_sizes[1:]):
            mats.append(self.vector[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in))
            offset += fan_out * fan_in
        return mats


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ValueError(f"inputs must be [B, d] with B >= 1, got {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ValueError(f"labels must have shape ({inputs.shape[0]},), got {labels.shape}")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class SquaredLoss:
    """Mean squared error against +-1 targets (single output) or one-hot targets."""


@dataclass(frozen=True)
class CrossEntropyLoss:
    """Mean softmax cross-entropy against integer labels."""


@dataclass(frozen=True)
class DistillLoss:
    """alpha * T^2 * KL(teacher_T || student_T) + (1 - alpha) * cross-entropy.

    The teacher enters either as logits or as probabilities; probabilities are
    tempered through their log, so a teacher that exists only as a fused
    probability table still yields a well-defined soft target.
    """

    temperature: float
    alpha: float
    teacher_logits: np.ndarray | None = None
    teacher_probs: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if (self.teacher_logits is None) == (self.teacher_probs is None):
            raise ValueError("exactly one of teacher_logits / teacher_probs must be given")

    def tempered_teacher(self) -> np.ndarray:
        if self.teacher_logits is not None:
            return softmax(self.teacher_logits / self.temperature)
        logs = np.log(np.maximum(np.asarray(self.teacher_probs, dtype=np.float64), 1e-300))
        return softmax(logs / self.temperature)


LossKind = SquaredLoss | CrossEntropyLoss | DistillLoss


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=1, keepdims=True)


def init_weights(arch: Architecture, seed: int) -> ModelWeights:
    """Glorot-uniform init: entries i.i.d. uniform in [-a, a], a = sqrt(6/(fan_in+fan_out))."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(arch.layer_sizes, arch.layer_sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-a, a, size=fan_out * fan_in))
    return ModelWeights(arch=arch, vector=np.concatenate(chunks))


def weights_from_matrices(arch: Architecture, mats: list[np.ndarray]) -> ModelWeights:
    return ModelWeights(arch=arch, vector=np.concatenate([np.ravel(m) for m in mats]))


def forward(w: ModelWeights, inputs: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs."""
    logits, _, _ = _forward_trace(w, inputs)
    return logits


def _forward_trace(w: ModelWeights, inputs: np.ndarray):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.arch.in_width:
        raise ValueError(f"inputs must be [B, {w.arch.in_width}], got {x.shape}")
    mats = w.matrices()
    hiddens = [x]          # activations entering each layer
    pre_acts = []          # pre-activation of each non-final layer
    h = x
    for l, mat in enumerate(mats):
        z = h @ mat.T
        if l < len(mats) - 1:
            pre_acts.append(z)
            h = np.maximum(z, 0.0) if w.arch.activation == "relu" else z
            hiddens.append(h)
        else:
            return z, pre_acts, hiddens
    raise AssertionError("unreachable")


def _output_grad(logits: np.ndarray, batch: Batch, kind: LossKind) -> tuple[float, np.ndarray]:
    """Loss value and dLoss/dlogits for one batch."""
    b = logits.shape[0]
    if isinstance(kind, SquaredLoss):
        targets = _squared_targets(logits.shape[1], batch.labels)
        resid = logits - targets
        return float(np.mean(np.sum(resid ** 2, axis=1))), (2.0 / b) * resid
    if isinstance(kind, CrossEntropyLoss):
        return _cross_entropy(logits, batch.labels)
    if isinstance(kind, DistillLoss):
        loss = 0.0
        dz = np.zeros_like(logits)
        if kind.alpha > 0.0:
            t = kind.temperature
            q = kind.tempered_teacher()
            if q.shape != logits.shape:
                raise ValueError(f"teacher targets {q.shape} do not match logits {logits.shape}")
            p_s = softmax(logits / t)
            log_q = np.log(np.maximum(q, 1e-300))
            log_p = np.log(np.maximum(p_s, 1e-300))
            kl = np.sum(q * (log_q - log_p), axis=1)
            loss += kind.alpha * t * t * float(np.mean(kl))
            dz += kind.alpha * (t / b) * (p_s - q)
        if kind.alpha < 1.0:
            ce_loss, ce_grad = _cross_entropy(logits, batch.labels)
            loss += (1.0 - kind.alpha) * ce_loss
            dz += (1.0 - kind.alpha) * ce_grad
        return loss, dz
    raise TypeError(f"unknown loss kind {kind!r}")


def _squared_targets(out_width: int, labels: np.ndarray) -> np.ndarray:
    if out_width == 1:
        # binary linear case: targets are +-1
        return (2.0 * labels - 1.0)[:, np.newaxis]
    if int(labels.max()) >= out_width:
        raise ValueError(f"label {int(labels.max())} out of range for {out_width} outputs")
    return np.eye(out_width)[labels]


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    if logits.shape[1] < 2:
        raise ValueError("cross-entropy needs at least 2 output classes")
    if int(labels.max()) >= logits.shape[1]:
        raise ValueError(f"label {int(labels.max())} out of range for {logits.shape[1]} outputs")
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    log_p = shifted - log_z[:, np.newaxis]
    loss = float(np.mean(-log_p[np.arange(b), labels]))
    p = np.exp(log_p)
    p[np.arange(b), labels] -= 1.0
    return loss, p / b


def loss_and_grad(w: ModelWeights, batch: Batch, kind: LossKind) -> tuple[float, np.ndarray]:
    """Exact analytic loss and flat gradient via backprop through the layer stack."""
    logits, pre_acts, hiddens = _forward_trace(w, batch.inputs)
    loss, g = _output_grad(logits, batch, kind)
    mats = w.matrices()
    grads: list[np.ndarray] = [np.empty(0)] * len(mats)
    for l in range(len(mats) - 1, -1, -1):
        grads[l] = g.T @ hiddens[l]
        if l > 0:
            g = g @ mats[l]
            if w.arch.activation == "relu":
                g = g * (pre_acts[l - 1] > 0.0)
    return loss, np.concatenate([np.ravel(gm) for gm in grads])


def loss_value(w: ModelWeights, batch: Batch, kind: LossKind) -> float:
    return loss_and_grad(w, batch, kind)[0]


def grad(w: ModelWeights, batch: Batch, kind: LossKind) -> np.ndarray:
    return loss_and_grad(w, batch, kind)[1]


def sgd_step(w: ModelWeights, gradient: np.ndarray, lr: float) -> ModelWeights:
    if gradient.shape != w.vector.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match {w.vector.shape}")
    return ModelWeights(arch=w.arch, vector=w.vector - lr * gradient)


def ema_update(ema_w: ModelWeights, w: ModelWeights, decay: float) -> ModelWeights:
    if ema_w.arch != w.arch:
        raise ValueError("EMA blend requires identical architectures")
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    return ModelWeights(arch=w.arch, vector=decay * ema_w.vector + (1.0 - decay) * w.vector)


def save_weights(w: ModelWeights, path: str | Path) -> None:
    """Descriptor JSON (length-prefixed) followed by the raw little-endian float64 vector."""
    desc = json.dumps(
        {"layer_sizes": list(w.arch.layer_sizes), "activation": w.arch.activation},
        sort_keys=True, separators=(",", ":")).encode()
    blob = struct.pack("<I", len(desc)) + desc + w.vector.astype("<f8").tobytes()
    Path(path).write_bytes(blob)


def load_weights(path: str | Path) -> ModelWeights:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise ValueError(f"weights file {path} too short")
    (desc_len,) = struct.unpack_from("<I", blob)
    desc = json.loads(blob[4:4 + desc_len].decode())
    arch = Architecture(layer_sizes=tuple(desc["layer_sizes"]), activation=desc["activation"])
    vector = np.frombuffer(blob, dtype="<f8", offset=4 + desc_len)
    if vector.shape[0] != arch.param_count():
        raise ValueError(
            f"weights file {path} holds {vector.shape[0]} parameters, "
            f"descriptor implies {arch.param_count()}")
    return ModelWeights(arch=arch, vector=vector)
