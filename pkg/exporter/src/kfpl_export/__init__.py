"""Capture per-epoch class probabilities from a training loop and write KFPL files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

MAGIC = b"KFPL"
VERSION = 1
SPLITS = ("train", "validation", "test")
ROW_SUM_TOL = 1e-4

_HEADER = struct.Struct("<4s5I")


@dataclass
class CaptureSession:
    """Accumulates one run's per-epoch probabilities for a single output file."""

    path: Path
    split: str
    n_examples: int
    n_classes: int
    labels: np.ndarray | None = None
    epochs: list[np.ndarray] = field(default_factory=list)
    finalized: bool = False


def begin(path: str | Path, split: str, n_examples: int, n_classes: int) -> CaptureSession:
    """Open a capture session for a run over a fixed set of examples."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if n_examples < 1:
        raise ValueError("n_examples must be positive")
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    return CaptureSession(path=Path(path), split=split, n_examples=n_examples, n_classes=n_classes)


def append_epoch(session: CaptureSession, probs: np.ndarray, labels: np.ndarray | None = None) -> None:
    """Record one epoch of per-example class probabilities, plus labels on the first call."""
    if session.finalized:
        raise ValueError("session is already finalized")
    arr = np.asarray(probs, dtype=np.float64)
    expected = (session.n_examples, session.n_classes)
    if arr.shape != expected:
        raise ValueError(f"shape drift: epoch {len(session.epochs)} has shape {arr.shape}, session expects {expected}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("probabilities must be finite")
    if session.labels is None:
        if labels is None:
            raise ValueError("labels are required on the first epoch")
        session.labels = _check_labels(labels, session.n_examples, session.n_classes)
    elif labels is not None:
        raise ValueError("labels were already supplied on the first epoch")
    session.epochs.append(_normalize_rows(arr))


def finalize(session: CaptureSession) -> Path:
    """Write the accumulated epochs to the session path and close the session."""
    if session.finalized:
        raise ValueError("session is already finalized")
    if not session.epochs:
        raise ValueError("cannot finalize a session with zero epochs")
    assert session.labels is not None
    n_epochs = len(session.epochs)
    flags = SPLITS.index(session.split) << 1  # bit 0 (noise mask) stays clear
    header = _HEADER.pack(MAGIC, VERSION, n_epochs, session.n_examples, session.n_classes, flags)
    stacked = np.stack(session.epochs).astype("<f4")
    with open(session.path, "wb") as fh:
        fh.write(header)
        fh.write(session.labels.astype("<u4").tobytes())
        fh.write(stacked.tobytes())
    session.finalized = True
    return session.path


def epoch_callback(session: CaptureSession, get_probs: Callable[[], np.ndarray],
                   get_labels: Callable[[], np.ndarray] | None = None) -> Callable[..., None]:
    """Wrap a session as an epoch-end hook; extra callback arguments are ignored."""
    def hook(*_args: object, **_kwargs: object) -> None:
        labels = None
        if session.labels is None and get_labels is not None:
            labels = get_labels()
        append_epoch(session, get_probs(), labels)
    return hook


def _check_labels(labels: np.ndarray, n_examples: int, n_classes: int) -> np.ndarray:
    out = np.asarray(labels)
    if out.shape != (n_examples,):
        raise ValueError(f"labels must have shape ({n_examples},), got {out.shape}")
    if not np.issubdtype(out.dtype, np.integer):
        raise ValueError("labels must be integers")
    if out.min() < 0 or out.max() >= n_classes:
        raise ValueError("labels must lie in [0, n_classes)")
    return out.astype(np.uint32)


def _normalize_rows(arr: np.ndarray) -> np.ndarray:
    """Pass probability rows through rescaled; softmax anything else as logits."""
    sums = arr.sum(axis=1)
    if np.all(arr >= 0.0) and np.all(np.abs(sums - 1.0) <= ROW_SUM_TOL):
        return arr / sums[:, None]
    shifted = arr - arr.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)
