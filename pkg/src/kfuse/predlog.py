"""Prediction-log data model and the KFPL binary interchange format."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"KFPL"
VERSION = 1
SPLIT_TAGS = ("train", "validation", "test")
SIMPLEX_TOL = 1e-4

FLAG_NOISE_MASK = 0x1
_SPLIT_SHIFT = 1
_SPLIT_MASK = 0x3
_KNOWN_FLAGS = FLAG_NOISE_MASK | (_SPLIT_MASK << _SPLIT_SHIFT)

# magic | version u32 | E u32 | N u32 | C u32 | flags u32, little-endian
_HEADER = struct.Struct("<4s5I")


class LogValidationError(ValueError):
    """A prediction log violates its invariants (simplex, label range, mask shape)."""


class FormatError(ValueError):
    """A KFPL byte stream is structurally invalid."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


@dataclass(frozen=True, eq=False)
class PredictionLog:
    """Per-epoch class probabilities with labels; the interchange currency of the toolkit.

    probs is float32 [E, N, C]; every row must lie on the probability simplex
    within SIMPLEX_TOL. labels is uint32 [N]. noise_mask, when present, marks
    examples whose label was corrupted.
    """

    probs: np.ndarray
    labels: np.ndarray
    split_tag: str = "test"
    noise_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        mask = self.noise_mask
        if mask is not None:
            mask = np.ascontiguousarray(mask, dtype=bool)
        _validate(probs, labels, mask, self.split_tag)
        for arr in (probs, labels, mask):
            if arr is not None:
                arr.flags.writeable = False
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "noise_mask", mask)

    @property
    def epochs(self) -> int:
        return self.probs.shape[0]

    @property
    def examples(self) -> int:
        return self.probs.shape[1]

    @property
    def classes(self) -> int:
        return self.probs.shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PredictionLog):
            return NotImplemented
        if self.split_tag != other.split_tag:
            return False
        if not (np.array_equal(self.probs, other.probs)
                and np.array_equal(self.labels, other.labels)):
            return False
        if (self.noise_mask is None) != (other.noise_mask is None):
            return False
        return self.noise_mask is None or np.array_equal(self.noise_mask, other.noise_mask)


@dataclass(frozen=True)
class CorrectnessMatrix:
    """bits[e, i] is True iff the epoch-e argmax prediction equals labels[i]."""

    bits: np.ndarray


def _validate(probs: np.ndarray, labels: np.ndarray,
              mask: np.ndarray | None, split_tag: str) -> None:
    if probs.ndim != 3:
        raise LogValidationError(f"probs must be [E, N, C], got shape {probs.shape}")
    e, n, c = probs.shape
    if e < 1 or n < 1:
        raise LogValidationError(f"need at least one epoch and one example, got E={e}, N={n}")
    if c < 2:
        raise LogValidationError(f"need at least two classes, got C={c}")
    if split_tag not in SPLIT_TAGS:
        raise LogValidationError(f"split_tag must be one of {SPLIT_TAGS}, got {split_tag!r}")
    if not np.isfinite(probs).all():
        raise LogValidationError("probs contains non-finite entries")
    if probs.min() < 0.0 or probs.max() > 1.0 + SIMPLEX_TOL:
        raise LogValidationError("probs entries must lie in [0, 1]")
    sums = probs.sum(axis=2, dtype=np.float64)
    worst = float(np.abs(sums - 1.0).max())
    if worst > SIMPLEX_TOL:
        raise LogValidationError(
            f"probability rows must sum to 1 within {SIMPLEX_TOL}, worst deviation {worst:.3g}")
    if labels.shape != (n,):
        raise LogValidationError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and int(labels.max()) >= c:
        raise LogValidationError(f"labels must be < C={c}, got max {int(labels.max())}")
    if mask is not None and mask.shape != (n,):
        raise LogValidationError(f"noise_mask must have shape ({n},), got {mask.shape}")


def correctness(log: PredictionLog) -> CorrectnessMatrix:
    """Argmax correctness per (epoch, example); ties break toward the lowest class index."""
    preds = np.argmax(log.probs, axis=2)
    return CorrectnessMatrix(bits=preds == log.labels[np.newaxis, :].astype(np.int64))


def expected_size(epochs: int, examples: int, classes: int, with_mask: bool) -> int:
    """Total KFPL file size in bytes for the given dimensions."""
    size = _HEADER.size + 4 * examples
    if with_mask:
        size += (examples + 7) // 8
    return size + 4 * epochs * examples * classes


def write_log(log: PredictionLog, destination: str | Path | BinaryIO) -> int:
    """Serialize a log to the KFPL format. Returns the byte count written.

    Invariants are re-checked before any bytes are emitted; a log whose arrays
    were tampered with after construction is refused.
    """
    _validate(log.probs, log.labels, log.noise_mask, log.split_tag)
    flags = SPLIT_TAGS.index(log.split_tag) << _SPLIT_SHIFT
    if log.noise_mask is not None:
        flags |= FLAG_NOISE_MASK
    parts = [
        _HEADER.pack(MAGIC, VERSION, log.epochs, log.examples, log.classes, flags),
        log.labels.astype("<u4").tobytes(),
    ]
    if log.noise_mask is not None:
        parts.append(np.packbits(log.noise_mask, bitorder="little").tobytes())
    parts.append(log.probs.astype("<f4").tobytes())
    blob = b"".join(parts)
    if isinstance(destination, (str, Path)):
        Path(destination).write_bytes(blob)
    else:
        destination.write(blob)
    return len(blob)


def read_log(source: str | Path | BinaryIO | bytes) -> PredictionLog:
    """Parse and validate a KFPL byte stream; any defect is a hard error."""
    if isinstance(source, (str, Path)):
        blob = Path(source).read_bytes()
    elif isinstance(source, bytes):
        blob = source
    else:
        blob = source.read()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(
            f"expected at least {_HEADER.size} header bytes, got {len(blob)}")
    magic, version, e, n, c, flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    if flags & ~_KNOWN_FLAGS:
        raise FormatError(f"unknown flag bits 0x{flags & ~_KNOWN_FLAGS:x}")
    split_idx = (flags >> _SPLIT_SHIFT) & _SPLIT_MASK
    if split_idx >= len(SPLIT_TAGS):
        raise FormatError(f"invalid split tag value {split_idx}")
    with_mask = bool(flags & FLAG_NOISE_MASK)
    total = expected_size(e, n, c, with_mask)
    if len(blob) < total:
        raise TruncatedFileError(f"expected {total} bytes, got {len(blob)}")
    if len(blob) > total:
        raise FormatError(f"{len(blob) - total} trailing bytes after a {total}-byte log")

    offset = _HEADER.size
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset)
    offset += 4 * n
    mask = None
    if with_mask:
        nbytes = (n + 7) // 8
        packed = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=offset)
        mask = np.unpackbits(packed, count=n, bitorder="little").astype(bool)
        offset += nbytes
    probs = np.frombuffer(blob, dtype="<f4", count=e * n * c, offset=offset).reshape(e, n, c)
    return PredictionLog(probs=probs, labels=labels,
                         split_tag=SPLIT_TAGS[split_idx], noise_mask=mask)


def read_csv_log(probs_csv: str | Path, labels_csv: str | Path,
                 split_tag: str = "test") -> PredictionLog:
    """Import a log from "epoch,example,class,prob" rows plus an "example,label" sidecar.

    Meant for small hand-made fixtures; every (epoch, example, class) cell must
    appear exactly once.
    """
    entries: dict[tuple[int, int, int], float] = {}
    for row in _csv_rows(probs_csv, 4):
        key = (int(row[0]), int(row[1]), int(row[2]))
        if key in entries:
            raise LogValidationError(f"duplicate cell epoch={key[0]} example={key[1]} class={key[2]}")
        entries[key] = float(row[3])
    if not entries:
        raise LogValidationError(f"no probability rows in {probs_csv}")
    e = max(k[0] for k in entries) + 1
    n = max(k[1] for k in entries) + 1
    c = max(k[2] for k in entries) + 1
    if len(entries) != e * n * c:
        raise LogValidationError(
            f"incomplete tensor: {len(entries)} cells for dims E={e}, N={n}, C={c}")
    probs = np.zeros((e, n, c), dtype=np.float32)
    for (ei, ni, ci), p in entries.items():
        probs[ei, ni, ci] = p

    labels = np.zeros(n, dtype=np.uint32)
    seen = np.zeros(n, dtype=bool)
    for row in _csv_rows(labels_csv, 2):
        i = int(row[0])
        if i < 0 or i >= n:
            raise LogValidationError(f"label row for out-of-range example {i}")
        if seen[i]:
            raise LogValidationError(f"duplicate label for example {i}")
        labels[i] = int(row[1])
        seen[i] = True
    if not seen.all():
        raise LogValidationError(f"missing labels for examples {np.flatnonzero(~seen).tolist()}")
    return PredictionLog(probs=probs, labels=labels, split_tag=split_tag)


def _csv_rows(path: str | Path, width: int) -> Iterable[list[str]]:
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or (lineno == 0 and not _is_number(row[0])):
                continue  # blank line or header
            if len(row) != width:
                raise LogValidationError(f"{path}:{lineno + 1}: expected {width} columns, got {len(row)}")
            yield row


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True
