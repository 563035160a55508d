"""Synthetic embedding banks with heterogeneous class difficulty, plus file I/O.

Class difficulty is controlled per class by the number of Gaussian modes and
their spread: one tight mode makes a class easy, several wide modes make it
hard. Banks round-trip through a small binary format so externally computed
features can be swapped in.

File formats
------------
Features ("EMB1", little-endian): 4 magic bytes ``EMB1``, u32 row count,
u32 dim, then ``count*dim`` float32 values row-major. Values are narrowed
from float64 to float32 on write, so round-trips are exact at float32
precision. Prototypes use the same format.

Labels: text, header line ``index,label``, then one ``row_index,class_id``
line per row.

Split: text, header line ``index,subset``, then one ``row_index,train|test``
line per row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .model import ClassPrototypes

__all__ = [
    "BankParseError",
    "SyntheticSpec",
    "EmbeddingBank",
    "generate",
    "write_features",
    "read_features",
    "write_labels",
    "read_labels",
    "write_bank",
    "read_bank",
    "write_split",
    "read_split",
    "subset_bank",
    "split_indices",
    "train_test_split",
]

_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
_U32_MAX = 2**32 - 1


class BankParseError(ValueError):
    """A bank file is malformed; the message carries the byte offset."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic bank.

    ``modes_per_class`` and ``spread_per_class`` have one entry per class;
    ``separation`` is the distance of each mode center from its class anchor.
    """

    class_count: int
    dim: int
    modes_per_class: tuple[int, ...]
    spread_per_class: tuple[float, ...]
    separation: float
    examples_per_class: int
    seed: int

    def __post_init__(self):
        if self.class_count < 1 or self.dim < 1 or self.examples_per_class < 1:
            raise ValueError("class_count, dim, and examples_per_class must be positive")
        if len(self.modes_per_class) != self.class_count:
            raise ValueError("modes_per_class must list one entry per class")
        if len(self.spread_per_class) != self.class_count:
            raise ValueError("spread_per_class must list one entry per class")
        if any(m < 1 for m in self.modes_per_class):
            raise ValueError("every class needs at least one mode")
        if any(not (np.isfinite(s) and s > 0.0) for s in self.spread_per_class):
            raise ValueError("spreads must be finite and positive")
        if not (np.isfinite(self.separation) and self.separation >= 0.0):
            raise ValueError("separation must be finite and non-negative")

    @classmethod
    def desk(cls, seed: int = 0) -> "SyntheticSpec":
        """Default desk-scale bank: classes 0-2 hard, 3-9 easy."""
        hard, easy = 3, 7
        return cls(
            class_count=hard + easy,
            dim=32,
            modes_per_class=(3,) * hard + (1,) * easy,
            spread_per_class=(0.6,) * hard + (0.1,) * easy,
            separation=1.5,
            examples_per_class=40,
            seed=seed,
        )

    @classmethod
    def easy_only(cls, seed: int = 0) -> "SyntheticSpec":
        """All classes single-mode and tight; near-ceiling zero-shot."""
        c = 10
        return cls(
            class_count=c,
            dim=32,
            modes_per_class=(1,) * c,
            spread_per_class=(0.1,) * c,
            separation=1.5,
            examples_per_class=40,
            seed=seed,
        )


@dataclass(frozen=True)
class EmbeddingBank:
    """Fixed feature rows with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = dc.as_matrix(self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must pair one class id with every feature row")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(
                f"label {int(labels.max())} outside class range 0..{self.class_count - 1}"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def class_rows(self, class_id: int) -> np.ndarray:
        """Row indices of one class, ascending."""
        return np.flatnonzero(self.labels == class_id)


def _orthonormal_anchors(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    draws = rng.standard_normal((count, dim))
    anchors = np.empty_like(draws)
    for i in range(count):
        v = draws[i].copy()
        for j in range(i):
            v -= (v @ anchors[j]) * anchors[j]
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            raise ValueError("anchor orthogonalization impossible: degenerate draw")
        anchors[i] = v / norm
    return anchors


def generate(spec: SyntheticSpec) -> tuple[EmbeddingBank, ClassPrototypes]:
    """Deterministically sample a bank and its prototypes from a spec.

    Anchors are orthonormalized seeded Gaussian draws; each class places its
    mode centers at ``separation`` from its anchor, samples rows mode-uniformly
    with the class spread, and unit-normalizes them. Prototypes are the
    anchors themselves, mirroring label embeddings that never see the data.
    """
    if spec.dim < spec.class_count:
        raise ValueError(
            f"anchor orthogonalization impossible: dim {spec.dim} < classes "
            f"{spec.class_count}"
        )
    rng = np.random.default_rng(spec.seed)
    anchors = _orthonormal_anchors(rng, spec.class_count, spec.dim)

    rows = []
    labels = []
    m = spec.examples_per_class
    for c in range(spec.class_count):
        n_modes = spec.modes_per_class[c]
        directions = rng.standard_normal((n_modes, spec.dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        centers = anchors[c] + spec.separation * directions
        which = rng.integers(0, n_modes, size=m)
        noise = rng.standard_normal((m, spec.dim)) * spec.spread_per_class[c]
        sampled = centers[which] + noise
        norms = np.linalg.norm(sampled, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError(f"degenerate zero-norm sample in class {c}")
        rows.append(sampled / norms)
        labels.extend([c] * m)

    bank = EmbeddingBank(
        features=np.vstack(rows),
        labels=np.asarray(labels, dtype=np.int64),
        class_count=spec.class_count,
    )
    return bank, ClassPrototypes(anchors)


def write_features(path, matrix: np.ndarray) -> None:
    """Write a float matrix in the EMB1 binary format (float32 narrowing)."""
    matrix = dc.as_matrix(matrix)
    rows, cols = matrix.shape
    if rows > _U32_MAX or cols > _U32_MAX:
        raise ValueError(f"matrix {rows}x{cols} exceeds the u32 header range")
    payload = matrix.astype("<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(_MAGIC, rows, cols) + payload)


def read_features(path) -> np.ndarray:
    """Read an EMB1 file back into a float64 matrix."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise BankParseError(
            f"bad magic {blob[:4]!r} at byte offset 0 (expected {_MAGIC!r})"
        )
    if len(blob) < _HEADER.size:
        raise BankParseError(
            f"truncated header at byte offset {len(blob)}: expected "
            f"{_HEADER.size} bytes, got {len(blob)}"
        )
    _, rows, cols = _HEADER.unpack_from(blob)
    expected = rows * cols * 4
    actual = len(blob) - _HEADER.size
    if actual != expected:
        raise BankParseError(
            f"payload mismatch at byte offset {_HEADER.size}: header declares "
            f"{rows}x{cols} ({expected} bytes), file holds {actual} bytes"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return values.astype(np.float64).reshape(rows, cols)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    lines = ["index,label"]
    lines.extend(f"{i},{int(c)}" for i, c in enumerate(labels))
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "index,label":
        raise BankParseError(f"labels file {path} missing 'index,label' header")
    labels = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            index, label = line.split(",")
            index, label = int(index), int(label)
        except ValueError as exc:
            raise BankParseError(f"labels file {path} line {lineno}: {line!r}") from exc
        if index != len(labels):
            raise BankParseError(
                f"labels file {path} line {lineno}: expected index {len(labels)}"
            )
        labels.append(label)
    return np.asarray(labels, dtype=np.int64)


def write_bank(bank: EmbeddingBank, features_path, labels_path) -> None:
    write_features(features_path, bank.features)
    write_labels(labels_path, bank.labels)


def read_bank(features_path, labels_path, class_count: int | None = None) -> EmbeddingBank:
    features = read_features(features_path)
    labels = read_labels(labels_path)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 0
    return EmbeddingBank(features=features, labels=labels, class_count=class_count)


def write_split(path, train_indices, test_indices) -> None:
    assignment = {int(i): "train" for i in train_indices}
    assignment.update({int(i): "test" for i in test_indices})
    lines = ["index,subset"]
    lines.extend(f"{i},{assignment[i]}" for i in sorted(assignment))
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "index,subset":
        raise BankParseError(f"split file {path} missing 'index,subset' header")
    train, test = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            index, subset = line.split(",")
            index = int(index)
        except ValueError as exc:
            raise BankParseError(f"split file {path} line {lineno}: {line!r}") from exc
        if subset == "train":
            train.append(index)
        elif subset == "test":
            test.append(index)
        else:
            raise BankParseError(
                f"split file {path} line {lineno}: unknown subset {subset!r}"
            )
    return np.asarray(train, dtype=np.int64), np.asarray(test, dtype=np.int64)


def subset_bank(bank: EmbeddingBank, indices) -> EmbeddingBank:
    indices = np.asarray(indices, dtype=np.int64)
    return EmbeddingBank(
        features=bank.features[indices],
        labels=bank.labels[indices],
        class_count=bank.class_count,
    )


def split_indices(
    bank: EmbeddingBank, test_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified disjoint train/test row indices, deterministic in seed.

    Every class keeps at least one row on each side; classes with fewer than
    two rows are rejected.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(bank.class_count):
        rows = bank.class_rows(c)
        if rows.size < 2:
            raise ValueError(
                f"class {c} has {rows.size} instances; need at least 2 to split"
            )
        n_test = int(round(rows.size * test_fraction))
        n_test = min(max(n_test, 1), rows.size - 1)
        order = rng.permutation(rows.size)
        test.extend(rows[order[:n_test]].tolist())
        train.extend(rows[order[n_test:]].tolist())
    return (
        np.asarray(sorted(train), dtype=np.int64),
        np.asarray(sorted(test), dtype=np.int64),
    )


def train_test_split(
    bank: EmbeddingBank, test_fraction: float, seed: int
) -> tuple[EmbeddingBank, EmbeddingBank]:
    """Stratified per-class split into disjoint train and test banks."""
    train_idx, test_idx = split_indices(bank, test_fraction, seed)
    return subset_bank(bank, train_idx), subset_bank(bank, test_idx)
