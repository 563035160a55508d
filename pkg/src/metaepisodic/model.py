"""Frozen-encoder features, residual adapter, and cosine-prototype scoring.

The classifier is: encode raw features with a fixed seeded projection,
blend the embedding with a small bottleneck MLP, renormalize, then score
against fixed unit-norm class prototypes by scaled cosine similarity.
Only the adapter weights train; encoder and prototypes never change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Node, NumericError

__all__ = [
    "FrozenEncoder",
    "ClassPrototypes",
    "AdapterParams",
    "Batch",
    "AdapterObjective",
    "ForwardResult",
    "encode",
    "forward",
    "accuracy_by_class",
    "zero_shot_class_accuracy",
]


@dataclass(frozen=True)
class FrozenEncoder:
    """Fixed projection standing in for a pretrained feature extractor.

    ``projection`` is ``None`` for the identity encoder (inputs already
    embedded); otherwise a seeded (raw_dim x dim) matrix that is never
    updated by training.
    """

    projection: np.ndarray | None = None

    @classmethod
    def identity(cls) -> "FrozenEncoder":
        return cls(projection=None)

    @classmethod
    def seeded(cls, raw_dim: int, dim: int, seed: int) -> "FrozenEncoder":
        rng = np.random.default_rng(seed)
        return cls(projection=rng.standard_normal((raw_dim, dim)))


def _normalize_rows_plain(x: np.ndarray, stage: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    small = norms < np.sqrt(np.finfo(np.float64).tiny)
    if np.any(small):
        raise NumericError(f"zero-norm embedding (row {int(np.argmax(small))}, {stage})")
    return x / norms[:, None]


def encode(encoder: FrozenEncoder, raw) -> np.ndarray:
    """Project raw rows through the fixed map and unit-normalize them."""
    raw = dc.as_matrix(raw)
    if encoder.projection is None:
        projected = raw
    else:
        if raw.shape[1] != encoder.projection.shape[0]:
            raise DimensionError(
                f"encoder expects {encoder.projection.shape[0]} input columns, "
                f"got {raw.shape[1]}"
            )
        projected = raw @ encoder.projection
    return _normalize_rows_plain(projected, "encode")


@dataclass(frozen=True)
class ClassPrototypes:
    """One fixed unit-norm row per class; immutable during training."""

    vectors: np.ndarray

    def __post_init__(self):
        vectors = dc.as_matrix(self.vectors)
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(f"prototype row {bad} is not unit norm ({norms[bad]:.12f})")
        object.__setattr__(self, "vectors", vectors)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Batch:
    """Embedded examples with integer class labels.

    ``restriction`` optionally maps global class ids to contiguous task-local
    indices; when present, scoring and losses use only those classes.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    restriction: dict[int, int] | None = None

    def __post_init__(self):
        embeddings = dc.as_matrix(self.embeddings)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != embeddings.shape[0]:
            raise DimensionError(
                f"labels shape {labels.shape} does not match {embeddings.shape[0]} rows"
            )
        if embeddings.shape[0] < 1:
            raise DimensionError("batch must contain at least one example")
        if self.restriction is not None:
            locals_ = sorted(self.restriction.values())
            if locals_ != list(range(len(self.restriction))):
                raise ValueError("restriction must map onto contiguous local indices")
            missing = set(labels.tolist()) - set(self.restriction)
            if missing:
                raise ValueError(f"labels {sorted(missing)} missing from restriction")
        object.__setattr__(self, "embeddings", embeddings)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def local_labels(self) -> np.ndarray:
        """Labels in scoring space: task-local if restricted, global otherwise."""
        if self.restriction is None:
            return self.labels
        return np.array([self.restriction[int(g)] for g in self.labels], dtype=np.int64)


@dataclass(frozen=True)
class AdapterParams:
    """Bottleneck-MLP adapter weights plus fixed blend and logit-scale knobs.

    ``blend`` and ``logit_scale`` are hyperparameters, not trained, and are
    therefore excluded from the flat parameter vector.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    blend: float = 0.5
    logit_scale: float = 10.0

    def __post_init__(self):
        w1 = dc.as_matrix(self.w1)
        b1 = dc.as_vector(self.b1)
        w2 = dc.as_matrix(self.w2)
        b2 = dc.as_vector(self.b2)
        d, h = w1.shape
        if w2.shape != (h, d) or b1.shape != (h,) or b2.shape != (d,):
            raise DimensionError(
                f"inconsistent adapter shapes: w1 {w1.shape}, b1 {b1.shape}, "
                f"w2 {w2.shape}, b2 {b2.shape}"
            )
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend ratio must lie in [0, 1], got {self.blend}")
        if not self.logit_scale > 0.0:
            raise ValueError(f"logit scale must be positive, got {self.logit_scale}")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def flatten(self) -> np.ndarray:
        """Concatenate w1, b1, w2, b2 row-major; exact inverse of unflatten."""
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]
        )

    @classmethod
    def unflatten(
        cls,
        flat,
        dim: int,
        hidden: int,
        blend: float = 0.5,
        logit_scale: float = 10.0,
    ) -> "AdapterParams":
        flat = dc.as_vector(flat)
        expected = param_length(dim, hidden)
        if flat.shape[0] != expected:
            raise DimensionError(
                f"flat length {flat.shape[0]} != {expected} for dim={dim} hidden={hidden}"
            )
        o1 = dim * hidden
        o2 = o1 + hidden
        o3 = o2 + hidden * dim
        return cls(
            w1=flat[:o1].reshape(dim, hidden),
            b1=flat[o1:o2],
            w2=flat[o2:o3].reshape(hidden, dim),
            b2=flat[o3:],
            blend=blend,
            logit_scale=logit_scale,
        )

    @classmethod
    def seeded(
        cls,
        dim: int,
        hidden: int,
        rng: np.random.Generator,
        blend: float = 0.5,
        logit_scale: float = 10.0,
    ) -> "AdapterParams":
        """Gaussian weights scaled by 1/sqrt(fan-in), zero biases."""
        return cls(
            w1=rng.standard_normal((dim, hidden)) / np.sqrt(dim),
            b1=np.zeros(hidden),
            w2=rng.standard_normal((hidden, dim)) / np.sqrt(hidden),
            b2=np.zeros(dim),
            blend=blend,
            logit_scale=logit_scale,
        )


def param_length(dim: int, hidden: int) -> int:
    """Flat adapter parameter count for the given widths."""
    return dim * hidden + hidden + hidden * dim + dim


@dataclass(frozen=True)
class AdapterObjective:
    """Cross-entropy over cosine-prototype scores of adapted embeddings.

    Satisfies the differentiable-objective contract: ``build`` assembles
    relu(x w1 + b1) w2 + b2, blends it with the input, renormalizes, scores
    against the (restricted) prototype rows, and reduces to mean
    cross-entropy over the batch.
    """

    prototypes: ClassPrototypes
    dim: int
    hidden: int
    blend: float = 0.5
    logit_scale: float = 10.0

    @property
    def param_length(self) -> int:
        return param_length(self.dim, self.hidden)

    def _scoring_targets(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Prototype rows and labels in scoring space for this batch."""
        if batch.restriction is None:
            if batch.labels.max() >= self.prototypes.count:
                raise DimensionError(
                    f"label {int(batch.labels.max())} has no prototype row"
                )
            return self.prototypes.vectors, batch.labels
        by_local = sorted(batch.restriction.items(), key=lambda kv: kv[1])
        global_ids = [g for g, _ in by_local]
        if max(global_ids) >= self.prototypes.count:
            raise DimensionError(f"class {max(global_ids)} has no prototype row")
        return self.prototypes.vectors[global_ids], batch.local_labels()

    def build(self, params: Node, batch: Batch) -> tuple[Node, np.ndarray]:
        if batch.embeddings.shape[1] != self.dim:
            raise DimensionError(
                f"batch dim {batch.embeddings.shape[1]} != adapter dim {self.dim}"
            )
        d, h = self.dim, self.hidden
        o1, o2, o3 = d * h, d * h + h, d * h + h + h * d
        w1 = dc.reshape(dc.segment(params, 0, o1), (d, h))
        b1 = dc.segment(params, o1, o2)
        w2 = dc.reshape(dc.segment(params, o2, o3), (h, d))
        b2 = dc.segment(params, o3, o3 + d)

        x = dc.constant(batch.embeddings)
        hidden_act = dc.relu(dc.add_bias(dc.matmul(x, w1), b1))
        residual = dc.add_bias(dc.matmul(hidden_act, w2), b2)
        blended = dc.lincomb(1.0 - self.blend, x, self.blend, residual)
        adapted = dc.normalize_rows(blended)

        proto_rows, labels = self._scoring_targets(batch)
        scores = dc.cosine_scores(adapted, proto_rows, self.logit_scale)
        loss = dc.softmax_cross_entropy(scores, labels)
        return loss, scores.value


@dataclass(frozen=True)
class ForwardResult:
    loss: float
    scores: np.ndarray
    correct: np.ndarray


def forward(params: AdapterParams, prototypes: ClassPrototypes, batch: Batch) -> ForwardResult:
    """Loss, raw scores, and per-example correctness for one batch.

    Argmax ties resolve to the lowest class index.
    """
    obj = AdapterObjective(
        prototypes=prototypes,
        dim=params.dim,
        hidden=params.hidden,
        blend=params.blend,
        logit_scale=params.logit_scale,
    )
    loss, scores = dc.evaluate(obj, params.flatten(), batch)
    predictions = np.argmax(scores, axis=1)
    correct = predictions == batch.local_labels()
    return ForwardResult(loss=loss, scores=scores, correct=correct)


def accuracy_by_class(scores: np.ndarray, labels) -> dict[int, float]:
    """Fraction of correctly argmax-classified rows per class present in labels."""
    scores = dc.as_matrix(scores)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != scores.shape[0]:
        raise DimensionError(
            f"labels shape {labels.shape} does not match {scores.shape[0]} score rows"
        )
    predictions = np.argmax(scores, axis=1)
    return {
        int(c): float(np.mean(predictions[labels == c] == c))
        for c in np.unique(labels)
    }


def zero_shot_class_accuracy(
    embeddings: np.ndarray, labels, prototypes: ClassPrototypes
) -> dict[int, float]:
    """Per-class accuracy of plain cosine matching against the prototypes."""
    embeddings = _normalize_rows_plain(dc.as_matrix(embeddings), "zero-shot")
    scores = embeddings @ prototypes.vectors.T
    return accuracy_by_class(scores, labels)
