"""Fixed-size set embeddings built from transport plans.

A set of N_x feature vectors is pushed onto a fixed reference set of N_z
points through an entropic transport plan; the barycentric displacement
X P* - Z is the embedding. Its shape depends only on the reference, so sets
of different sizes land in one vector space where Euclidean distance
approximates the 2-Wasserstein distance between the underlying measures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core_ot import (
    CostMatrix,
    DiscreteMeasure,
    SinkhornConfig,
    _as_float_array,
    sinkhorn,
)

__all__ = [
    "ReferenceSet",
    "WassersteinEmbedding",
    "attention_weights",
    "embed",
    "embedding_distance",
    "l2_normalize_embedding",
    "grouped_aggregate",
]

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ReferenceSet:
    """Reference points Z (d x N_z) with exactly uniform intensities.

    ``attention_element`` is the optional direction u used to score input
    features; None means uniform weighting only.
    """

    points: np.ndarray
    intensities: np.ndarray
    attention_element: np.ndarray | None = None

    def __post_init__(self):
        points = _as_float_array(self.points, "points", 2)
        if not np.all(np.isfinite(points)):
            raise ValueError("reference points must be finite")
        intensities = _as_float_array(self.intensities, "intensities", 1)
        n = points.shape[1]
        if intensities.shape[0] != n:
            raise ValueError(
                f"got {n} reference points but {intensities.shape[0]} intensities"
            )
        if not np.all(intensities == 1.0 / n):
            raise ValueError("reference intensities must all equal 1/N_z exactly")
        att = self.attention_element
        if att is not None:
            att = _as_float_array(att, "attention_element", 1)
            if att.shape[0] != points.shape[0]:
                raise ValueError(
                    f"attention_element has length {att.shape[0]}, points have dimension "
                    f"{points.shape[0]}"
                )
            if not np.all(np.isfinite(att)):
                raise ValueError("attention_element must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "intensities", intensities)
        object.__setattr__(self, "attention_element", att)

    @classmethod
    def create(cls, points, attention_element=None) -> "ReferenceSet":
        """Build a reference with the uniform intensities filled in."""
        pts = _as_float_array(points, "points", 2)
        n = pts.shape[1]
        return cls(pts, np.full(n, 1.0 / n), attention_element)

    @property
    def dim(self) -> int:
        return self.points.shape[0]

    @property
    def size(self) -> int:
        return self.points.shape[1]

    def as_measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.points, self.intensities)


@dataclass(frozen=True)
class WassersteinEmbedding:
    """Embedding matrix, d x N_z; shape set by the reference alone."""

    entries: np.ndarray

    def __post_init__(self):
        entries = _as_float_array(self.entries, "entries", 2)
        object.__setattr__(self, "entries", entries)

    @property
    def shape(self) -> tuple:
        return self.entries.shape


def attention_weights(u, features) -> np.ndarray:
    """Softmax of u . x over the feature columns, with max-subtraction."""
    u = _as_float_array(u, "u", 1)
    features = _as_float_array(features, "features", 2)
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite entries")
    if not np.all(np.isfinite(u)):
        raise ValueError("u contains non-finite entries")
    if u.shape[0] != features.shape[0]:
        raise ValueError(
            f"u has length {u.shape[0]}, features have dimension {features.shape[0]}"
        )
    scores = features.T @ u
    e = np.exp(scores - scores.max())
    return e / e.sum()


def embed(
    features,
    a,
    reference: ReferenceSet,
    config: SinkhornConfig,
    rescale_by_column_mass: bool = False,
) -> WassersteinEmbedding:
    """Barycentric displacement embedding X P* - Z.

    The plan P* couples the weighted feature set to the uniform reference.
    Column j of P* carries total mass 1/N_z, so the barycentric term is a
    1/N_z-scaled average of the features; ``rescale_by_column_mass`` divides
    each column by its mass first, turning the term into a true weighted
    average of the inputs. Default is the unrescaled displacement.
    """
    features = _as_float_array(features, "features", 2)
    source = DiscreteMeasure(features, a)
    cost = CostMatrix(
        kernels.squared_distances(
            np.ascontiguousarray(features.T),
            np.ascontiguousarray(reference.points.T),
        )
    )
    plan = sinkhorn(cost, source.intensities, reference.intensities, config)
    P = plan.entries
    if rescale_by_column_mass:
        P = P / reference.intensities.reshape(1, -1)
    entries = features @ P - reference.points
    return WassersteinEmbedding(entries)


def embedding_distance(e1: WassersteinEmbedding, e2: WassersteinEmbedding) -> float:
    """Squared Frobenius distance; approximates W2^2 between the originals."""
    if e1.entries.shape != e2.entries.shape:
        raise ValueError(
            f"shape mismatch: {e1.entries.shape} vs {e2.entries.shape}"
        )
    diff = e1.entries - e2.entries
    return float(np.sum(diff * diff))


def l2_normalize_embedding(e: WassersteinEmbedding) -> WassersteinEmbedding:
    """Scale to unit Frobenius norm; inputs below the floor pass through scaled by 1/floor."""
    norm = float(np.sqrt(np.sum(e.entries * e.entries)))
    return WassersteinEmbedding(e.entries / max(norm, NORM_FLOOR))


def grouped_aggregate(
    activations,
    references: list,
    config: SinkhornConfig,
    use_attention: bool = False,
) -> np.ndarray:
    """Per-frequency transport aggregation of a C x F x T activation tensor.

    Frequency bin f contributes the l2-normalized embedding of its T
    channel-vectors against references[f]; the F blocks are concatenated in
    frequency order. Weights are uniform 1/T, or softmax attention scores
    when ``use_attention`` is set (each reference must then carry an
    attention_element).
    """
    activations = np.asarray(activations, dtype=np.float64)
    if activations.ndim != 3:
        raise ValueError(
            f"activations must have shape (C, F, T), got {activations.shape}"
        )
    C, F, T = activations.shape
    if C < 1 or F < 1 or T < 1:
        raise ValueError(f"activations axes must be nonempty, got {activations.shape}")
    if len(references) != F:
        raise ValueError(
            f"need one reference per frequency bin: got {len(references)} references "
            f"for {F} bins"
        )
    parts = []
    for f, ref in enumerate(references):
        if ref.dim != C:
            raise ValueError(
                f"reference {f} has dimension {ref.dim}, activations have {C} channels"
            )
        feats = activations[:, f, :]
        if use_attention:
            if ref.attention_element is None:
                raise ValueError(
                    f"use_attention requires an attention_element on reference {f}"
                )
            a = attention_weights(ref.attention_element, feats)
        else:
            a = np.full(T, 1.0 / T)
        emb = l2_normalize_embedding(embed(feats, a, ref, config))
        parts.append(emb.entries.ravel())
    return np.concatenate(parts)
