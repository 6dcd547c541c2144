"""Model-based instance labelling: cosine similarity between scene-instance
embeddings and per-object template embeddings, thresholded and arg-maxed."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import GeometryError

DEFAULT_THRESHOLD = 0.5
MIN_MASK_AREA = 200


@dataclass(frozen=True)
class EmbeddingMatrix:
    rows: np.ndarray
    ids: tuple

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=float)
        if r.ndim != 2 or len(r) != len(self.ids):
            raise GeometryError("embedding rows and ids differ in count")
        if len(r) and not np.allclose(np.linalg.norm(r, axis=1), 1.0, atol=1e-6):
            raise GeometryError("embedding rows must be unit-norm; use EmbeddingMatrix.normalized")
        object.__setattr__(self, "rows", r)
        object.__setattr__(self, "ids", tuple(self.ids))

    @classmethod
    def normalized(cls, rows, ids) -> "EmbeddingMatrix":
        r = np.asarray(rows, dtype=float)
        norm = np.linalg.norm(r, axis=1, keepdims=True)
        if np.any(norm <= 0):
            raise GeometryError("cannot normalize an all-zero embedding")
        return cls(r / norm, ids)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class InstanceAssignment:
    mask_id: object
    object_id: object
    score: float


@dataclass(frozen=True)
class SimilarityTensor:
    values: np.ndarray      # (M, N, R)
    mask_ids: tuple
    object_ids: tuple


def template_tensor(templates: EmbeddingMatrix):
    """Group template rows with ids ``(object_id, view_id)`` into an (N, R, C)
    array. Every object must have the same number of views."""
    objects = sorted({oid for oid, _ in templates.ids})
    per_obj = {o: [] for o in objects}
    for (oid, vid), row in sorted(zip(templates.ids, templates.rows), key=lambda x: x[0]):
        per_obj[oid].append(row)
    counts = {len(v) for v in per_obj.values()}
    if len(counts) != 1:
        raise GeometryError("objects have different template counts")
    return np.stack([np.stack(per_obj[o]) for o in objects]), tuple(objects)


def similarity(scene: EmbeddingMatrix, templates: EmbeddingMatrix) -> SimilarityTensor:
    """values[m, n, r] = <scene_m, template_{n,r}>."""
    if scene.dim != templates.dim:
        raise GeometryError(f"embedding dimension mismatch: {scene.dim} vs {templates.dim}")
    tmpl, objects = template_tensor(templates)
    values = np.clip(np.einsum("mc,nrc->mnr", scene.rows, tmpl), -1.0, 1.0)
    return SimilarityTensor(values, scene.ids, objects)


def assign(sim: SimilarityTensor, threshold: float = DEFAULT_THRESHOLD) -> list[InstanceAssignment]:
    """Best template score per object, then the best object per mask if it
    beats ``threshold``. Ties go to the lower object index."""
    if not -1.0 < threshold < 1.0:
        raise GeometryError("threshold must lie in (-1, 1)")
    out = []
    if sim.values.size == 0:
        return out
    per_object = sim.values.max(axis=2)
    best = np.argmax(per_object, axis=1)
    for m, n in enumerate(best):
        score = float(per_object[m, n])
        if score > threshold:
            out.append(InstanceAssignment(sim.mask_ids[m], sim.object_ids[n], score))
    return out


def filter_masks(masks: Sequence[np.ndarray], min_area: int = MIN_MASK_AREA) -> list[np.ndarray]:
    if min_area < 0:
        raise GeometryError("min_area must be non-negative")
    return [m for m in masks if int(np.count_nonzero(m)) >= min_area]
